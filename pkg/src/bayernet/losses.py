"""Training objectives: detector cross-entropy, peak sharpening, descriptor triplets."""
from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, make_op, weighted_total

LOG_CLAMP = 1e-12


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; logs are taken of values clamped to >= 1e-12."""
    t = np.asarray(target, dtype=np.float64)
    if t.size != pred.data.size:
        raise DimensionError(f"bce_loss: target {t.shape} vs prediction {pred.shape}")
    t = t.reshape(pred.shape)
    p = pred.data.astype(np.float64)
    n = p.size
    p_pos = np.maximum(p, LOG_CLAMP)
    p_neg = np.maximum(1.0 - p, LOG_CLAMP)
    value = -(t * np.log(p_pos) + (1 - t) * np.log(p_neg)).sum() / n

    def backward_fn(g):
        # the clamp is flat below the threshold, so its branch contributes nothing there
        d_pos = np.where(p > LOG_CLAMP, t / p_pos, 0.0)
        d_neg = np.where(1.0 - p > LOG_CLAMP, (1 - t) / p_neg, 0.0)
        return ((g[0] * (d_neg - d_pos) / n).astype(pred.dtype),)

    return make_op("bce", np.array([value], dtype=pred.dtype), (pred,), backward_fn)


def distance_block(n: int, keypoint: tuple[float, float]) -> np.ndarray:
    """``[n, n]`` Euclidean distance of each cell to ``keypoint`` (x, y in block coordinates)."""
    ys, xs = np.mgrid[0:n, 0:n]
    return np.hypot(xs - keypoint[0], ys - keypoint[1])


def block_peak_loss(block: np.ndarray, keypoint: tuple[float, float]) -> float:
    """Distance-weighted score mass of one block: sum of d(cell, keypoint) * S(cell)."""
    b = np.asarray(block, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise DimensionError(f"block must be square, got {b.shape}")
    return float((distance_block(b.shape[0], keypoint) * b).sum())


def peak_weights(keypoints: np.ndarray, shape: tuple[int, int], block: int = 5) -> np.ndarray:
    """Per-pixel weight map so that ``sum(W * S)`` is the mean block loss.

    One ``block x block`` window is centred on every keypoint; cells that
    fall off the raster are dropped.
    """
    h, w = shape
    kps = np.asarray(keypoints, dtype=np.int64).reshape(-1, 2)
    out = np.zeros((h, w))
    if len(kps) == 0:
        return out
    r = block // 2
    ys, xs = np.mgrid[0:h, 0:w]
    for x, y in kps:
        win = (np.abs(xs - x) <= r) & (np.abs(ys - y) <= r)
        out += np.where(win, np.hypot(xs - x, ys - y), 0.0)
    return out / len(kps)


def dissipation_peak_loss(score: Tensor, keypoints: np.ndarray, block: int = 5) -> Tensor:
    """Mean over keypoint-centred blocks of the distance-weighted score mass.

    Pushes score away from the neighbours of each labelled keypoint so the
    response peaks at a single pixel.
    """
    if block % 2 == 0:
        raise ValueError(f"block size must be odd, got {block}")
    h, w = score.shape[-2:]
    weights = peak_weights(keypoints, (h, w), block).reshape(score.shape)
    return weighted_total(score, weights)


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 1.0) -> Tensor:
    """Mean over rows of ``max(0, |a-p|^2 - |a-n|^2 + margin)`` for ``[K, D]`` inputs."""
    if not (anchor.shape == positive.shape == negative.shape) or len(anchor.shape) != 2:
        raise DimensionError(
            f"triplet_loss: shapes {anchor.shape}, {positive.shape}, {negative.shape} must match and be [K, D]"
        )
    a = anchor.data.astype(np.float64)
    p = positive.data.astype(np.float64)
    n = negative.data.astype(np.float64)
    k = a.shape[0]
    d_pos = ((a - p) ** 2).sum(1)
    d_neg = ((a - n) ** 2).sum(1)
    hinge = d_pos - d_neg + margin
    active = (hinge > 0).astype(np.float64)[:, None]
    value = np.maximum(hinge, 0.0).sum() / k

    def backward_fn(g):
        s = g[0] * active / k
        ga = 2 * s * (n - p)
        gp = 2 * s * (p - a)
        gn = 2 * s * (a - n)
        return tuple(x.astype(anchor.dtype) for x in (ga, gp, gn))

    return make_op("triplet", np.array([value], dtype=anchor.dtype), (anchor, positive, negative), backward_fn)
