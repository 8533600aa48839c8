"""Homographies: sampling, warping, point projection and robust estimation.

Pixel centres sit at integer coordinates, ``x`` is the column and ``y``
the row. Homographies map ``(x, y, 1)`` column vectors.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bayer import BayerImage
from .tensor import bilinear_matrix

log = logging.getLogger(__name__)

DET_EPS = 1e-12


def normalize(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) > DET_EPS:
        h = h / h[2, 2]
    return h


def inverse(h: np.ndarray) -> np.ndarray:
    if abs(np.linalg.det(h)) <= DET_EPS:
        raise np.linalg.LinAlgError("homography is singular")
    return normalize(np.linalg.inv(h))


def compose(*hs: np.ndarray) -> np.ndarray:
    """``compose(A, B)`` applies B first, then A."""
    out = np.eye(3)
    for h in hs:
        out = out @ h
    return normalize(out)


def project_points(points: np.ndarray, h: np.ndarray, return_valid: bool = False):
    """Map ``[N, 2]`` (x, y) points through ``h``.

    Points whose homogeneous ``w`` is (numerically) zero come back as NaN
    and are flagged invalid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hom = np.c_[pts, np.ones(len(pts))] @ np.asarray(h, dtype=np.float64).T
    w = hom[:, 2]
    valid = np.abs(w) >= DET_EPS
    out = np.full((len(pts), 2), np.nan)
    out[valid] = hom[valid, :2] / w[valid, None]
    return (out, valid) if return_valid else out


def in_frame(points: np.ndarray, shape: tuple[int, int], margin: float = 0.0) -> np.ndarray:
    """True where (x, y) lies inside ``[margin, W-1-margin] x [margin, H-1-margin]``."""
    h, w = shape[:2]
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    with np.errstate(invalid="ignore"):
        return (
            (p[:, 0] >= margin)
            & (p[:, 0] <= w - 1 - margin)
            & (p[:, 1] >= margin)
            & (p[:, 1] <= h - 1 - margin)
        )


def frame_corners(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape[:2]
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


# ------------------------------------------------------------------ sampling


class Family(enum.Enum):
    EXPOSURE = "exposure"
    PERSPECTIVE = "perspective"
    ROTATION = "rotation"
    SCALE = "scale"


@dataclass(frozen=True)
class TransformSpec:
    """Evaluation transform families, sampled uniformly from closed ranges.

    ``perspective`` bounds both the translation (fraction of the frame
    size) and the projective coefficients (in frame-normalised coordinates,
    where the frame spans [-1, 1]).
    """

    exposure: tuple[float, float] = (1.3, 2.0)
    perspective: float = 0.3
    rotation_deg: tuple[float, float] = (45.0, 90.0)
    scale: tuple[float, float] = (0.6, 1.4)


@dataclass(frozen=True)
class TrainingRange:
    """Half-widths of the truncated-normal training distribution.

    Each parameter is drawn from N(0, (range/2)^2) truncated to
    [-range, range]; the scale factor is ``1 + s``.
    """

    translation: float = 0.1
    rotation_deg: float = 30.0
    scale: float = 0.2
    perspective: float = 0.1


@dataclass(frozen=True)
class HomographyParams:
    tx: float = 0.0
    ty: float = 0.0
    angle_deg: float = 0.0
    scale: float = 1.0
    px: float = 0.0
    py: float = 0.0
    gain: float = 1.0


def build_homography(params: HomographyParams, shape: tuple[int, int]) -> np.ndarray:
    """translate . rotate . scale . perspective, all about the frame centre."""
    h, w = shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    half_w, half_h = max(w / 2.0, 1.0), max(h / 2.0, 1.0)
    centre = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    uncentre = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    to_unit = np.diag([1 / half_w, 1 / half_h, 1.0])
    from_unit = np.diag([half_w, half_h, 1.0])
    persp = from_unit @ np.array([[1, 0, 0], [0, 1, 0], [params.px, params.py, 1.0]]) @ to_unit
    a = math.radians(params.angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])
    scl = np.diag([params.scale, params.scale, 1.0])
    trans = np.array([[1, 0, params.tx * w], [0, 1, params.ty * h], [0, 0, 1.0]])
    return compose(centre, trans, rot, scl, persp, uncentre)


def _truncated_normal(rng: np.random.Generator, half_width: float) -> float:
    if half_width <= 0:
        return 0.0
    sigma = half_width / 2.0
    while True:
        v = rng.normal(0.0, sigma)
        if -half_width <= v <= half_width:
            return float(v)


def sample_training_params(rng: np.random.Generator, ranges: TrainingRange) -> HomographyParams:
    return HomographyParams(
        tx=_truncated_normal(rng, ranges.translation),
        ty=_truncated_normal(rng, ranges.translation),
        angle_deg=_truncated_normal(rng, ranges.rotation_deg),
        scale=1.0 + _truncated_normal(rng, ranges.scale),
        px=_truncated_normal(rng, ranges.perspective),
        py=_truncated_normal(rng, ranges.perspective),
    )


def sample_family_params(rng: np.random.Generator, family: Family, spec: TransformSpec) -> HomographyParams:
    if family is Family.EXPOSURE:
        return HomographyParams(gain=float(rng.uniform(*spec.exposure)))
    if family is Family.PERSPECTIVE:
        t, p = spec.perspective, spec.perspective
        return HomographyParams(
            tx=float(rng.uniform(-t, t)),
            ty=float(rng.uniform(-t, t)),
            px=float(rng.uniform(-p, p)),
            py=float(rng.uniform(-p, p)),
        )
    if family is Family.ROTATION:
        return HomographyParams(angle_deg=float(rng.uniform(*spec.rotation_deg)))
    if family is Family.SCALE:
        return HomographyParams(scale=float(rng.uniform(*spec.scale)))
    raise ValueError(f"unknown transform family {family!r}")


def sample_homography(
    seed,
    shape: tuple[int, int],
    ranges: TrainingRange | None = None,
    family: Family | None = None,
    spec: TransformSpec | None = None,
    max_retries: int = 100,
) -> tuple[np.ndarray, HomographyParams]:
    """Draw a homography for a frame of ``shape``.

    With ``family`` set the evaluation ranges of ``spec`` are used,
    otherwise the truncated-normal ``ranges``. ``seed`` may be an int or a
    Generator. Degenerate draws are redrawn up to ``max_retries`` times.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(max_retries):
        if family is not None:
            params = sample_family_params(rng, family, spec or TransformSpec())
        else:
            params = sample_training_params(rng, ranges or TrainingRange())
        h = build_homography(params, shape)
        if abs(np.linalg.det(h)) > DET_EPS:
            return h, params
    raise RuntimeError("could not sample a non-degenerate homography")


# ------------------------------------------------------------------- warping


def warp_array(img: np.ndarray, h: np.ndarray, out_shape: tuple[int, int] | None = None, return_mask: bool = False):
    """Inverse-map warp: ``out(p) = img(H^-1 p)`` with bilinear sampling.

    ``img`` is ``[H, W]`` or ``[C, H, W]``. Output pixels whose source falls
    outside the input frame are 0 and masked out.
    """
    arr = np.asarray(img)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, ih, iw = arr.shape
    oh, ow = out_shape or (ih, iw)
    ys, xs = np.mgrid[0:oh, 0:ow]
    grid = np.c_[xs.ravel(), ys.ravel()].astype(np.float64)
    src, ok = project_points(grid, inverse(h), return_valid=True)
    inside = ok & in_frame(np.where(ok[:, None], src, -1.0), (ih, iw))
    src = np.where(inside[:, None], src, 0.0)
    m = bilinear_matrix(src[:, 1], src[:, 0], ih, iw)
    flat = arr.reshape(c, ih * iw).astype(np.float64)
    out = np.asarray(m @ flat.T).T * inside[None]
    out = out.reshape(c, oh, ow).astype(arr.dtype)
    mask = inside.reshape(oh, ow)
    if squeeze:
        out = out[0]
    return (out, mask) if return_mask else out


def warp_image(img, h: np.ndarray):
    """Warp a :class:`BayerImage` (raster values directly, no re-mosaic) or an array."""
    if isinstance(img, BayerImage):
        return BayerImage(warp_array(img.data, h))
    return warp_array(img, h)


# ----------------------------------------------------------------- estimation


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalised DLT homography from >= 4 correspondences (least squares)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        return None
    t1 = _normalizing_transform(src)
    t2 = _normalizing_transform(dst)
    a = project_points(src, t1)
    b = project_points(dst, t2)
    n = len(a)
    rows = np.zeros((2 * n, 9))
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    one, zero = np.ones(n), np.zeros(n)
    rows[0::2] = np.c_[-x, -y, -one, zero, zero, zero, u * x, u * y, u]
    rows[1::2] = np.c_[zero, zero, zero, -x, -y, -one, v * x, v * y, v]
    _, sv, vt = np.linalg.svd(rows)
    if len(sv) >= 8 and sv[7] <= 1e-10 * max(sv[0], 1e-300):
        return None
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ hn @ t1
    if abs(h[2, 2]) <= DET_EPS or abs(np.linalg.det(h)) <= DET_EPS:
        return None
    return normalize(h)


def _collinear(p: np.ndarray, tol: float = 1e-6) -> bool:
    """True if any three of the four points are (nearly) collinear."""
    scale = max(np.ptp(p, axis=0).max(), 1e-12)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = p[i], p[j], p[k]
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area <= tol * scale * scale:
            return True
    return False


def reprojection_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    proj, ok = project_points(src, h, return_valid=True)
    err = np.linalg.norm(proj - dst, axis=1)
    return np.where(ok, err, np.inf)


@dataclass
class RansacResult:
    homography: np.ndarray | None
    inliers: np.ndarray
    iterations: int
    # inlier counts of every candidate model that was scored
    candidate_counts: list[int]

    @property
    def success(self) -> bool:
        return self.homography is not None


def estimate_homography_ransac(
    src: np.ndarray,
    dst: np.ndarray,
    threshold_px: float = 5.0,
    max_iters: int = 2000,
    seed=0,
    confidence: float = 0.99,
) -> RansacResult:
    """4-point RANSAC with normalised DLT and a least-squares refit on the inliers.

    A correspondence is an inlier when its forward reprojection error is
    below ``threshold_px``. The iteration budget adapts to the best inlier
    ratio seen so far and never exceeds ``max_iters``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    failure = RansacResult(None, np.zeros(n, dtype=bool), 0, [])
    if n < 4:
        return failure
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    best_h, best_mask, best_count = None, None, -1
    counts: list[int] = []
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        h = dlt(src[idx], dst[idx])
        if h is None:
            continue
        mask = reprojection_error(h, src, dst) < threshold_px
        count = int(mask.sum())
        counts.append(count)
        if count > best_count:
            best_h, best_mask, best_count = h, mask, count
            ratio = count / n
            if ratio >= 1.0:
                needed = it
            elif ratio > 0:
                denom = math.log(max(1.0 - ratio**4, 1e-12))
                needed = int(math.ceil(math.log(1.0 - confidence) / denom)) if denom < 0 else max_iters
    if best_h is None or best_count < 4:
        return RansacResult(None, np.zeros(n, dtype=bool), it, counts)

    refit = dlt(src[best_mask], dst[best_mask])
    if refit is not None:
        refit_mask = reprojection_error(refit, src, dst) < threshold_px
        # keep the refit only if it does not lose support
        if refit_mask.sum() >= best_count:
            best_h, best_mask = refit, refit_mask
    return RansacResult(best_h, best_mask, it, counts)


def corner_error(h_est: np.ndarray, h_true: np.ndarray, shape: tuple[int, int]) -> float:
    """Mean distance between the frame corners mapped by the two homographies."""
    c = frame_corners(shape)
    return float(np.linalg.norm(project_points(c, h_est) - project_points(c, h_true), axis=1).mean())


# ------------------------------------------------------------------ text io


def save_homography(path, h: np.ndarray) -> None:
    Path(path).write_text("\n".join(" ".join(f"{v:.10g}" for v in row) for row in np.asarray(h)) + "\n")


def load_homography(path) -> np.ndarray:
    values = Path(path).read_text().split()
    if len(values) != 9:
        raise ValueError(f"{path}: expected 9 numbers, found {len(values)}")
    return np.array([float(v) for v in values]).reshape(3, 3)
