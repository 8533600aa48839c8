"""Pseudo-labels, triplet sampling, the optimiser and the two training phases."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import geometry as G
from . import tensor as T
from .bayer import BayerImage, mosaic
from .evalmatch import extract_keypoints
from .losses import bce_loss, dissipation_peak_loss, triplet_loss
from .network import DESCRIPTOR_PREFIX, DETECTOR_PREFIX, BayerNet, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSample, corner_heatmap
from .tensor import ConfigurationError, Tensor

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    """Every tunable constant of training and evaluation, as key=value text."""

    seed: int = 0
    image_size: int = 64
    width_multiplier: float = 1.0
    train_samples: int = 500
    train_pairs: int = 200
    epochs: int = 5
    adaptation_epochs: int = 0
    adaptation_n: int = 25
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_peak: float = 0.001
    peak_block: int = 5
    label_sigma: float = 1.0
    margin: float = 1.0
    triplet_k: int = 64
    negative_radius: float = 8.0
    descriptor_scope: str = "head"
    max_shapes: int = 3
    noise_std: float = 0.02
    train_translation: float = 0.1
    train_rotation_deg: float = 30.0
    train_scale: float = 0.2
    train_perspective: float = 0.1
    threshold: float = 0.1
    nms_radius: int = 4
    max_keypoints: int = 2048
    eps_repeatability: float = 3.0
    eps_homography: float = 5.0
    ransac_iters: int = 2000
    monitor_samples: int = 64
    eval_max_side: int = 0

    def __post_init__(self) -> None:
        if self.descriptor_scope not in ("shared", "head"):
            raise ConfigurationError(f"descriptor_scope must be 'shared' or 'head', got {self.descriptor_scope!r}")
        if self.peak_block % 2 == 0:
            raise ConfigurationError(f"peak_block must be odd, got {self.peak_block}")
        if self.image_size % 8:
            raise ConfigurationError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.batch_size < 1 or self.adaptation_n < 1:
            raise ConfigurationError("batch_size and adaptation_n must be >= 1")

    @property
    def ranges(self) -> G.TrainingRange:
        return G.TrainingRange(
            self.train_translation, self.train_rotation_deg, self.train_scale, self.train_perspective
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def with_overrides(self, items: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(self)}
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, raw in items.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            kind = type(values[key])
            try:
                values[key] = kind(float(raw)) if kind is int and "." in str(raw) else kind(raw)
            except ValueError as exc:
                raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from exc
        return TrainConfig(**values)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls().with_overrides(parse_key_values(text))


def parse_key_values(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"line {n}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


# ----------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adaptive-moment updates for a fixed, named subset of parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = OptimState(lr, beta1, beta2, eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros(p.shape, dtype=np.float64)
            self.state.v[name] = np.zeros(p.shape, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, grad_scale: float = 1.0) -> None:
        s = self.state
        s.step += 1
        c1 = 1.0 - s.beta1**s.step
        c2 = 1.0 - s.beta2**s.step
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64) * grad_scale
            s.m[name] = s.beta1 * s.m[name] + (1 - s.beta1) * g
            s.v[name] = s.beta2 * s.v[name] + (1 - s.beta2) * g * g
            if s.lr == 0:
                continue
            update = s.lr * (s.m[name] / c1) / (np.sqrt(s.v[name] / c2) + s.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.dtype)


# ------------------------------------------------------------- pseudo-labels

ScoreFn = Callable[[BayerImage], np.ndarray]


def score_function(model) -> ScoreFn:
    """Wrap a :class:`BayerNet` (detector only, no graph) or pass a callable through."""
    if isinstance(model, BayerNet):

        def run(img: BayerImage) -> np.ndarray:
            with T.no_grad():
                return model.forward(img, with_descriptor=False).score.data[0].astype(np.float64)

        return run
    return model


@dataclass
class PseudoLabel:
    values: np.ndarray  # [H, W] in [0, 1]
    n_used: int


def homographic_adaptation(
    image: BayerImage,
    model,
    n: int = 25,
    seed=0,
    ranges: G.TrainingRange | None = None,
    homographies: Sequence[np.ndarray] | None = None,
) -> PseudoLabel:
    """Average of score maps over warped copies, mapped back to the input frame.

    Copy ``i`` is ``warp(image, H_i)``, so input pixel ``p`` sits at
    ``H_i p`` in it; its score is read there with bilinear interpolation.
    Each pixel is divided by the number of copies in which it stayed inside
    the frame. ``H_1`` is always the identity. ``homographies`` overrides
    the random draws (the identity is still prepended).
    """
    if n < 1:
        raise ConfigurationError(f"adaptation needs n >= 1, got {n}")
    score = score_function(model)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hs = [np.eye(3)]
    if homographies is not None:
        hs += [np.asarray(h, dtype=np.float64) for h in homographies][: n - 1]
    while len(hs) < n:
        hs.append(G.sample_homography(rng, image.shape, ranges=ranges or G.TrainingRange())[0])

    acc = np.zeros(image.shape)
    count = np.zeros(image.shape)
    for h in hs:
        s = np.asarray(score(G.warp_image(image, h)), dtype=np.float64)
        back, valid = G.warp_array(s, G.inverse(h), return_mask=True)
        acc += np.where(valid, back, 0.0)
        count += valid
    values = np.clip(acc / np.maximum(count, 1), 0.0, 1.0)
    return PseudoLabel(values, len(hs))


# ------------------------------------------------------------------ triplets


@dataclass
class TripletBatch:
    anchor: Tensor  # [K, D]
    positive: Tensor  # [K, D]
    negative: Tensor  # [K, D]
    margin: float
    anchor_xy: np.ndarray  # [K, 2] integer (x, y) in image 1
    positive_xy: np.ndarray  # [K, 2] projected (x, y) in image 2
    row_index: np.ndarray  # [K] index of each row among all candidate anchors
    negative_index: np.ndarray  # [K] candidate whose projection serves as the negative
    negative_xy: np.ndarray  # [K, 2] (x, y) of the negative in image 2
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.anchor_xy)


def sample_triplets(
    out1,
    out2,
    h: np.ndarray,
    k: int | None,
    seed=0,
    margin: float = 1.0,
    negative_radius: float = 8.0,
    threshold: float = 0.1,
    nms_radius: int = 4,
    keypoints: np.ndarray | None = None,
) -> TripletBatch | None:
    """Anchors at the top-``k`` detections of image 1 that project inside image 2.

    ``k=None`` takes every such detection.

    Positives are bilinear descriptor samples at the projections. Each
    negative is the positive of another row, drawn uniformly among rows
    whose projection lies more than ``negative_radius`` px away. Rows with
    no admissible negative are dropped. Returns None if fewer than one row
    survives.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d1, d2 = out1.descriptors, out2.descriptors
    shape2 = d2.shape[1:]
    warnings: list[str] = []
    if keypoints is None:
        kps = extract_keypoints(out1.score.data[0], threshold, nms_radius, max_keypoints=1 << 30).xy
    else:
        kps = np.asarray(keypoints, dtype=np.int64).reshape(-1, 2)
    proj, ok = G.project_points(kps, h, return_valid=True)
    inside = ok & G.in_frame(np.where(ok[:, None], proj, -1.0), shape2)
    kps, proj = kps[inside][:k], proj[inside][:k]
    if k is not None and len(kps) < k:
        warnings.append(f"only {len(kps)} of {k} anchors project into the second image")

    n = len(kps)
    neg = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        far = np.flatnonzero(np.linalg.norm(proj - proj[i], axis=1) > negative_radius)
        if len(far):
            neg[i] = far[rng.integers(len(far))]
    keep = np.flatnonzero(neg >= 0)
    if len(keep) < n:
        warnings.append(f"{n - len(keep)} anchors had no negative beyond {negative_radius} px")
    for w in warnings:
        log.warning(w)
    if len(keep) == 0:
        return None

    # positives for all n projections; kept rows read theirs and their negative's
    pos_all = T.l2_normalize_channels(T.sample_points(d2, proj))  # [D, n]
    ones = np.ones(len(keep))
    anchors = T.l2_normalize_channels(T.sample_points(d1, kps[keep]))
    positives = T.take_scaled(pos_all, keep, ones)
    negatives = T.take_scaled(pos_all, neg[keep], ones)
    return TripletBatch(
        T.transpose(anchors),
        T.transpose(positives),
        T.transpose(negatives),
        margin,
        kps[keep],
        proj[keep],
        keep,
        neg[keep],
        proj[neg[keep]],
        warnings,
    )


# ------------------------------------------------------------------- loops


class TrainingDiverged(RuntimeError):
    """A non-finite loss stopped training; ``checkpoint`` holds the last good parameters."""

    def __init__(self, message: str, checkpoint: bytes):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class EpochLog:
    epoch: int
    bce: float
    peak: float
    triplet: float
    wall_seconds: float

    def to_tsv(self) -> str:
        return f"{self.epoch}\t{self.bce:.6f}\t{self.peak:.6f}\t{self.triplet:.6f}\t{self.wall_seconds:.3f}"


LOG_HEADER = "epoch\tbce\tpeak\ttriplet\twall_seconds"


@dataclass
class TrainResult:
    checkpoint: bytes
    history: list[EpochLog]
    initial_bce: float = math.nan
    final_bce: float = math.nan

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [e.to_tsv() for e in self.history]) + "\n"


def make_network(config: TrainConfig, seed: int | None = None) -> BayerNet:
    from .network import NetworkConfig

    return BayerNet(NetworkConfig(width_multiplier=config.width_multiplier), seed=config.seed if seed is None else seed)


def _restore(net: BayerNet, blob: bytes) -> None:
    good = load_checkpoint(blob, net.config)
    for name, p in good.params.items():
        net.params[name].data = p.data


def _check_finite(value: float, net: BayerNet, last_good: bytes, what: str) -> None:
    if not math.isfinite(value):
        _restore(net, last_good)
        raise TrainingDiverged(f"non-finite {what} loss; parameters restored to the last good step", last_good)


def detector_targets(
    sample: SyntheticSample, config: TrainConfig, net: BayerNet | None = None, adapt_seed=None
) -> tuple[np.ndarray, np.ndarray]:
    """Target map and peak-block centres for one sample.

    Without ``net`` the analytic corners give both. With ``net`` the target
    is the homographic-adaptation pseudo-label and the centres are its
    local maxima.
    """
    shape = sample.bayer.shape
    if net is None:
        return corner_heatmap(sample.corners, shape, config.label_sigma), sample.corners
    label = homographic_adaptation(sample.bayer, net, config.adaptation_n, adapt_seed, config.ranges).values
    peaks = extract_keypoints(label, config.threshold, config.nms_radius, config.max_keypoints).xy
    return label, peaks


def monitor_bce(net: BayerNet, samples: Sequence[SyntheticSample], config: TrainConfig) -> float:
    """Mean BCE of the current detector against analytic-corner targets."""
    values = []
    with T.no_grad():
        for s in samples:
            target, _ = detector_targets(s, config)
            values.append(bce_loss(net.forward(s.bayer, with_descriptor=False).score, target).item())
    return float(np.mean(values)) if values else math.nan


def train_detector(
    net: BayerNet,
    data: Sequence[SyntheticSample],
    config: TrainConfig,
    epochs: int | None = None,
    seed: int | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Detector pre-training with the descriptor head frozen.

    ``epochs`` synthetic-label epochs are followed by
    ``config.adaptation_epochs`` epochs on homographic-adaptation labels.
    Loss per sample is BCE + lambda_peak * peak loss; gradients are
    averaged over ``batch_size`` samples before each update.
    """
    epochs = config.epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    trainable = {n: p for n, p in net.named_parameters(lambda n: not n.startswith(DESCRIPTOR_PREFIX))}
    opt = Adam(trainable, config.lr, config.beta1, config.beta2, config.adam_eps)
    monitor = list(data[: config.monitor_samples])
    initial = monitor_bce(net, monitor, config)
    last_good = save_checkpoint(net)
    history: list[EpochLog] = []
    start = time.perf_counter()
    rng = np.random.default_rng([seed, 1])
    for epoch in range(epochs + config.adaptation_epochs):
        adapting = epoch >= epochs
        order = rng.permutation(len(data))
        sums = np.zeros(2)
        # adaptation labels come from the network as it stood when the epoch began
        teacher = load_checkpoint(save_checkpoint(net)) if adapting else None
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0 : b0 + config.batch_size]
            opt.zero_grad()
            for idx in batch:
                sample = data[idx]
                target, peaks = detector_targets(sample, config, teacher, [seed, epoch, int(idx)])
                out = net.forward(sample.bayer, with_descriptor=False)
                bce = bce_loss(out.score, target)
                peak = dissipation_peak_loss(out.score, peaks, config.peak_block)
                loss = T.add(bce, T.scale(peak, config.lambda_peak))
                _check_finite(loss.item(), net, last_good, "detector")
                T.backward(T.scale(loss, 1.0 / len(batch)))
                sums += (bce.item(), peak.item())
            opt.step()
            last_good = save_checkpoint(net)
        n = max(len(order), 1)
        entry = EpochLog(epoch + 1, sums[0] / n, sums[1] / n, 0.0, time.perf_counter() - start)
        history.append(entry)
        _emit(entry, log_path, first=epoch == 0)
    final = monitor_bce(net, monitor, config)
    return TrainResult(save_checkpoint(net), history, initial, final)


def _emit(entry: EpochLog, log_path, first: bool) -> None:
    log.info("epoch %d: bce %.4f peak %.4f triplet %.4f (%.1fs)", entry.epoch, entry.bce, entry.peak, entry.triplet, entry.wall_seconds)
    if log_path is None:
        return
    path = Path(log_path)
    with path.open("w" if first else "a") as fh:
        if first:
            fh.write(LOG_HEADER + "\n")
        fh.write(entry.to_tsv() + "\n")


def warped_view(sample: SyntheticSample, h: np.ndarray, rng: np.random.Generator) -> BayerImage:
    """Second view of ``sample``: warp the clean RGB, add fresh noise, mosaic."""
    base = sample.clean if sample.clean is not None else sample.rgb
    warped = G.warp_array(base, h)
    if sample.noise_std > 0:
        warped = warped + rng.normal(0.0, sample.noise_std, warped.shape)
    return mosaic(np.clip(warped, 0.0, 1.0).astype(np.float32))


def make_pair_views(sample: SyntheticSample, config: TrainConfig, rng: np.random.Generator):
    h, _ = G.sample_homography(rng, sample.bayer.shape, ranges=config.ranges)
    return sample.bayer, warped_view(sample, h, rng), h


def descriptor_trainable(net: BayerNet, scope: str) -> dict[str, Tensor]:
    if scope == "head":
        keep = lambda n: n.startswith(DESCRIPTOR_PREFIX)  # noqa: E731
    else:
        keep = lambda n: not n.startswith(DETECTOR_PREFIX)  # noqa: E731
    return dict(net.named_parameters(keep))


def train_descriptor(
    net: BayerNet,
    data: Sequence[SyntheticSample],
    config: TrainConfig,
    epochs: int | None = None,
    seed: int | None = None,
    log_path: str | Path | None = None,
    on_step: Callable[[BayerNet, BayerNet], None] | None = None,
) -> TrainResult:
    """Siamese triplet training: both views go through the same ``net``.

    Each step draws a training-range homography, builds the second view,
    samples triplets from the detections of the first and takes one
    optimiser step. The detector head is not updated.
    """
    epochs = config.epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    opt = Adam(descriptor_trainable(net, config.descriptor_scope), config.lr, config.beta1, config.beta2, config.adam_eps)
    last_good = save_checkpoint(net)
    history: list[EpochLog] = []
    start = time.perf_counter()
    order_rng = np.random.default_rng([seed, 2])
    for epoch in range(epochs):
        total, steps = 0.0, 0
        for idx in order_rng.permutation(len(data)):
            rng = np.random.default_rng([seed, 3, epoch, int(idx)])
            img1, img2, h = make_pair_views(data[idx], config, rng)
            branch_a, branch_b = net, net
            if on_step is not None:
                on_step(branch_a, branch_b)
            out1 = branch_a.forward(img1)
            out2 = branch_b.forward(img2)
            batch = sample_triplets(
                out1, out2, h, config.triplet_k, rng, config.margin, config.negative_radius,
                config.threshold, config.nms_radius,
            )
            if batch is None:
                continue
            loss = triplet_loss(batch.anchor, batch.positive, batch.negative, batch.margin)
            _check_finite(loss.item(), net, last_good, "triplet")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            last_good = save_checkpoint(net)
            total += loss.item()
            steps += 1
        entry = EpochLog(epoch + 1, 0.0, 0.0, total / max(steps, 1), time.perf_counter() - start)
        history.append(entry)
        _emit(entry, log_path, first=epoch == 0)
    return TrainResult(save_checkpoint(net), history)


# ---------------------------------------------------------------- held-out


@dataclass
class Separation:
    d_pos: float
    d_neg: float
    count: int

    @property
    def margin(self) -> float:
        return self.d_neg - self.d_pos


def descriptor_separation(net: BayerNet, data: Sequence[SyntheticSample], config: TrainConfig, seed: int = 0) -> Separation:
    """Mean L2 distance of positive and random negative descriptor pairs on fresh views."""
    pos, neg = [], []
    with T.no_grad():
        for i, sample in enumerate(data):
            rng = np.random.default_rng([seed, 4, i])
            img1, img2, h = make_pair_views(sample, config, rng)
            batch = sample_triplets(
                net.forward(img1), net.forward(img2), h, None, rng, config.margin,
                config.negative_radius, config.threshold, config.nms_radius,
            )
            if batch is None:
                continue
            a, p, n = batch.anchor.data, batch.positive.data, batch.negative.data
            pos.extend(np.linalg.norm(a - p, axis=1))
            neg.extend(np.linalg.norm(a - n, axis=1))
    if not pos:
        return Separation(math.nan, math.nan, 0)
    return Separation(float(np.mean(pos)), float(np.mean(neg)), len(pos))


def detector_repeatability(net: BayerNet, data: Sequence[SyntheticSample], config: TrainConfig, seed: int = 0) -> float:
    """Mean two-sided repeatability on fresh training-range views of ``data``."""
    from .evalmatch import repeatability

    values = []
    for i, sample in enumerate(data):
        rng = np.random.default_rng([seed, 5, i])
        img1, img2, h = make_pair_views(sample, config, rng)
        score = score_function(net)
        k1 = extract_keypoints(score(img1), config.threshold, config.nms_radius, config.max_keypoints)
        k2 = extract_keypoints(score(img2), config.threshold, config.nms_radius, config.max_keypoints)
        r = repeatability(k1, k2, h, config.eps_repeatability, img1.shape, img2.shape)
        # a pair with nothing detected repeats nothing
        values.append(0.0 if r is None else r)
    return float(np.mean(values)) if values else 0.0


def held_out_matching(net: BayerNet, data: Sequence[SyntheticSample], config: TrainConfig, seed: int = 0):
    """Detect, match and score fresh training-range views of ``data`` at ``eps_homography``."""
    from .evalmatch import homography_metrics, make_pair

    kw = dict(threshold=config.threshold, nms_radius=config.nms_radius, max_keypoints=config.max_keypoints)
    pairs = []
    for i, sample in enumerate(data):
        rng = np.random.default_rng([seed, 6, i])
        img1, img2, h = make_pair_views(sample, config, rng)
        pairs.append(make_pair(net.infer, img1, img2, h, name=f"held/{i}", **kw))
    return homography_metrics(pairs, config.eps_homography, config.eps_repeatability, seed=seed)
