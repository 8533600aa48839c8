"""Keypoint extraction, matching and the evaluation protocols."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import geometry as G
from .bayer import BayerImage, mosaic
from .tensor import DimensionError

EPS_REPEATABILITY = 3.0
EPS_HOMOGRAPHY = 5.0
SCORE_THRESHOLD = 0.1
MAX_KEYPOINTS = 2048
NMS_RADIUS = 4


@dataclass
class Keypoints:
    """Integer keypoints ``xy`` ([K, 2], columns x then y) sorted by descending score."""

    xy: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.xy)

    @classmethod
    def empty(cls) -> "Keypoints":
        return cls(np.zeros((0, 2)), np.zeros(0))

    def to_text(self) -> str:
        return "".join(f"{x} {y} {s:.9g}\n" for (x, y), s in zip(self.xy, self.scores))

    @classmethod
    def from_text(cls, text: str) -> "Keypoints":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if not rows:
            return cls.empty()
        return cls(np.array([[int(r[0]), int(r[1])] for r in rows]), np.array([float(r[2]) for r in rows]))


def extract_keypoints(
    score: np.ndarray,
    threshold: float = SCORE_THRESHOLD,
    nms_radius: int = NMS_RADIUS,
    max_keypoints: int = MAX_KEYPOINTS,
) -> Keypoints:
    """Local maxima of the score map over a (2r+1)^2 window.

    Scores are ranked by value, then by (y, x) ascending, so a pixel
    survives only if it outranks every other pixel in its window. The
    surviving pixels at or above ``threshold`` are returned best first,
    capped at ``max_keypoints``.
    """
    s = np.asarray(score, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"score map must be 2-D, got shape {s.shape}")
    if nms_radius < 1:
        raise ValueError("nms_radius must be >= 1")
    h, w = s.shape
    r = int(nms_radius)
    padded = np.full((h + 2 * r, w + 2 * r), -np.inf)
    padded[r : r + h, r : r + w] = s
    keep = s >= threshold
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            other = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            # neighbour earlier in raster order wins ties
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (s > other) if earlier else (s >= other)
    ys, xs = np.nonzero(keep)
    vals = s[ys, xs]
    order = np.lexsort((xs, ys, -vals))[:max_keypoints]
    return Keypoints(np.c_[xs[order], ys[order]], vals[order])


def sample_descriptors(desc: np.ndarray, kps: Keypoints) -> np.ndarray:
    """``[K, D]`` descriptor rows at integer keypoints, renormalised to unit length."""
    d = np.asarray(desc)
    if len(kps) == 0:
        return np.zeros((0, d.shape[0]), dtype=np.float32)
    rows = d[:, kps.xy[:, 1], kps.xy[:, 0]].T.astype(np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = np.where(norms > 1e-12, rows / np.maximum(norms, 1e-12), rows)
    return rows.astype(np.float32)


@dataclass
class MatchResult:
    pairs: np.ndarray  # [M, 2] indices into A and B
    distances: np.ndarray  # [M]

    def __len__(self) -> int:
        return len(self.pairs)


def _distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def match_bruteforce(desc_a: np.ndarray, desc_b: np.ndarray, cross_check: bool = True) -> MatchResult:
    """Nearest neighbour in B (L2) for every row of A; ties go to the lower index.

    With ``cross_check`` only mutual nearest neighbours are kept.
    """
    desc_a = np.asarray(desc_a)
    desc_b = np.asarray(desc_b)
    if desc_a.ndim != 2 or desc_b.ndim != 2 or desc_a.shape[1] != desc_b.shape[1]:
        raise DimensionError(f"descriptor dims differ: {desc_a.shape} vs {desc_b.shape}")
    if len(desc_a) == 0 or len(desc_b) == 0:
        return MatchResult(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    d = _distance_matrix(desc_a, desc_b)
    nn_ab = d.argmin(axis=1)
    idx_a = np.arange(len(desc_a))
    if cross_check:
        nn_ba = d.argmin(axis=0)
        idx_a = idx_a[nn_ba[nn_ab] == idx_a]
    pairs = np.c_[idx_a, nn_ab[idx_a]].astype(np.int64)
    return MatchResult(pairs, d[pairs[:, 0], pairs[:, 1]])


def _shared(kps_a: Keypoints, kps_b: Keypoints, h: np.ndarray, shape_a, shape_b):
    """Project both sets into the other frame and keep those that land inside it."""
    pa = G.project_points(kps_a.xy, h)
    pb = G.project_points(kps_b.xy, G.inverse(h))
    va = G.in_frame(pa, shape_b)
    vb = G.in_frame(pb, shape_a)
    return pa, pb, va, vb


def repeatability(
    kps_a: Keypoints,
    kps_b: Keypoints,
    h: np.ndarray,
    eps: float = EPS_REPEATABILITY,
    shape_a: tuple[int, int] | None = None,
    shape_b: tuple[int, int] | None = None,
    two_sided: bool = True,
    shared_region: bool = True,
) -> float | None:
    """Fraction of keypoints with a counterpart within ``eps`` pixels.

    By default both sides are counted and only points that project into
    the other frame take part. ``two_sided=False`` counts A's points only;
    ``shared_region=False`` keeps every point in the denominator.
    Counterparts may be shared. Returns None when no point is valid.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if shape_a is None or shape_b is None:
        raise ValueError("frame shapes are required")
    pa, pb, va, vb = _shared(kps_a, kps_b, h, shape_a, shape_b)
    if not shared_region:
        va = np.ones(len(kps_a), dtype=bool)
        vb = np.ones(len(kps_b), dtype=bool)
    n_valid = int(va.sum()) + (int(vb.sum()) if two_sided else 0)
    if n_valid == 0:
        return None
    xb = kps_b.xy[vb].astype(np.float64)
    xa = kps_a.xy[va].astype(np.float64)
    rep_a = rep_b = 0
    if len(xa) and len(xb):
        # A side measured in frame B, B side in frame A
        da = np.linalg.norm(pa[va][:, None] - xb[None], axis=2)
        db = np.linalg.norm(xa[:, None] - pb[vb][None], axis=2)
        rep_a = int((da.min(axis=1) <= eps).sum())
        rep_b = int((db.min(axis=0) <= eps).sum()) if two_sided else 0
    return (rep_a + rep_b) / n_valid


@dataclass
class PairData:
    """Everything the homography metrics need about one image pair."""

    kps_a: Keypoints
    kps_b: Keypoints
    desc_a: np.ndarray
    desc_b: np.ndarray
    h_true: np.ndarray
    shape_a: tuple[int, int]
    shape_b: tuple[int, int]
    name: str = ""


@dataclass
class PairMetrics:
    name: str
    keypoints_a: int
    keypoints_b: int
    matches: int
    correct: int
    ransac_inliers: int
    repeatability: float | None
    matching_accuracy: float | None
    homography_correct: bool
    corner_error: float | None
    matching_score: float | None
    inlier_ratio: float | None


@dataclass
class MetricsReport:
    repeatability: float | None
    mma: float | None
    mha: float | None
    ms: float | None
    eps_rep: float
    eps_hom: float
    keypoints: int
    matches: int
    inliers: int
    inlier_ratio: float | None = None
    pairs: list[PairMetrics] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("pairs")
        return d


def evaluate_pair(
    pair: PairData,
    eps: float = EPS_HOMOGRAPHY,
    eps_rep: float = EPS_REPEATABILITY,
    cross_check: bool = True,
    ransac_iters: int = 2000,
    seed: int = 0,
) -> PairMetrics:
    matches = match_bruteforce(pair.desc_a, pair.desc_b, cross_check=cross_check)
    m = len(matches)
    src = pair.kps_a.xy[matches.pairs[:, 0]].astype(np.float64)
    dst = pair.kps_b.xy[matches.pairs[:, 1]].astype(np.float64)
    correct = 0
    if m:
        err = np.linalg.norm(G.project_points(src, pair.h_true) - dst, axis=1)
        correct = int((err < eps).sum())

    _, _, va, vb = _shared(pair.kps_a, pair.kps_b, pair.h_true, pair.shape_a, pair.shape_b)
    denom = min(int(va.sum()), int(vb.sum()))

    result = G.estimate_homography_ransac(src, dst, threshold_px=eps, max_iters=ransac_iters, seed=seed)
    cerr = G.corner_error(result.homography, pair.h_true, pair.shape_a) if result.success else None
    return PairMetrics(
        name=pair.name,
        keypoints_a=len(pair.kps_a),
        keypoints_b=len(pair.kps_b),
        matches=m,
        correct=correct,
        ransac_inliers=int(result.inliers.sum()),
        repeatability=repeatability(pair.kps_a, pair.kps_b, pair.h_true, eps_rep, pair.shape_a, pair.shape_b),
        matching_accuracy=correct / m if m else None,
        homography_correct=bool(cerr is not None and cerr < eps),
        corner_error=cerr,
        matching_score=min(correct / denom, 1.0) if denom else None,
        inlier_ratio=int(result.inliers.sum()) / m if m else None,
    )


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(per_pair: Sequence[PairMetrics], eps: float, eps_rep: float) -> MetricsReport:
    """MMA and MS average over pairs with at least one match; MHA counts every pair."""
    with_matches = [p for p in per_pair if p.matches > 0]
    return MetricsReport(
        repeatability=_mean(p.repeatability for p in per_pair),
        mma=_mean(p.matching_accuracy for p in with_matches),
        mha=(sum(p.homography_correct for p in per_pair) / len(per_pair)) if per_pair else None,
        ms=_mean(p.matching_score for p in with_matches),
        eps_rep=eps_rep,
        eps_hom=eps,
        keypoints=sum(p.keypoints_a + p.keypoints_b for p in per_pair),
        matches=sum(p.matches for p in per_pair),
        inliers=sum(p.correct for p in per_pair),
        inlier_ratio=_mean(p.inlier_ratio for p in with_matches),
        pairs=list(per_pair),
    )


def homography_metrics(
    pairs: Sequence[PairData],
    eps: float = EPS_HOMOGRAPHY,
    eps_rep: float = EPS_REPEATABILITY,
    cross_check: bool = True,
    seed: int = 0,
) -> MetricsReport:
    per_pair = [evaluate_pair(p, eps, eps_rep, cross_check, seed=seed + i) for i, p in enumerate(pairs)]
    return aggregate(per_pair, eps, eps_rep)


# ------------------------------------------------------------- model driving

# A model maps a raw image to (score map [H, W], descriptor map [D, H, W]).
Model = Callable[[BayerImage], tuple[np.ndarray, np.ndarray]]


def detect_and_describe(
    model: Model,
    image: BayerImage,
    threshold: float = SCORE_THRESHOLD,
    nms_radius: int = NMS_RADIUS,
    max_keypoints: int = MAX_KEYPOINTS,
) -> tuple[Keypoints, np.ndarray]:
    score, desc = model(image)
    kps = extract_keypoints(score, threshold, nms_radius, max_keypoints)
    return kps, sample_descriptors(desc, kps)


def make_pair(
    model: Model,
    image_a: BayerImage,
    image_b: BayerImage,
    h_true: np.ndarray,
    name: str = "",
    **detect_kwargs,
) -> PairData:
    kps_a, desc_a = detect_and_describe(model, image_a, **detect_kwargs)
    kps_b, desc_b = detect_and_describe(model, image_b, **detect_kwargs)
    return PairData(kps_a, kps_b, desc_a, desc_b, h_true, image_a.shape, image_b.shape, name)


def transformed_pair(
    rgb: np.ndarray,
    family: G.Family,
    rng: np.random.Generator,
    spec: G.TransformSpec | None = None,
    warp_rgb: bool = True,
) -> tuple[BayerImage, BayerImage, np.ndarray, G.HomographyParams]:
    """Reference raw image, transformed raw image and ground-truth homography.

    Exposure scales intensities (clamped to [0, 1]) under the identity.
    Geometric families warp the RGB image and re-mosaic it, or warp the raw
    raster directly when ``warp_rgb`` is false.
    """
    rgb = np.asarray(rgb, dtype=np.float32)
    shape = rgb.shape[1:]
    h, params = G.sample_homography(rng, shape, family=family, spec=spec)
    base = mosaic(rgb)
    if family is G.Family.EXPOSURE:
        return base, BayerImage(np.clip(base.data * params.gain, 0.0, 1.0)), np.eye(3), params
    if warp_rgb:
        return base, mosaic(G.warp_array(rgb, h)), h, params
    return base, G.warp_image(base, h), h, params


def invariance_suite(
    model: Model,
    images: Sequence[np.ndarray],
    families: Sequence[G.Family] = tuple(G.Family),
    seed: int = 0,
    spec: G.TransformSpec | None = None,
    eps: float = EPS_HOMOGRAPHY,
    **detect_kwargs,
) -> dict[G.Family, MetricsReport]:
    """Per transform family: transform every image, detect, match and score."""
    reports = {}
    for fi, family in enumerate(families):
        rng = np.random.default_rng([seed, fi])
        pairs = []
        for i, rgb in enumerate(images):
            a, b, h, _ = transformed_pair(rgb, family, rng, spec)
            pairs.append(make_pair(model, a, b, h, name=f"{family.value}/{i}", **detect_kwargs))
        reports[family] = homography_metrics(pairs, eps=eps, seed=seed)
    return reports


# ------------------------------------------------------------------ reports

CSV_FIELDS = [
    "name",
    "keypoints_a",
    "keypoints_b",
    "matches",
    "correct",
    "ransac_inliers",
    "repeatability",
    "matching_accuracy",
    "homography_correct",
    "corner_error",
    "matching_score",
    "inlier_ratio",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def report_csv(report: MetricsReport, summary_name: str | None = "mean") -> str:
    """One row per pair, plus a summary row unless ``summary_name`` is None."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for p in report.pairs:
        writer.writerow([_fmt(getattr(p, f)) for f in CSV_FIELDS])
    if summary_name is None:
        return buf.getvalue()
    writer.writerow(
        [
            summary_name,
            _fmt(sum(p.keypoints_a for p in report.pairs)),
            _fmt(sum(p.keypoints_b for p in report.pairs)),
            _fmt(report.matches),
            _fmt(report.inliers),
            _fmt(sum(p.ransac_inliers for p in report.pairs)),
            _fmt(report.repeatability),
            _fmt(report.mma),
            _fmt(report.mha),
            "",
            _fmt(report.ms),
            _fmt(report.inlier_ratio),
        ]
    )
    return buf.getvalue()


def report_table(report: MetricsReport, title: str = "") -> str:
    def pct(v):
        return "   n/a" if v is None else f"{100 * v:6.2f}%"

    lines = [title] if title else []
    lines += [
        f"  repeatability@{report.eps_rep:g}: {pct(report.repeatability)}",
        f"  MMA@{report.eps_hom:g}:           {pct(report.mma)}",
        f"  MHA@{report.eps_hom:g}:           {pct(report.mha)}",
        f"  MS@{report.eps_hom:g}:            {pct(report.ms)}",
        f"  inlier ratio:     {pct(report.inlier_ratio)}",
        f"  pairs={len(report.pairs)} keypoints={report.keypoints} matches={report.matches} correct={report.inliers}",
    ]
    return "\n".join(lines)
