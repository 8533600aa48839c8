"""Synthetic Shapes: random geometric primitives with analytic corners."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bayer import BayerImage, mosaic

SHAPE_KINDS = ("quadrilateral", "triangle", "line", "ellipse", "checkerboard", "star")
SUPERSAMPLE = 4


@dataclass
class Shape:
    """One primitive. ``polygons`` are float vertex lists (x, y) painted in
    order with ``colors``; ``corners`` are the integer keypoints it owns."""

    kind: str
    polygons: list[np.ndarray]
    colors: list[np.ndarray]
    corners: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    ellipse: tuple[float, float, float, float, float] | None = None  # cx, cy, a, b, angle


@dataclass
class SyntheticSample:
    rgb: np.ndarray  # [3, H, W], noisy
    bayer: BayerImage
    corners: np.ndarray  # [K, 2] integer (x, y)
    clean: np.ndarray | None = None  # [3, H, W] before noise
    noise_std: float = 0.0


def _subpixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    offs = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    return np.meshgrid(offs, offs)  # xs, ys


def polygon_mask(vertices: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test for arbitrary sample points."""
    v = np.asarray(vertices, dtype=np.float64)
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(v)
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > ys) != (y2 > ys)
        x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_at)
    return inside


def _coverage(mask: np.ndarray, size: int) -> np.ndarray:
    return mask.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _ellipse_mask(params, xs, ys) -> np.ndarray:
    cx, cy, a, b, angle = params
    c, s = math.cos(angle), math.sin(angle)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render(
    shapes: list[Shape],
    size: int,
    background: np.ndarray,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> SyntheticSample:
    """Paint shapes in order with anti-aliased edges.

    Corners covered by a later shape are dropped from the label list.
    """
    xs, ys = _subpixel_grid(size)
    img = np.broadcast_to(np.asarray(background, dtype=np.float64)[:, None, None], (3, size, size)).copy()
    corners: list[np.ndarray] = []
    for shape in shapes:
        footprint = np.zeros((size, size))
        layers = []
        if shape.ellipse is not None:
            layers.append((_coverage(_ellipse_mask(shape.ellipse, xs, ys), size), shape.colors[0]))
        for poly, color in zip(shape.polygons, shape.colors):
            layers.append((_coverage(polygon_mask(poly, xs, ys), size), color))
        for cov, color in layers:
            img = img * (1 - cov) + np.asarray(color)[:, None, None] * cov
            footprint = np.maximum(footprint, cov)
        # earlier corners hidden under this shape are no longer visible
        kept = []
        for c in corners:
            if len(c):
                hidden = footprint[c[:, 1], c[:, 0]] > 0.5
                c = c[~hidden]
            kept.append(c)
        corners = kept + [np.asarray(shape.corners, dtype=np.int64).reshape(-1, 2)]
    clean = np.clip(img, 0.0, 1.0).astype(np.float32)
    noisy = clean
    if noise_std > 0:
        rng = rng or np.random.default_rng(0)
        noisy = np.clip(clean + rng.normal(0.0, noise_std, clean.shape), 0.0, 1.0).astype(np.float32)
    all_corners = np.concatenate(corners) if corners else np.zeros((0, 2), dtype=np.int64)
    if len(all_corners):
        inside = (all_corners >= 0).all(1) & (all_corners[:, 0] < size) & (all_corners[:, 1] < size)
        all_corners = np.unique(all_corners[inside], axis=0)
    return SyntheticSample(noisy, mosaic(noisy), all_corners, clean, noise_std)


# ------------------------------------------------------------ random shapes


def _interior_angles(v: np.ndarray) -> np.ndarray:
    n = len(v)
    out = []
    for i in range(n):
        a = v[i - 1] - v[i]
        b = v[(i + 1) % n] - v[i]
        cosang = a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)
        out.append(math.degrees(math.acos(np.clip(cosang, -1, 1))))
    return np.array(out)


def _well_formed(v: np.ndarray, min_edge: float, min_angle: float = 25.0, max_angle: float = 155.0) -> bool:
    if len(np.unique(v, axis=0)) != len(v):
        return False
    edges = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
    ang = _interior_angles(v)
    return edges.min() >= min_edge and ang.min() >= min_angle and ang.max() <= max_angle


def _contrasting_color(rng, background: np.ndarray, min_contrast: float = 0.25) -> np.ndarray:
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, 3)
        if abs(c.mean() - background.mean()) >= min_contrast:
            return c
    return 1.0 - background


def _random_polygon(rng, size, n, margin, min_edge) -> np.ndarray:
    for _ in range(200):
        cx, cy = rng.uniform(margin + 4, size - 1 - margin - 4, 2)
        r_max = min(cx - margin, cy - margin, size - 1 - margin - cx, size - 1 - margin - cy)
        if r_max < min_edge:
            continue
        angles = np.sort(rng.uniform(0, 2 * math.pi, n))
        radii = rng.uniform(0.4, 1.0, n) * r_max
        v = np.round(np.c_[cx + radii * np.cos(angles), cy + radii * np.sin(angles)])
        if _well_formed(v, min_edge):
            return v
    raise RuntimeError("could not sample a well-formed polygon")


def random_shape(kind: str, rng: np.random.Generator, size: int, background: np.ndarray, margin: int = 3) -> Shape:
    color = _contrasting_color(rng, background)
    if kind in ("quadrilateral", "triangle"):
        v = _random_polygon(rng, size, 4 if kind == "quadrilateral" else 3, margin, min_edge=max(6.0, size / 10))
        return Shape(kind, [v], [color], v.astype(np.int64))
    if kind == "line":
        for _ in range(200):
            p = np.round(rng.uniform(margin, size - 1 - margin, (2, 2)))
            d = p[1] - p[0]
            length = np.linalg.norm(d)
            if length >= size / 4:
                break
        half = rng.uniform(0.75, 1.5)
        nrm = np.array([-d[1], d[0]]) / length * half
        poly = np.array([p[0] + nrm, p[1] + nrm, p[1] - nrm, p[0] - nrm])
        return Shape(kind, [poly], [color], p.astype(np.int64))
    if kind == "ellipse":
        a, b = rng.uniform(size / 12, size / 4, 2)
        r = max(a, b)
        cx, cy = rng.uniform(margin + r, size - 1 - margin - r, 2)
        return Shape(kind, [], [color], np.zeros((0, 2), dtype=np.int64), (cx, cy, a, b, rng.uniform(0, math.pi)))
    if kind == "checkerboard":
        rows, cols = rng.integers(2, 4, 2)
        cell = rng.uniform(max(5.0, size / 12), size / 6)
        angle = math.radians(rng.uniform(-30, 30))
        extent = cell * math.hypot(rows, cols) / 2
        cx, cy = rng.uniform(margin + extent, size - 1 - margin - extent, 2) if size - 2 * (margin + extent) > 1 else (
            (size - 1) / 2,
            (size - 1) / 2,
        )
        c, s = math.cos(angle), math.sin(angle)
        gy, gx = np.mgrid[0 : rows + 1, 0 : cols + 1]
        local = np.c_[(gx.ravel() - cols / 2) * cell, (gy.ravel() - rows / 2) * cell]
        grid = np.round(np.c_[cx + local[:, 0] * c - local[:, 1] * s, cy + local[:, 0] * s + local[:, 1] * c])
        grid = grid.reshape(rows + 1, cols + 1, 2)
        other = _contrasting_color(rng, color)
        polys, colors = [], []
        for i in range(rows):
            for j in range(cols):
                polys.append(np.array([grid[i, j], grid[i, j + 1], grid[i + 1, j + 1], grid[i + 1, j]]))
                colors.append(color if (i + j) % 2 == 0 else other)
        return Shape(kind, polys, colors, grid.reshape(-1, 2).astype(np.int64))
    if kind == "star":
        spikes = int(rng.integers(4, 7))
        r_out = rng.uniform(size / 6, size / 3)
        r_in = r_out * rng.uniform(0.35, 0.55)
        cx, cy = rng.uniform(margin + r_out, size - 1 - margin - r_out, 2)
        phase = rng.uniform(0, 2 * math.pi)
        ang = phase + np.arange(2 * spikes) * math.pi / spikes
        rad = np.where(np.arange(2 * spikes) % 2 == 0, r_out, r_in)
        v = np.round(np.c_[cx + rad * np.cos(ang), cy + rad * np.sin(ang)])
        v = v[np.r_[True, np.any(np.diff(v, axis=0) != 0, axis=1)]]
        return Shape(kind, [v], [color], v.astype(np.int64))
    raise ValueError(f"unknown shape kind {kind!r}")


def generate_sample(
    rng: np.random.Generator, size: int, max_shapes: int = 3, noise_std: float = 0.02, kinds=SHAPE_KINDS
) -> SyntheticSample:
    background = rng.uniform(0.0, 1.0) * np.ones(3) + rng.uniform(-0.1, 0.1, 3)
    background = np.clip(background, 0.0, 1.0)
    n = int(rng.integers(1, max_shapes + 1))
    shapes = [random_shape(kinds[int(rng.integers(len(kinds)))], rng, size, background) for _ in range(n)]
    return render(shapes, size, background, noise_std, rng)


def generate_synthetic(
    seed: int, count: int, size: int = 64, max_shapes: int = 3, noise_std: float = 0.02
) -> list[SyntheticSample]:
    """``count`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if size % 8:
        raise ValueError(f"size must be divisible by 8, got {size}")
    return [
        generate_sample(np.random.default_rng([seed, i]), size, max_shapes, noise_std) for i in range(count)
    ]


def corner_heatmap(corners: np.ndarray, shape: tuple[int, int], sigma: float = 1.0) -> np.ndarray:
    """Target map: 1 at each corner, Gaussian fall-off (peak-normalised)."""
    h, w = shape
    out = np.zeros((h, w))
    if len(corners) == 0:
        return out
    ys, xs = np.mgrid[0:h, 0:w]
    for x, y in np.asarray(corners):
        out = np.maximum(out, np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma**2)))
    return out
