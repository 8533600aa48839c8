"""Finite-difference cases for every differentiable operation.

Each case maps a seeded generator to ``(build, arrays)`` where
``build(*tensors)`` applies the operation under test.
"""
from __future__ import annotations

import numpy as np

from bayernet import losses as L
from bayernet import tensor as T
from bayernet.bayer import KernelKind, bayer_conv

SEEDS = range(10)


def _conv(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b]


def _deformable(rng):
    x = rng.standard_normal((2, 4, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    # fractional offsets keep every sample away from the kinks at integer positions
    off = rng.integers(-1, 2, (18, 4, 5)) + rng.uniform(0.15, 0.85, (18, 4, 5))
    b = rng.standard_normal(2)
    return T.deformable_conv2d, [x, w, off, b]


def _pool(rng):
    return T.max_pool2, [rng.standard_normal((2, 4, 6))]


def _upsample(rng):
    factor = int(rng.choice([2, 4]))
    return (lambda x: T.upsample_bilinear(x, factor)), [rng.standard_normal((2, 3, 4))]


def _relu(rng):
    return T.relu, [rng.standard_normal((2, 3, 3))]


def _sigmoid(rng):
    return T.sigmoid, [rng.standard_normal((2, 3, 3)) * 2]


def _normalize(rng):
    return T.l2_normalize_channels, [rng.standard_normal((5, 3, 3))]


def _sample_points(rng):
    pts = rng.uniform(0.1, 3.9, (6, 2)) + np.array([0.0, 0.0])
    pts = np.floor(pts) + rng.uniform(0.15, 0.85, pts.shape)
    return (lambda x: T.sample_points(x, pts)), [rng.standard_normal((3, 5, 5))]


def _concat_reflect(rng):
    def build(a, b):
        return T.reflect_pad(T.concat_channels([a, b]), 2, 1)

    return build, [rng.standard_normal((1, 4, 4)), rng.standard_normal((2, 4, 4))]


def _bayer(kind):
    def make(rng):
        image = rng.uniform(0, 1, (1, 8, 8))
        free = rng.standard_normal((3, 4))
        return (lambda img, f: bayer_conv(img, f, kind)), [image, free]

    return make


def _bce(rng):
    pred = rng.uniform(0.05, 0.95, (1, 4, 4))
    target = rng.uniform(0, 1, (4, 4))
    return (lambda p: L.bce_loss(p, target)), [pred]


def _peak(rng):
    kps = rng.integers(0, 8, (3, 2))
    return (lambda s: L.dissipation_peak_loss(s, kps, 5)), [rng.uniform(0, 1, (1, 8, 8))]


def _triplet(rng):
    def unit(a):
        return a / np.linalg.norm(a, axis=1, keepdims=True)

    a, p, n = (unit(rng.standard_normal((6, 4))) for _ in range(3))
    return (lambda a, p, n: L.triplet_loss(a, p, n, margin=1.0)), [a, p, n]


def _gather(rng):
    idx = rng.integers(0, 5, 7)
    fac = rng.standard_normal(7)
    return (lambda x: T.transpose(T.take_scaled(x, idx, fac))), [rng.standard_normal((3, 5))]


CASES = {
    "conv2d": _conv,
    "deformable_conv2d": _deformable,
    "max_pool2": _pool,
    "upsample_bilinear": _upsample,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "l2_normalize": _normalize,
    "sample_points": _sample_points,
    "concat_reflect_pad": _concat_reflect,
    "take_transpose": _gather,
    "bayer_color_variation": _bayer(KernelKind.COLOR_VARIATION),
    "bayer_intensity": _bayer(KernelKind.INTENSITY),
    "bce_loss": _bce,
    "dissipation_peak_loss": _peak,
    "triplet_loss": _triplet,
}
