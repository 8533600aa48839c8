"""Independent slow reference implementations used as test oracles.

Everything here is written with explicit loops over pixels and taps so it
shares no code path with the vectorised library.
"""
from __future__ import annotations

import math

import numpy as np

from bayernet import tensor as T


# ---------------------------------------------------------------- gradients


def finite_difference(f, arrays: list[np.ndarray], h: float = 1e-6, dtype=np.float64) -> list[np.ndarray]:
    """Central differences of scalar ``f(*arrays)`` with respect to every array.

    The step is taken in ``dtype`` and the realised step is used as the
    divisor, so float32 rounding of ``x +- h`` does not bias the quotient.
    """
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            hi, lo = dtype(old + h), dtype(old - h)
            flat[i] = hi
            up = f(*arrays)
            flat[i] = lo
            down = f(*arrays)
            flat[i] = old
            gflat[i] = (up - down) / (float(hi) - float(lo))
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.asarray(a, dtype=np.float64) - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(num / den)


def gradcheck(build, arrays: list[np.ndarray], seed: int, h: float = 1e-6, dtype=np.float64) -> float:
    """Worst relative error between taped and finite-difference gradients.

    ``build(*tensors)`` returns an output tensor; it is reduced to a scalar
    with fixed random weights (summed in float64) so every output entry
    matters. Tensors are stored in ``dtype``.
    """
    arrays = [np.array(a, dtype=dtype) for a in arrays]
    with T.no_grad():
        probe = build(*[T.Tensor(a, dtype=dtype) for a in arrays])
    weights = np.random.default_rng(seed + 1000).standard_normal(probe.shape)

    def scalar(*arrs):
        with T.no_grad():
            out = build(*[T.Tensor(a, dtype=dtype) for a in arrs])
        return float((out.data.astype(np.float64) * weights).sum())

    tensors = [T.Tensor(a.copy(), requires_grad=True, dtype=dtype) for a in arrays]
    T.backward(T.weighted_total(build(*tensors), weights))
    numeric = finite_difference(scalar, arrays, h, dtype)
    return max(relative_error(t.grad, n) for t, n in zip(tensors, numeric))


# -------------------------------------------------------------- convolution


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[oc])
                for ic in range(c):
                    for ki in range(k):
                        for kj in range(k):
                            acc += w[oc, ic, ki, kj] * xp[ic, i * stride + ki, j * stride + kj]
                out[oc, i, j] = acc
    return out


def bilinear_at(img2d, y, x):
    """Bilinear read with zeros outside the raster."""
    h, w = img2d.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * img2d[yy, xx]
    return total


def naive_deformable(x, w, offsets, b=None):
    """3x3, stride 1, pad 1; tap k = 3*ki+kj reads dx from 2k and dy from 2k+1."""
    c, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                acc = 0.0 if b is None else float(b[oc])
                for ki in range(3):
                    for kj in range(3):
                        k = 3 * ki + kj
                        py = i + ki - 1 + offsets[2 * k + 1, i, j]
                        px = j + kj - 1 + offsets[2 * k, i, j]
                        for ic in range(c):
                            acc += w[oc, ic, ki, kj] * bilinear_at(x[ic], py, px)
                out[oc, i, j] = acc
    return out


# -------------------------------------------------------------- evaluation


def naive_nms(score, threshold, radius, max_k):
    """Keep a pixel iff it outranks every neighbour under (value desc, y asc, x asc)."""
    h, w = score.shape
    kept = []
    for y in range(h):
        for x in range(w):
            s = score[y, x]
            if s < threshold:
                continue
            ok = True
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    if (yy, xx) == (y, x):
                        continue
                    t = score[yy, xx]
                    if t > s or (t == s and (yy, xx) < (y, x)):
                        ok = False
            if ok:
                kept.append((-s, y, x))
    kept.sort()
    return [(x, y, -ns) for ns, y, x in kept[:max_k]]


def naive_match(a, b, cross_check=True):
    def nearest(row, pool):
        best, best_d = -1, math.inf
        for j, other in enumerate(pool):
            d = math.sqrt(sum((p - q) ** 2 for p, q in zip(row, other)))
            if d < best_d:
                best, best_d = j, d
        return best

    out = []
    for i, row in enumerate(a):
        j = nearest(row, b)
        if not cross_check or nearest(b[j], a) == i:
            out.append((i, j))
    return out


def project(h, x, y):
    v = h @ np.array([x, y, 1.0])
    return v[0] / v[2], v[1] / v[2]


def inside(p, shape):
    hh, ww = shape
    return 0 <= p[0] <= ww - 1 and 0 <= p[1] <= hh - 1


def naive_repeatability(kps_a, kps_b, h, eps, shape_a, shape_b):
    hinv = np.linalg.inv(h)
    a_valid = [(x, y, project(h, x, y)) for x, y in kps_a if inside(project(h, x, y), shape_b)]
    b_valid = [(x, y, project(hinv, x, y)) for x, y in kps_b if inside(project(hinv, x, y), shape_a)]
    n = len(a_valid) + len(b_valid)
    if n == 0:
        return None
    hits = 0
    for _, _, (px, py) in a_valid:
        if any(math.hypot(px - bx, py - by) <= eps for bx, by, _ in b_valid):
            hits += 1
    for bx, by, (qx, qy) in b_valid:
        if any(math.hypot(ax - qx, ay - qy) <= eps for ax, ay, _ in a_valid):
            hits += 1
    return hits / n


def naive_mma_ms(kps_a, kps_b, matches, h, eps, shape_a, shape_b):
    correct = 0
    for i, j in matches:
        px, py = project(h, *kps_a[i])
        if math.hypot(px - kps_b[j][0], py - kps_b[j][1]) < eps:
            correct += 1
    hinv = np.linalg.inv(h)
    na = sum(inside(project(h, x, y), shape_b) for x, y in kps_a)
    nb = sum(inside(project(hinv, x, y), shape_a) for x, y in kps_b)
    mma = correct / len(matches) if matches else None
    denom = min(na, nb)
    ms = min(correct / denom, 1.0) if denom and matches else None
    return mma, ms


def naive_adaptation(score_fn, image, homographies):
    """Loop form of the pseudo-label: explicit per-pixel un-warping of each view."""
    from bayernet.bayer import BayerImage

    raw = image.data.astype(np.float64)
    hh, ww = raw.shape
    acc = np.zeros((hh, ww))
    cnt = np.zeros((hh, ww))
    for h in homographies:
        hinv = np.linalg.inv(h)
        warped = np.zeros((hh, ww))
        for y in range(hh):
            for x in range(ww):
                sx, sy = project(hinv, x, y)
                if inside((sx, sy), (hh, ww)):
                    warped[y, x] = bilinear_at(raw, sy, sx)
        s = np.asarray(score_fn(BayerImage(warped.astype(np.float32))), dtype=np.float64)
        for y in range(hh):
            for x in range(ww):
                tx, ty = project(h, x, y)
                if inside((tx, ty), (hh, ww)):
                    acc[y, x] += bilinear_at(s, ty, tx)
                    cnt[y, x] += 1
    return acc / np.maximum(cnt, 1)
