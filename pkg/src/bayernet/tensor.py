"""Small dense-tensor engine with taped reverse-mode differentiation.

Only the operations the network needs are provided. Every tensor is a
``[C, H, W]`` raster or a flat vector; there is no general broadcasting.
Arrays are float32 by default and every reduction accumulates in float64.
Operations preserve the dtype of their first input, which lets gradient
checks run the same code in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse


class DimensionError(ValueError):
    """An array has the wrong shape along a named axis."""


class ConfigurationError(ValueError):
    """An operation was called with an invalid setting."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, pseudo-labels)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    The node is only recorded when grad mode is on and some input needs it.
    """
    out = Tensor(data, dtype=inputs[0].dtype if inputs else None)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
    return out


class GradTape:
    """Ordered record of the differentiable operations behind one output.

    Entries are the tensors that require grad, in topological order (every
    tensor after all of its inputs). Replaying in reverse visits each
    recorded operation once.
    """

    def __init__(self, entries: list[Tensor] | None = None):
        self.entries: list[Tensor] = entries or []

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    @property
    def operations(self) -> list[str]:
        return [t._node.op for t in self.entries if t._node is not None]

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        self.entries = []

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(root): seed}
        for t in reversed(self.entries):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
            if t._node is None:
                continue
            grads = t._node.backward_fn(g)
            for parent, pg in zip(t._node.inputs, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.data.size != 1:
        raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape.record(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape


def _check_rank(x: Tensor, rank: int, what: str) -> None:
    if x.data.ndim != rank:
        raise DimensionError(f"{what}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_op("scale", x.data * x.dtype.type(factor), (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    info = np.finfo(x.dtype)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data.astype(np.float64)))
    # keep the output strictly inside (0, 1) at this precision
    s = np.clip(s, info.tiny, 1.0 - info.epsneg).astype(x.dtype)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def elementwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown elementwise function {fn!r}")


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a shape-(1,) tensor."""
    value = np.array([x.data.sum(dtype=np.float64)], dtype=x.dtype)
    shape = x.shape
    return make_op("sum", value, (x,), lambda g: (np.full(shape, g[0], dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.data.size)


def weighted_total(x: Tensor, weights: np.ndarray) -> Tensor:
    """Sum of ``x * weights`` with a constant weight array."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise DimensionError(f"weighted_total: weights {weights.shape} vs input {x.shape}")
    value = np.array([(x.data * weights).sum(dtype=np.float64)], dtype=x.dtype)
    return make_op("weighted_sum", value, (x,), lambda g: ((g[0] * weights).astype(x.dtype),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    _check_rank(x, 2, "transpose")
    return make_op("transpose", x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def take_scaled(x: Tensor, index: np.ndarray, factors: np.ndarray) -> Tensor:
    """``x[..., index] * factors`` with gradients scattered back onto ``x``.

    Several output positions may read the same source entry; their gradients
    add up in that entry.
    """
    index = np.asarray(index, dtype=np.intp)
    factors = np.asarray(factors, dtype=x.dtype)
    n = x.shape[-1]

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        for src in range(n):
            sel = index == src
            if sel.any():
                gx[..., src] = (g[..., sel] * factors[sel]).sum(axis=-1, dtype=np.float64)
        return (gx.astype(x.dtype),)

    return make_op("take_scaled", x.data[..., index] * factors, (x,), backward_fn)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ConfigurationError("concat_channels needs at least one tensor")
    spatial = inputs[0].shape[1:]
    for i, t in enumerate(inputs):
        _check_rank(t, 3, "concat_channels")
        if t.shape[1:] != spatial:
            raise DimensionError(
                f"concat_channels: input {i} has spatial dims {t.shape[1:]}, expected {spatial}"
            )
    sizes = [t.shape[0] for t in inputs]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=0))

    return make_op("concat", np.concatenate([t.data for t in inputs], axis=0), tuple(inputs), backward_fn)


def l2_normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each position's channel vector (axis 0) by max(norm, eps)."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    v = x.data.astype(np.float64)
    norm = np.sqrt((v * v).sum(axis=0, keepdims=True))
    denom = np.maximum(norm, eps)
    y = v / denom
    live = norm > eps

    def backward_fn(g):
        g = g.astype(np.float64)
        proj = (g * y).sum(axis=0, keepdims=True)
        gx = np.where(live, (g - y * proj) / denom, g / eps)
        return (gx.astype(x.dtype),)

    return make_op("l2_normalize", y.astype(x.dtype), (x,), backward_fn)


# ---------------------------------------------------------------- spatial ops


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``[C,H,W]`` raster with ``[O,C,k,k]`` filters (zero padding)."""
    _check_rank(x, 3, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c}, weight expects {wc}")
    if k != k2:
        raise DimensionError(f"conv2d: kernel must be square, got {k}x{k2}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias axis 0 has {bias.shape}, expected ({o},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise DimensionError(f"conv2d: spatial axes {h}x{w} too small for kernel {k}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xp = np.pad(x.data.astype(np.float64), ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.astype(np.float64).reshape(o, c * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data.astype(np.float64)[:, None]
    dtype = x.dtype

    def backward_fn(g):
        g2 = g.astype(np.float64).reshape(o, ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape).astype(dtype)
        gb = g2.sum(axis=1).astype(dtype) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, k, k, ho, wo)
            gxp = np.zeros((c, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w].astype(dtype)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out.reshape(o, ho, wo).astype(dtype), inputs, backward_fn)


_TAP_DY = np.repeat(np.arange(-1, 2), 3)
_TAP_DX = np.tile(np.arange(-1, 2), 3)


def _bilinear_corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Return (flat index, weight) for the four bilinear corners of each
    sample, plus the fractional parts; out-of-raster corners get weight 0."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    wy = py - y0
    wx = px - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    out = []
    for dy, dx, wgt in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        flat = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        out.append((flat, wgt * valid, valid))
    return out, wy, wx


def _corner_matrix(flats, values, n_pixels: int) -> sparse.csr_matrix:
    """Sparse ``[N, n_pixels]`` matrix with row i holding values[c][i] at flats[c][i]."""
    n = flats[0].size
    rows = np.tile(np.arange(n), len(flats))
    cols = np.concatenate([f.ravel() for f in flats])
    vals = np.concatenate([v.ravel() for v in values])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n_pixels))


def bilinear_matrix(py: np.ndarray, px: np.ndarray, h: int, w: int) -> sparse.csr_matrix:
    """Sparse interpolation matrix: ``M @ img.ravel()`` samples ``img`` at (py, px)
    with zero padding outside the raster."""
    corners, _, _ = _bilinear_corners(np.ravel(py), np.ravel(px), h, w)
    return _corner_matrix([c[0] for c in corners], [c[1] for c in corners], h * w)


def deformable_conv2d(
    x: Tensor, weight: Tensor, offsets: Tensor, bias: Tensor | None = None
) -> Tensor:
    """3x3 deformable convolution, stride 1, output the size of the input.

    Tap ``k`` (row-major over the 3x3 grid) of output pixel ``p`` samples
    ``x`` bilinearly at ``p + p_k + (offsets[2k+1], offsets[2k])``: channel
    ``2k`` is the x (column) shift and ``2k+1`` the y (row) shift. Samples
    off the raster read zero.
    """
    _check_rank(x, 3, "deformable_conv2d input")
    _check_rank(weight, 4, "deformable_conv2d weight")
    c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if (k, k2) != (3, 3):
        raise ConfigurationError(f"deformable_conv2d supports 3x3 kernels, got {k}x{k2}")
    if wc != c:
        raise DimensionError(f"deformable_conv2d: channel axis mismatch, input has {c}, weight expects {wc}")
    if offsets.data.ndim != 3 or offsets.shape[0] != 2 * k * k:
        raise ConfigurationError(
            f"deformable_conv2d: offsets need {2 * k * k} channels, got shape {offsets.shape}"
        )
    if offsets.shape[1:] != (h, w):
        raise DimensionError(f"deformable_conv2d: offsets spatial dims {offsets.shape[1:]} vs input {(h, w)}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"deformable_conv2d: bias axis 0 has {bias.shape}, expected ({o},)")

    hw = h * w
    off = offsets.data.astype(np.float64)
    ys, xs = np.mgrid[0:h, 0:w]
    # sample rows are ordered (pixel, tap)
    py = (ys[None] + _TAP_DY[:, None, None] + off[1::2]).reshape(9, hw).T
    px = (xs[None] + _TAP_DX[:, None, None] + off[0::2]).reshape(9, hw).T
    corners, wy, wx = _bilinear_corners(py.ravel(), px.ravel(), h, w)
    sampler = _corner_matrix([f for f, _, _ in corners], [v for _, v, _ in corners], hw)
    xt = x.data.astype(np.float64).reshape(c, hw).T  # [HW, C]
    cols = np.asarray(sampler @ xt).reshape(hw, 9 * c)  # (tap, channel) per pixel
    wmat = weight.data.astype(np.float64).transpose(0, 2, 3, 1).reshape(o, 9 * c)
    out = wmat @ cols.T
    if bias is not None:
        out += bias.data.astype(np.float64)[:, None]
    dtype = x.dtype

    def backward_fn(g):
        g2 = g.astype(np.float64).reshape(o, hw)
        gw = (g2 @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2).astype(dtype)
        gb = g2.sum(axis=1).astype(dtype) if bias is not None else None
        gcols = (g2.T @ wmat).reshape(hw * 9, c)
        gx = goff = None
        if x.requires_grad:
            gx = np.asarray(sampler.T @ gcols).T.reshape(c, h, w).astype(dtype)
        if offsets.requires_grad:
            flats = [f for f, _, _ in corners]
            valid = [v for _, _, v in corners]
            # d(sample)/dy and d(sample)/dx as sparse stencils over the corners
            dy_vals = [-(1 - wx), -wx, (1 - wx), wx]
            dx_vals = [-(1 - wy), (1 - wy), -wy, wy]
            dy_m = _corner_matrix(flats, [a * m for a, m in zip(dy_vals, valid)], hw)
            dx_m = _corner_matrix(flats, [a * m for a, m in zip(dx_vals, valid)], hw)
            gpy = (np.asarray(dy_m @ xt) * gcols).sum(axis=1).reshape(hw, 9).T
            gpx = (np.asarray(dx_m @ xt) * gcols).sum(axis=1).reshape(hw, 9).T
            goff = np.empty((18, h, w))
            goff[1::2] = gpy.reshape(9, h, w)
            goff[0::2] = gpx.reshape(9, h, w)
            goff = goff.astype(dtype)
        grads = (gx, gw, goff)
        return grads if bias is None else grads + (gb,)

    inputs = (x, weight, offsets) if bias is None else (x, weight, offsets, bias)
    return make_op("deformable_conv2d", out.reshape(o, h, w).astype(dtype), inputs, backward_fn)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient goes to the first maximum in each cell."""
    _check_rank(x, 3, "max_pool2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2: spatial axes must be even, got {h}x{w}")
    cells = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gcells = np.zeros(cells.shape, dtype=x.dtype)
        np.put_along_axis(gcells, arg[..., None], g[..., None], axis=-1)
        gx = gcells.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)

    return make_op("max_pool2", out, (x,), backward_fn)


def _upsample_matrix(n: int, factor: int) -> np.ndarray:
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((n * factor, n))
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling with half-pixel sample centres (no corner alignment)."""
    _check_rank(x, 3, "upsample_bilinear")
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    c, h, w = x.shape
    ay = _upsample_matrix(h, factor)
    ax = _upsample_matrix(w, factor)
    out = ay @ x.data.astype(np.float64) @ ax.T

    def backward_fn(g):
        return ((ay.T @ g.astype(np.float64) @ ax).astype(x.dtype),)

    return make_op("upsample_bilinear", out.astype(x.dtype), (x,), backward_fn)


def gather_pad(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Spatial re-indexing ``x[:, rows][:, :, cols]`` (used for reflect padding)."""
    _check_rank(x, 3, "gather_pad")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    c, h, w = x.shape

    def backward_fn(g):
        tmp = np.zeros((c, h, len(cols)))
        np.add.at(tmp, (slice(None), rows), g)
        gx = np.zeros((c, h, w))
        np.add.at(gx, (slice(None), slice(None), cols), tmp)
        return (gx.astype(x.dtype),)

    return make_op("gather_pad", x.data[:, rows][:, :, cols], (x,), backward_fn)


def reflect_pad(x: Tensor, before: int, after: int) -> Tensor:
    """Mirror padding without edge repetition (index -1 reads index 1)."""
    _, h, w = x.shape
    rows = np.pad(np.arange(h), (before, after), mode="reflect")
    cols = np.pad(np.arange(w), (before, after), mode="reflect")
    return gather_pad(x, rows, cols)


def sample_points(x: Tensor, points: np.ndarray) -> Tensor:
    """Bilinearly sample ``x`` at ``(x, y)`` points; returns ``[C, K]``.

    Corners off the raster read zero.
    """
    _check_rank(x, 3, "sample_points")
    c, h, w = x.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    m = bilinear_matrix(pts[:, 1], pts[:, 0], h, w)
    xt = x.data.astype(np.float64).reshape(c, h * w).T
    out = np.asarray(m @ xt).T

    def backward_fn(g):
        gx = np.asarray(m.T @ g.astype(np.float64).T).T
        return (gx.reshape(c, h, w).astype(x.dtype),)

    return make_op("sample_points", out.astype(x.dtype), (x,), backward_fn)
