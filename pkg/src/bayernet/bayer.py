"""Raw Bayer rasters and the two tied 4x4 Bayer convolution kernels.

Pixel ``(y, x)`` of an RGGB mosaic belongs to channel
``2 * (y % 2) + (x % 2)``: 0 = R, 1 = Gr, 2 = Gb, 3 = B.

A Bayer kernel spans four whole CFA cells (2x2 cells of 2x2 pixels), so
each channel has exactly one tap per cell and four taps in total. All four
taps of a channel are tied to one free parameter:

* ``COLOR_VARIATION`` kernels weight the taps ``+p, -p, -p, +p`` across the
  top-left, top-right, bottom-left and bottom-right cells. This is the
  difference form of the constant-colour-difference identity, so each
  channel's taps sum to zero and constant images give zero response.
* ``INTENSITY`` kernels weight every tap ``+p`` (the sum form).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    ConfigurationError,
    DimensionError,
    Tensor,
    conv2d,
    reflect_pad,
    reshape,
    take_scaled,
    upsample_bilinear,
)

CHANNEL_NAMES = ("R", "Gr", "Gb", "B")


class KernelKind(enum.Enum):
    COLOR_VARIATION = "color_variation"
    INTENSITY = "intensity"


@dataclass(frozen=True)
class BayerImage:
    """Single-channel raw raster with values in [0, 1]."""

    data: np.ndarray
    phase: str = "RGGB"

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionError(f"BayerImage needs a 2-D raster, got shape {arr.shape}")
        h, w = arr.shape
        if h % 2 or w % 2:
            raise DimensionError(f"BayerImage height and width must be even, got {h}x{w}")
        if self.phase != "RGGB":
            raise ConfigurationError(f"unsupported CFA phase {self.phase!r}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def as_tensor(self) -> Tensor:
        return Tensor(self.data[None])


def channel_map(height: int, width: int) -> np.ndarray:
    """CFA channel index of every pixel of an RGGB raster."""
    ys, xs = np.mgrid[0:height, 0:width]
    return 2 * (ys % 2) + (xs % 2)


def mosaic(rgb: np.ndarray) -> BayerImage:
    """Subsample a ``[3, H, W]`` RGB image onto the RGGB pattern."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"mosaic expects a [3, H, W] image, got shape {rgb.shape}")
    _, h, w = rgb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic needs even height and width, got {h}x{w}")
    raw = np.empty((h, w), dtype=np.float32)
    raw[0::2, 0::2] = rgb[0, 0::2, 0::2]
    raw[0::2, 1::2] = rgb[1, 0::2, 1::2]
    raw[1::2, 0::2] = rgb[1, 1::2, 0::2]
    raw[1::2, 1::2] = rgb[2, 1::2, 1::2]
    return BayerImage(raw)


# Kernel tap layout. _TAP_CHANNEL[y, x] is the free parameter read at that
# tap; _TAP_SIGN holds the colour-variation signs (+ on the diagonal cells).
_TAP_CHANNEL = channel_map(4, 4)
_cell_y, _cell_x = np.mgrid[0:4, 0:4] // 2
_TAP_SIGN = np.where(_cell_y == _cell_x, 1.0, -1.0)


@dataclass
class BayerKernelParams:
    """Four free values (R, Gr, Gb, B) of one Bayer kernel."""

    p: np.ndarray
    kind: KernelKind

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float32).reshape(4)


def _signs(kind: KernelKind) -> np.ndarray:
    if kind is KernelKind.COLOR_VARIATION:
        return _TAP_SIGN.ravel()
    if kind is KernelKind.INTENSITY:
        return np.ones(16)
    raise ConfigurationError(f"unknown kernel kind {kind!r}")


def materialize_weights(free: Tensor, kind: KernelKind) -> Tensor:
    """Build ``[O, 1, 4, 4]`` kernels from ``[O, 4]`` free parameters.

    The taps are gathered from the free values on every call, so the tied
    entries cannot drift apart whatever an optimiser does to ``free``.
    """
    if free.data.ndim != 2 or free.shape[1] != 4:
        raise DimensionError(f"Bayer free parameters must be [O, 4], got {free.shape}")
    grid = take_scaled(free, _TAP_CHANNEL.ravel(), _signs(kind))
    return reshape(grid, (free.shape[0], 1, 4, 4))


def materialize_kernel(params: BayerKernelParams) -> np.ndarray:
    """The 4x4 weight grid of a single kernel."""
    t = materialize_weights(Tensor(params.p[None]), params.kind)
    return t.data[0, 0]


def bayer_conv(image: Tensor, free: Tensor, kind: KernelKind) -> Tensor:
    """Stride-2 Bayer convolution of a ``[1, H, W]`` raster -> ``[O, H/2, W/2]``.

    The raster is reflect-padded by two pixels at the top/left only, which
    keeps both the output size at half resolution and every window starting
    on an R site; reflection preserves pixel parity, so padded pixels carry
    the right CFA channel. No bias.
    """
    if image.data.ndim != 3 or image.shape[0] != 1:
        raise DimensionError(f"bayer_conv expects a [1, H, W] raster, got {image.shape}")
    if free.data.size == 0:
        raise ConfigurationError("bayer_conv needs at least one kernel")
    _, h, w = image.shape
    if h % 2 or w % 2:
        raise DimensionError(f"bayer_conv needs even height and width, got {h}x{w}")
    weights = materialize_weights(free, kind)
    padded = reflect_pad(image, 2, 0)
    return conv2d(padded, weights, None, stride=2, padding=0)


def bayer_conv_params(image: BayerImage, params: list[BayerKernelParams]) -> Tensor:
    """Convenience form taking one :class:`BayerKernelParams` per output channel."""
    if not params:
        raise ConfigurationError("bayer_conv needs at least one kernel")
    kinds = {p.kind for p in params}
    if len(kinds) != 1:
        raise ConfigurationError("all kernels of one Bayer layer must share a kind")
    free = Tensor(np.stack([p.p for p in params]))
    return bayer_conv(image.as_tensor(), free, kinds.pop())


def to_full_res(features: Tensor) -> Tensor:
    return upsample_bilinear(features, 2)


# ------------------------------------------------------------------ file io


def save_pgm(path, image: BayerImage) -> None:
    """Write a 16-bit binary PGM (P5, maxval 65535)."""
    values = np.round(np.clip(image.data, 0.0, 1.0).astype(np.float64) * 65535).astype(">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(values.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while buf[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]) if tokens else buf[start:pos])
    return tokens, pos + 1


def load_pgm(path) -> BayerImage:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(buf, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    dtype = ">u2" if maxval > 255 else "u1"
    n = int(w) * int(h)
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).reshape(int(h), int(w))
    return BayerImage(data.astype(np.float64) / maxval)
