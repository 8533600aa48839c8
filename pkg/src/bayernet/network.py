"""The BayerNet encoder, feature aggregation, detector and descriptor heads."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from . import tensor as T
from .bayer import BayerImage, KernelKind, bayer_conv, to_full_res
from .tensor import DimensionError, Tensor


class CheckpointError(ValueError):
    """A checkpoint could not be decoded or does not fit the configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    stem_channels: int = 16
    block_channels: tuple[int, ...] = (16, 32, 64, 128)
    descriptor_dim: int = 256
    detector_mid_channels: int = 8
    width_multiplier: float = 1.0

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))

    @property
    def stem(self) -> int:
        return self.scaled(self.stem_channels)

    @property
    def blocks(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in self.block_channels)

    @property
    def aggregate_channels(self) -> int:
        return self.stem + sum(self.blocks)

    @property
    def detector_mid(self) -> int:
        return self.scaled(self.detector_mid_channels)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise CheckpointError(f"unknown network config key {key!r}")
            if key == "block_channels":
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key == "width_multiplier":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


# Layers whose parameters the detector phase may update; the descriptor head
# is everything under "desc.".
DESCRIPTOR_PREFIX = "desc."
DETECTOR_PREFIX = "det."


def _dcn_shapes(prefix: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.offset.weight", (18, cin, 3, 3)),
        (f"{prefix}.offset.bias", (18,)),
        (f"{prefix}.weight", (cout, cin, 3, 3)),
        (f"{prefix}.bias", (cout,)),
    ]


def _residual_shapes(prefix: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = _dcn_shapes(f"{prefix}.dcn", cin, cout)
    if cin != cout:
        shapes += [(f"{prefix}.skip.weight", (cout, cin, 1, 1)), (f"{prefix}.skip.bias", (cout,))]
    return shapes


def parameter_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every trainable parameter, in the canonical (checkpoint) order."""
    s = config.stem
    b = config.blocks
    agg = config.aggregate_channels
    mid = config.detector_mid
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("stem_a.bayer", (s, 4)),
        *_residual_shapes("stem_a.res", s, s),
        ("stem_b.bayer", (s, 4)),
        *_residual_shapes("stem_b.res", s, b[0]),
    ]
    for i in range(1, 4):
        shapes += _residual_shapes(f"block{i + 1}.res", b[i - 1], b[i])
    for i in range(1, 4):
        shapes += [(f"align{i + 1}.weight", (b[i], b[i], 1, 1)), (f"align{i + 1}.bias", (b[i],))]
    shapes += [
        ("det.conv1.weight", (mid, agg, 1, 1)),
        ("det.conv1.bias", (mid,)),
        ("det.conv2.weight", (mid, mid, 3, 3)),
        ("det.conv2.bias", (mid,)),
        ("det.conv3.weight", (mid, mid, 3, 3)),
        ("det.conv3.bias", (mid,)),
        ("det.score.weight", (1, mid, 3, 3)),
        ("det.score.bias", (1,)),
    ]
    shapes += _dcn_shapes("desc.dcn1", agg, agg)
    shapes += _dcn_shapes("desc.dcn2", agg, config.descriptor_dim)
    return shapes


# Initial keypoint probability of the score head. Keypoints are rare, so the
# untrained detector starts near-silent instead of at 0.5 everywhere.
SCORE_PRIOR = 0.01


def init_params(config: NetworkConfig, seed: int = 0) -> dict[str, Tensor]:
    """Kaiming-uniform conv weights, zero biases and offset branches,
    0.1 * N(0, 1) Bayer free parameters; the score bias starts at
    logit(SCORE_PRIOR)."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".bayer"):
            value = 0.1 * rng.standard_normal(shape)
        elif ".offset." in name or name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        if name == "det.score.bias":
            value = np.full(shape, np.log(SCORE_PRIOR / (1.0 - SCORE_PRIOR)))
        params[name] = Tensor(value.astype(np.float32), requires_grad=True, name=name)
    return params


def deformable_layer(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """3x3 deformable conv whose offsets come from a 3x3 conv on the same input."""
    offsets = T.conv2d(x, params[f"{prefix}.offset.weight"], params[f"{prefix}.offset.bias"], padding=1)
    return T.deformable_conv2d(x, params[f"{prefix}.weight"], offsets, params[f"{prefix}.bias"])


def residual_block(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """relu(deformable_conv(x) + skip(x)); skip is a 1x1 conv when widths differ."""
    main = deformable_layer(x, params, f"{prefix}.dcn")
    skip_w = params.get(f"{prefix}.skip.weight")
    skip = x if skip_w is None else T.conv2d(x, skip_w, params[f"{prefix}.skip.bias"])
    return T.relu(T.add(main, skip))


@dataclass
class ForwardResult:
    score: Tensor  # [1, H, W]
    descriptors: Tensor | None  # [D, H, W]
    features: dict[str, Tensor]


class BayerNet:
    """Parameters plus the forward pass. Both Siamese branches call the same
    instance, so they share one parameter store by identity."""

    def __init__(self, config: NetworkConfig | None = None, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config or NetworkConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        expected = dict(parameter_shapes(self.config))
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"parameter {name}: shape {self.params[name].shape}, config expects {shape}")

    def named_parameters(self, prefix_filter=None) -> Iterable[tuple[str, Tensor]]:
        for name, _ in parameter_shapes(self.config):
            if prefix_filter is None or prefix_filter(name):
                yield name, self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, image: BayerImage | Tensor, with_descriptor: bool = True) -> ForwardResult:
        x = image.as_tensor() if isinstance(image, BayerImage) else image
        if x.data.ndim == 2:
            x = Tensor(x.data[None])
        _, h, w = x.shape
        if h % 8 or w % 8:
            raise DimensionError(f"input height and width must be divisible by 8, got {h}x{w}")
        p = self.params

        stem_a = bayer_conv(x, p["stem_a.bayer"], KernelKind.COLOR_VARIATION)
        c1 = to_full_res(residual_block(stem_a, p, "stem_a.res"))
        stem_b = bayer_conv(x, p["stem_b.bayer"], KernelKind.INTENSITY)
        f1 = to_full_res(residual_block(stem_b, p, "stem_b.res"))

        feats = {"C1": c1, "F1": f1}
        f = f1
        aligned = [c1, f1]
        for i in range(2, 5):
            f = T.max_pool2(residual_block(f, p, f"block{i}.res"))
            feats[f"F{i}"] = f
            a = T.relu(T.conv2d(f, p[f"align{i}.weight"], p[f"align{i}.bias"]))
            aligned.append(T.upsample_bilinear(a, 2 ** (i - 1)))
            feats[f"Fu{i}"] = aligned[-1]
        agg = T.concat_channels(aligned)
        feats["F"] = agg

        d = T.relu(T.conv2d(agg, p["det.conv1.weight"], p["det.conv1.bias"]))
        d = T.relu(T.conv2d(d, p["det.conv2.weight"], p["det.conv2.bias"], padding=1))
        d = T.relu(T.conv2d(d, p["det.conv3.weight"], p["det.conv3.bias"], padding=1))
        score = T.sigmoid(T.conv2d(d, p["det.score.weight"], p["det.score.bias"], padding=1))

        desc = None
        if with_descriptor:
            g = T.relu(deformable_layer(agg, p, "desc.dcn1"))
            desc = T.l2_normalize_channels(deformable_layer(g, p, "desc.dcn2"), eps=1e-8)
        return ForwardResult(score, desc, feats)

    def __call__(self, image, with_descriptor: bool = True):
        return self.forward(image, with_descriptor)

    def infer(self, image: BayerImage) -> tuple[np.ndarray, np.ndarray]:
        """Score map ``[H, W]`` and descriptor map ``[D, H, W]`` without recording a graph."""
        with T.no_grad():
            out = self.forward(image)
        return out.score.data[0], out.descriptors.data


# ---------------------------------------------------------------- checkpoint

MAGIC = b"BAYR"
VERSION = 1


def save_checkpoint(net: BayerNet) -> bytes:
    """Serialise: magic, u32 version, u32-length config text, u32 record
    count, then per parameter (u32 name length, name, u32 rank, u32 dims,
    float32 payload). Little-endian throughout."""
    cfg = net.config.to_text().encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    names = [name for name, _ in parameter_shapes(net.config)]
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = net.params[name].data
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def load_checkpoint(blob: bytes, config: NetworkConfig | None = None) -> BayerNet:
    """Decode a checkpoint. If ``config`` is given it must match the stored one."""

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("checkpoint truncated")
        out = blob[pos : pos + n]
        pos += n
        return out

    pos = 0
    if take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    stored = NetworkConfig.from_text(take(cfg_len).decode("utf-8"))
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {asdict(stored)} does not match {asdict(config)}")
    expected = dict(parameter_shapes(stored))
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name}")
        if name in params:
            raise CheckpointError(f"duplicate parameter {name}")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"parameter {name}: stored shape {shape}, config expects {expected[name]}")
        size = int(np.prod(shape)) * 4
        data = np.frombuffer(take(size), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint records")
    return BayerNet(stored, params)
