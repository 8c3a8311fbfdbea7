"""Dual-palm verification model.

One shared convolutional extractor embeds every palm image to a 128-vector;
a user's left and right embeddings are fused by concatenation; the match
score between two users is the L1 distance between fused embeddings, mapped
to a genuine-probability through a learnable affine-sigmoid head.

The extractor stack, per block: conv(3x3, stride 1) -> ReLU -> batchnorm ->
maxpool(2, 2), four blocks deep (paddings 0, 0, 1, 1), then
flatten -> fc(1000) -> ReLU -> dropout -> fc(128) -> sigmoid.
At 128x128 input the spatial chain is 126->63->61->30->30->15->15->7,
so the flatten width is 64*7*7 = 3136.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    dropout,
    l1_distance,
    linear,
    maxpool2d,
    no_grad,
    relu,
    reshape,
    sigmoid,
)

CONV_KERNEL = 3
POOL_KERNEL = 2
POOL_STRIDE = 2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
EMBED_DIM = 128
FUSED_DIM = 2 * EMBED_DIM
INPUT_SIZE = 128
DROPOUT_RATE = 0.3

_STD_WIDTHS = (64, 64, 64, 64)
_STD_PADDINGS = (0, 0, 1, 1)
_STD_IN_CHANNELS = 1
_STD_HIDDEN = 1000


@dataclass
class ConvBlock:
    weight: Tensor        # (F, C, 3, 3)
    bias: Tensor          # (F,)
    gamma: Tensor         # (F,)
    beta: Tensor          # (F,)
    running_mean: np.ndarray
    running_var: np.ndarray
    padding: int


@dataclass
class FeatureExtractorParams:
    blocks: list[ConvBlock]
    fc5_weight: Tensor
    fc5_bias: Tensor
    fc6_weight: Tensor
    fc6_bias: Tensor
    input_size: int = INPUT_SIZE

    @property
    def in_channels(self) -> int:
        return self.blocks[0].weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.fc6_weight.shape[0]


@dataclass
class SiameseParams:
    """Extractor weights plus the probability head.

    The extractor is one object; every image path reads the same tensors, so
    an update through any path is visible to all (weight sharing by identity).
    theta0/theta1 map a distance d to probability sigmoid(theta0 + theta1*d);
    training with the contrastive loss leaves them frozen at (0, -1).
    calib_threshold, when set, is the validation-selected decision threshold
    stored alongside the weights.
    """

    extractor: FeatureExtractorParams
    theta0: Tensor
    theta1: Tensor
    margin: float = 1.0
    calib_threshold: float | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, blk in enumerate(self.extractor.blocks, start=1):
            out.append((f"conv{i}.weight", blk.weight))
            out.append((f"conv{i}.bias", blk.bias))
            out.append((f"bn{i}.gamma", blk.gamma))
            out.append((f"bn{i}.beta", blk.beta))
        out.append(("fc5.weight", self.extractor.fc5_weight))
        out.append(("fc5.bias", self.extractor.fc5_bias))
        out.append(("fc6.weight", self.extractor.fc6_weight))
        out.append(("fc6.bias", self.extractor.fc6_bias))
        out.append(("head.theta0", self.theta0))
        out.append(("head.theta1", self.theta1))
        return out


def conv_tower_extent(input_size: int, paddings) -> int:
    """Spatial extent left after the conv/pool tower (kernel 3, pool 2/2)."""
    e = input_size
    for p in paddings:
        e = (e - CONV_KERNEL + 2 * p) + 1
        if e < POOL_KERNEL:
            raise ValueError(
                f"input size {input_size} collapses below the pool window at padding chain {tuple(paddings)}"
            )
        e = (e - POOL_KERNEL) // POOL_STRIDE + 1
    return e


def make_extractor(
    rng: np.random.Generator,
    *,
    input_size: int,
    in_channels: int,
    widths,
    paddings,
    hidden_units: int,
    embed_dim: int,
    dtype=np.float32,
) -> FeatureExtractorParams:
    """Freshly initialized extractor of the given geometry.

    Conv and fc weights are fan-in-scaled normal (std = sqrt(2/fan_in)),
    biases zero, batchnorm at identity with unit running variance.
    """
    if len(widths) != len(paddings):
        raise ValueError(f"{len(widths)} widths but {len(paddings)} paddings")
    blocks = []
    c = in_channels
    for w, p in zip(widths, paddings):
        std = math.sqrt(2.0 / (c * CONV_KERNEL * CONV_KERNEL))
        blocks.append(
            ConvBlock(
                weight=Tensor(
                    rng.normal(0.0, std, (w, c, CONV_KERNEL, CONV_KERNEL)).astype(dtype),
                    requires_grad=True,
                ),
                bias=Tensor(np.zeros(w, dtype=dtype), requires_grad=True),
                gamma=Tensor(np.ones(w, dtype=dtype), requires_grad=True),
                beta=Tensor(np.zeros(w, dtype=dtype), requires_grad=True),
                running_mean=np.zeros(w, dtype=dtype),
                running_var=np.ones(w, dtype=dtype),
                padding=p,
            )
        )
        c = w
    extent = conv_tower_extent(input_size, paddings)
    flat = widths[-1] * extent * extent
    fc5_weight = Tensor(
        rng.normal(0.0, math.sqrt(2.0 / flat), (hidden_units, flat)).astype(dtype),
        requires_grad=True,
    )
    fc5_bias = Tensor(np.zeros(hidden_units, dtype=dtype), requires_grad=True)
    fc6_weight = Tensor(
        rng.normal(0.0, math.sqrt(2.0 / hidden_units), (embed_dim, hidden_units)).astype(dtype),
        requires_grad=True,
    )
    fc6_bias = Tensor(np.zeros(embed_dim, dtype=dtype), requires_grad=True)
    return FeatureExtractorParams(
        blocks, fc5_weight, fc5_bias, fc6_weight, fc6_bias, input_size=input_size
    )


def init_params(seed: int) -> SiameseParams:
    """Standard-geometry model, deterministic per seed."""
    rng = np.random.default_rng(seed)
    extractor = make_extractor(
        rng,
        input_size=INPUT_SIZE,
        in_channels=_STD_IN_CHANNELS,
        widths=_STD_WIDTHS,
        paddings=_STD_PADDINGS,
        hidden_units=_STD_HIDDEN,
        embed_dim=EMBED_DIM,
    )
    dtype = extractor.fc5_weight.dtype
    theta0 = Tensor(np.asarray(0.0, dtype=dtype), requires_grad=True)
    theta1 = Tensor(np.asarray(-1.0, dtype=dtype), requires_grad=True)
    return SiameseParams(extractor, theta0, theta1, margin=1.0)


# -- forward paths ---------------------------------------------------------------


def extract_features(
    extractor: FeatureExtractorParams,
    images,
    training: bool = False,
    dropout_rate: float = DROPOUT_RATE,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Embed a stack of palm images to (N, embed_dim) vectors in (0, 1).

    Input must already be preprocessed: (N, C, S, S) with values in [0, 1]
    and S equal to the extractor's configured input size. No implicit resize.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    expected = (extractor.in_channels, extractor.input_size, extractor.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected images shaped (N, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise ValueError("empty image batch")
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"image values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
    if training and dropout_rate > 0.0 and rng is None:
        raise ValueError("training-mode dropout requires an rng")

    for blk in extractor.blocks:
        x = conv2d(x, blk.weight, blk.bias, stride=1, padding=blk.padding)
        x = relu(x)
        x = batchnorm2d(
            x,
            blk.gamma,
            blk.beta,
            blk.running_mean,
            blk.running_var,
            eps=BN_EPS,
            momentum=BN_MOMENTUM,
            training=training,
        )
        x = maxpool2d(x, POOL_KERNEL, POOL_STRIDE)
    x = reshape(x, (x.shape[0], -1))
    x = relu(linear(x, extractor.fc5_weight, extractor.fc5_bias))
    if training and dropout_rate > 0.0:
        x = dropout(x, dropout_rate, rng)
    return sigmoid(linear(x, extractor.fc6_weight, extractor.fc6_bias))


def fuse(left_feat: Tensor, right_feat: Tensor) -> Tensor:
    """Concatenate per-user embeddings, left palm first."""
    if left_feat.ndim != 2 or right_feat.ndim != 2:
        raise ValueError(f"fuse expects 2-D feature matrices, got {left_feat.shape} and {right_feat.shape}")
    if left_feat.shape[0] != right_feat.shape[0]:
        raise ValueError(f"fuse row-count mismatch: {left_feat.shape[0]} vs {right_feat.shape[0]}")
    return concat((left_feat, right_feat), axis=1)


def pair_distance(fx: Tensor, fy: Tensor) -> Tensor:
    """L1 distance between two fused embeddings (scalar tensor)."""
    return l1_distance(fx, fy)


def probability(d: Tensor, theta0: Tensor, theta1: Tensor) -> Tensor:
    """Graph-tracked genuine-probability sigmoid(theta0 + theta1*d)."""
    return sigmoid(theta0 + theta1 * d)


def probability_values(distances, theta0: float, theta1: float) -> np.ndarray:
    """Vectorized probability for plain arrays of distances (float64)."""
    z = theta0 + theta1 * np.asarray(distances, dtype=np.float64)
    shape = z.shape
    z = np.atleast_1d(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.reshape(shape)


def embed_samples(extractor: FeatureExtractorParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode embeddings for an (N, C, S, S) stack, batched.

    Never touches running statistics or dropout.
    """
    n = images.shape[0]
    out = np.empty((n, extractor.embed_dim), dtype=extractor.fc6_weight.dtype)
    with no_grad():
        for i in range(0, n, batch_size):
            out[i : i + batch_size] = extract_features(
                extractor, images[i : i + batch_size], training=False
            ).data
    return out


# -- checkpoint serialization ------------------------------------------------------

_MAGIC = b"PVSN"
_VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or architecturally wrong checkpoints."""


def _checkpoint_entries(params: SiameseParams) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for i, blk in enumerate(params.extractor.blocks, start=1):
        entries.append((f"conv{i}.weight", blk.weight.data))
        entries.append((f"conv{i}.bias", blk.bias.data))
        entries.append((f"bn{i}.gamma", blk.gamma.data))
        entries.append((f"bn{i}.beta", blk.beta.data))
        entries.append((f"bn{i}.running_mean", blk.running_mean))
        entries.append((f"bn{i}.running_var", blk.running_var))
    entries.append(("fc5.weight", params.extractor.fc5_weight.data))
    entries.append(("fc5.bias", params.extractor.fc5_bias.data))
    entries.append(("fc6.weight", params.extractor.fc6_weight.data))
    entries.append(("fc6.bias", params.extractor.fc6_bias.data))
    entries.append(("head.theta0", params.theta0.data))
    entries.append(("head.theta1", params.theta1.data))
    entries.append(("head.margin", np.asarray(params.margin, dtype=np.float32)))
    if params.calib_threshold is not None:
        entries.append(("calib.threshold", np.asarray(params.calib_threshold, dtype=np.float32)))
    return entries


def save_checkpoint(params: SiameseParams, path) -> None:
    """Write the PVSN binary checkpoint.

    Layout: magic "PVSN"; format version (u32 LE); entry count (u32 LE);
    then per entry: name length (u16 LE) + UTF-8 name, dtype code (u8,
    0 = float32), rank (u8), each extent (u32 LE), raw little-endian values.
    Entry order is fixed, so save -> load -> save is byte-identical.
    """
    buf = bytearray()
    entries = _checkpoint_entries(params)
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    buf += struct.pack("<I", len(entries))
    for name, arr in entries:
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
        # and tobytes() serializes any layout in C order anyway.
        arr32 = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<BB", _DTYPE_F32, arr32.ndim)
        for extent in arr32.shape:
            buf += struct.pack("<I", extent)
        buf += arr32.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    __slots__ = ("blob", "off")

    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: ran out of bytes reading {what}")
        piece = self.blob[self.off : self.off + n]
        self.off += n
        return piece

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _expected_shapes() -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c = _STD_IN_CHANNELS
    for i, w in enumerate(_STD_WIDTHS, start=1):
        shapes[f"conv{i}.weight"] = (w, c, CONV_KERNEL, CONV_KERNEL)
        shapes[f"conv{i}.bias"] = (w,)
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"bn{i}.{suffix}"] = (w,)
        c = w
    extent = conv_tower_extent(INPUT_SIZE, _STD_PADDINGS)
    shapes["fc5.weight"] = (_STD_HIDDEN, _STD_WIDTHS[-1] * extent * extent)
    shapes["fc5.bias"] = (_STD_HIDDEN,)
    shapes["fc6.weight"] = (EMBED_DIM, _STD_HIDDEN)
    shapes["fc6.bias"] = (EMBED_DIM,)
    shapes["head.theta0"] = ()
    shapes["head.theta1"] = ()
    shapes["head.margin"] = ()
    return shapes


def load_checkpoint(path) -> SiameseParams:
    """Read a PVSN checkpoint back into a standard-geometry model.

    Distinct failures: bad magic, unsupported version, truncated blob, and
    shape/name mismatch against the expected architecture.
    """
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4, "magic") != _MAGIC:
        raise CheckpointError("bad magic: not a PVSN checkpoint")
    version = r.u32("version")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {_VERSION})")
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16("name length"), "entry name").decode("utf-8")
        code = r.u8(f"dtype of {name}")
        if code != _DTYPE_F32:
            raise CheckpointError(f"unsupported dtype code {code} for {name}")
        rank = r.u8(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        nvals = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(4 * nvals, f"values of {name}")
        if name in entries:
            raise CheckpointError(f"duplicate checkpoint entry {name}")
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.off != len(blob):
        raise CheckpointError(f"trailing bytes after last checkpoint entry ({len(blob) - r.off})")

    expected = _expected_shapes()
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointError(f"missing checkpoint entry {name}")
        if entries[name].shape != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: expected {shape}, got {entries[name].shape}"
            )
    optional = {"calib.threshold": ()}
    for name, arr in entries.items():
        if name in expected:
            continue
        if name not in optional:
            raise CheckpointError(f"unexpected checkpoint entry {name}")
        if arr.shape != optional[name]:
            raise CheckpointError(
                f"shape mismatch for {name}: expected {optional[name]}, got {arr.shape}"
            )

    blocks = []
    for i in range(1, len(_STD_WIDTHS) + 1):
        rv = entries[f"bn{i}.running_var"]
        if np.any(rv < 0):
            raise CheckpointError(f"invalid bn{i}.running_var: negative variance")
        blocks.append(
            ConvBlock(
                weight=Tensor(entries[f"conv{i}.weight"], requires_grad=True),
                bias=Tensor(entries[f"conv{i}.bias"], requires_grad=True),
                gamma=Tensor(entries[f"bn{i}.gamma"], requires_grad=True),
                beta=Tensor(entries[f"bn{i}.beta"], requires_grad=True),
                running_mean=entries[f"bn{i}.running_mean"],
                running_var=rv,
                padding=_STD_PADDINGS[i - 1],
            )
        )
    extractor = FeatureExtractorParams(
        blocks,
        fc5_weight=Tensor(entries["fc5.weight"], requires_grad=True),
        fc5_bias=Tensor(entries["fc5.bias"], requires_grad=True),
        fc6_weight=Tensor(entries["fc6.weight"], requires_grad=True),
        fc6_bias=Tensor(entries["fc6.bias"], requires_grad=True),
        input_size=INPUT_SIZE,
    )
    calib = entries.get("calib.threshold")
    return SiameseParams(
        extractor,
        theta0=Tensor(entries["head.theta0"], requires_grad=True),
        theta1=Tensor(entries["head.theta1"], requires_grad=True),
        margin=float(entries["head.margin"]),
        calib_threshold=None if calib is None else float(calib),
    )
