"""Axial-attention transformer for masked-slice prediction.

Tensors are channels-last: a crop is (N1, N2, N3, C).  Spatial axes are
numbered 0, 1, 2 and the masked slice lies along axis 1.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import CheckpointMismatchError, DimensionError, FormatError, LossError, ParameterError
from .tensor import Tensor
from .volume import ChannelStats


@dataclass
class ModelConfig:
    layers: int = 8
    heads: int = 8
    embed_dim: int = 128
    ff_dim: int = 512
    dropout_p: float = 0.1
    input_channels: int = 3
    crop_shape: Tuple[int, int, int] = (64, 7, 64)

    def __post_init__(self):
        self.crop_shape = tuple(int(n) for n in self.crop_shape)
        if self.layers < 0 or self.heads < 1 or self.embed_dim < 1 or self.ff_dim < 1:
            raise ParameterError(f"invalid model sizes: {self}")
        if self.embed_dim % self.heads:
            raise ParameterError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if len(self.crop_shape) != 3 or min(self.crop_shape) < 1:
            raise ParameterError(f"crop_shape must be three positive sizes, got {self.crop_shape}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_shape"] = list(self.crop_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name and shape of every learnable tensor, in canonical order."""
    d, ff, c = config.embed_dim, config.ff_dim, config.input_channels
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.weight": (c, d),
        "embed.bias": (d,),
    }
    for axis, n in enumerate(config.crop_shape):
        shapes[f"pos.axis{axis}"] = (n, d)
    for i in range(config.layers):
        for axis in range(3):
            p = f"layers.{i}.attn{axis}"
            shapes[f"{p}.norm.gamma"] = (d,)
            shapes[f"{p}.norm.beta"] = (d,)
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"{p}.{w}"] = (d, d)
        p = f"layers.{i}.ff"
        shapes[f"{p}.norm.gamma"] = (d,)
        shapes[f"{p}.norm.beta"] = (d,)
        shapes[f"{p}.conv1.weight"] = (3, 3, 3, d, ff)
        shapes[f"{p}.conv1.bias"] = (ff,)
        shapes[f"{p}.conv2.weight"] = (3, 3, 3, ff, d)
        shapes[f"{p}.conv2.bias"] = (d,)
    shapes["head.weight"] = (d, c)
    shapes["head.bias"] = (c,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(config).values()))


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.endswith("conv1.weight") or name.endswith("conv2.weight"):
        return 27 * shape[3]
    return shape[0]


@dataclass
class ModelState:
    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ModelState":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norms, N(0, 0.02) positions.

        Draws happen in the canonical parameter order from one generator.
        """
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.startswith("pos."):
                data = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            elif name.endswith(".beta") or name.endswith(".bias"):
                data = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(_fan_in(name, shape))
                data = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def copy(self) -> "ModelState":
        return ModelState(
            ModelConfig.from_dict(self.config.to_dict()),
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
        )


# ------------------------------------------------------------------ attention

def axial_attention(
    x: Tensor, axis: int, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int
) -> Tensor:
    """Multi-head self-attention along one spatial axis of a channels-last tensor.

    ``axis`` counts spatial axes from 0.  Every line of voxels parallel to
    ``axis`` is an independent sequence; the projections are packed (D, D)
    matrices whose column block h belongs to head h.
    """
    x = T.as_tensor(x)
    k_dims = x.ndim - 1
    if not 0 <= axis < k_dims:
        raise ParameterError(f"axis {axis} is out of range for {k_dims} spatial axes")
    d = x.shape[-1]
    if d % heads:
        raise ParameterError(f"channel count {d} is not divisible by {heads} heads")
    dh = d // heads

    others = [a for a in range(k_dims) if a != axis]
    perm = others + [axis, k_dims]
    inverse = tuple(int(i) for i in np.argsort(perm))
    xp = x.permute(perm) if perm != list(range(x.ndim)) else x
    moved_shape = xp.shape
    n = x.shape[axis]
    batch = int(np.prod(moved_shape[:-2]))
    seq = xp.reshape(batch, n, d)

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, n, heads, dh).permute(0, 2, 1, 3)

    q = split(T.linear(seq, wq))
    k = split(T.linear(seq, wk))
    v = split(T.linear(seq, wv))
    scores = T.matmul(q, k.permute(0, 1, 3, 2)) / math.sqrt(dh)
    weights = T.softmax_rows(scores)
    ctx = T.matmul(weights, v).permute(0, 2, 1, 3).reshape(batch, n, d)
    out = T.linear(ctx, wo).reshape(moved_shape)
    return out.permute(inverse) if perm != list(range(x.ndim)) else out


# -------------------------------------------------------------------- layers

def encoder_layer(
    state: ModelState, index: int, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None
) -> Tensor:
    cfg = state.config
    p = state.params
    for axis in range(3):
        pre = f"layers.{index}.attn{axis}"
        h = T.layer_norm(x, p[f"{pre}.norm.gamma"], p[f"{pre}.norm.beta"])
        h = axial_attention(h, axis, p[f"{pre}.wq"], p[f"{pre}.wk"], p[f"{pre}.wv"], p[f"{pre}.wo"], cfg.heads)
        x = x + T.dropout(h, cfg.dropout_p, rng, training)
    pre = f"layers.{index}.ff"
    h = T.layer_norm(x, p[f"{pre}.norm.gamma"], p[f"{pre}.norm.beta"])
    h = T.conv3d(h, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"])
    h = T.conv3d(T.gelu(h), p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"])
    return x + T.dropout(h, cfg.dropout_p, rng, training)


def forward(
    state: ModelState, masked_input, training: bool = False, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Predict cubochoric vectors at every voxel of a masked crop of shape ``crop_shape + (3,)``."""
    cfg = state.config
    x = T.as_tensor(masked_input)
    expected = cfg.crop_shape + (cfg.input_channels,)
    if x.shape != expected:
        raise DimensionError(f"model expects input {expected}, got {x.shape}")
    p = state.params
    d = cfg.embed_dim
    h = T.linear(x, p["embed.weight"], p["embed.bias"])
    n1, n2, n3 = cfg.crop_shape
    h = h + p["pos.axis0"].reshape(n1, 1, 1, d)
    h = h + p["pos.axis1"].reshape(1, n2, 1, d)
    h = h + p["pos.axis2"].reshape(1, 1, n3, d)
    for i in range(cfg.layers):
        h = encoder_layer(state, i, h, training, rng)
    return T.linear(h, p["head.weight"], p["head.bias"])


# ---------------------------------------------------------------------- loss

def boundary_masked_loss(pred: Tensor, x_star: np.ndarray, m: int, boundary: np.ndarray) -> Tensor:
    """Squared error on the boundary voxels of slice ``m`` (axis 1), averaged over voxels.

    ``boundary`` is the (N1, N3) or (N1, 1, N3) mask of the masked slice.  The
    three channel errors are summed, not averaged.
    """
    pred = T.as_tensor(pred)
    x_star = np.asarray(x_star, dtype=np.float64)
    if pred.shape != x_star.shape:
        raise DimensionError(f"prediction {pred.shape} and target {x_star.shape} differ")
    e = np.asarray(boundary, dtype=bool)
    if e.ndim == 3:
        e = e[:, 0, :]
    if e.shape != (pred.shape[0], pred.shape[2]):
        raise DimensionError(f"boundary mask {e.shape} does not match slice {(pred.shape[0], pred.shape[2])}")
    count = int(e.sum())
    if count == 0:
        raise LossError("masked slice has no boundary voxels")
    idx = np.nonzero(e)
    picked = pred[idx[0], m, idx[1]]
    diff = picked - x_star[idx[0], m, idx[1]]
    return T.square(diff).sum() / count


# ----------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"SRCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    state: ModelState,
    stats: Optional[ChannelStats] = None,
    extra: Optional[dict] = None,
    buffers: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """Write a checkpoint.

    Layout (little-endian): 8-byte magic, u16 version, u32 metadata length,
    UTF-8 JSON metadata, u32 record count, then per record: u16 name length,
    UTF-8 name, u8 ndim, ndim x u32 dims, float64 values in C order.
    Parameters come first; ``buffers`` (optimizer state) follow with a
    ``buffer.`` name prefix.
    """
    meta = {
        "config": state.config.to_dict(),
        "stats": stats.to_dict() if stats is not None else None,
        "extra": extra or {},
    }
    records = [(k, v.data) for k, v in state.params.items()]
    records += [(f"buffer.{k}", np.asarray(v, dtype=np.float64)) for k, v in (buffers or {}).items()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expect: Optional[ModelConfig] = None):
    """Read a checkpoint; returns (state, stats, extra, buffers).

    Raises CheckpointMismatchError if ``expect`` differs from the stored config
    or the stored tensors do not match the stored config.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a model checkpoint")
    try:
        version, meta_len = struct.unpack_from("<HI", data, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 14
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        records = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = math.prod(shape)
            if pos + 8 * size > len(data):
                raise FormatError(f"checkpoint {path} is truncated")
            records[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {path} is malformed: {exc}") from exc

    config = ModelConfig.from_dict(meta["config"])
    if expect is not None and expect.to_dict() != config.to_dict():
        raise CheckpointMismatchError(f"checkpoint config {config.to_dict()} differs from {expect.to_dict()}")
    shapes = parameter_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if name not in records or records[name].shape != shape:
            raise CheckpointMismatchError(f"checkpoint tensor {name} missing or misshapen")
        params[name] = Tensor(records[name], requires_grad=True, name=name)
    buffers = {k[len("buffer."):]: v for k, v in records.items() if k.startswith("buffer.")}
    stats = ChannelStats.from_dict(meta["stats"]) if meta.get("stats") else None
    return ModelState(config, params), stats, meta.get("extra", {}), buffers
