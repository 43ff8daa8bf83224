"""Self-supervised masked-slice training: sampling, augmentation, SGD and schedule."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import DataError, ParameterError, TrainingError
from .model import ModelState, boundary_masked_loss, forward, save_checkpoint
from .volume import ChannelStats, extract_boundaries, normalize_channels, pooled_stats

log = logging.getLogger(__name__)

MAX_RESAMPLES = 100


@dataclass
class TrainConfig:
    lr_peak: float = 0.01
    warmup_steps: int = 8000
    total_steps: int = 160000
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be at least 1")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ParameterError("step counts must be non-negative")
        if self.total_steps > 0 and not self.warmup_steps < self.total_steps:
            raise ParameterError(
                f"warmup_steps ({self.warmup_steps}) must be smaller than total_steps ({self.total_steps})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentSpec:
    scale_range: Tuple[float, float] = (0.8, 1.2)
    offset_range: Tuple[float, float] = (-0.2, 0.2)
    flips: bool = True
    rotations: bool = True
    permute_axes: bool = True
    color_shift: bool = True


@dataclass
class Sample:
    """One training or evaluation unit.

    ``x_star`` is the (normalized, augmented) ground truth crop, ``mask`` the
    multiplicative mask with slice ``m`` of axis 1 zeroed, ``boundary`` the
    (N1, 1, N3) boundary map of that slice.
    """

    x_star: np.ndarray
    m: int
    mask: np.ndarray
    boundary: np.ndarray
    ids: Optional[np.ndarray] = None

    @property
    def masked_input(self) -> np.ndarray:
        return self.x_star * self.mask


@dataclass
class TrainingVolume:
    v: np.ndarray
    ids: np.ndarray
    boundaries: np.ndarray


def make_pool(volumes: Sequence[Tuple[np.ndarray, np.ndarray]], stats: Optional[ChannelStats] = None):
    """Normalize (v, ids) pairs with pooled channel statistics; returns (pool, stats)."""
    if not volumes:
        raise DataError("the training pool is empty")
    if stats is None:
        stats = pooled_stats([v for v, _ in volumes])
    pool = [
        TrainingVolume(normalize_channels(v, stats)[0], np.asarray(g), extract_boundaries(g))
        for v, g in volumes
    ]
    return pool, stats


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Half-cosine ramp to ``lr_peak`` over the warmup, then half-cosine decay to 0."""
    if not 0 <= step <= config.total_steps:
        raise ParameterError(f"step {step} lies outside [0, {config.total_steps}]")
    peak = config.lr_peak
    if step < config.warmup_steps:
        return peak * 0.5 * (1.0 - math.cos(math.pi * step / config.warmup_steps))
    span = config.total_steps - config.warmup_steps
    if span == 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - config.warmup_steps) / span))


def central_slices(n2: int) -> np.ndarray:
    """Indices of the (up to) five central slices along axis 1."""
    count = min(5, n2)
    start = (n2 - count) // 2
    return np.arange(start, start + count)


def _transform(arr: np.ndarray, perm, flips, k: int) -> np.ndarray:
    """Axis permutation, flips and k quarter turns in the (0, 2) plane, all as views."""
    out = arr.transpose(tuple(perm) + tuple(range(3, arr.ndim)))
    for axis in range(3):
        if flips[axis]:
            out = np.flip(out, axis)
    return np.rot90(out, k, axes=(0, 2)) if k else out


def sample_crop(
    pool: Sequence[TrainingVolume],
    rng: np.random.Generator,
    crop_shape: Tuple[int, int, int] = (64, 7, 64),
    augment: Optional[AugmentSpec] = None,
) -> Sample:
    """Draw an augmented crop with a masked central slice that contains boundary voxels.

    Draw order per attempt: volume, axis permutation, three flips, rotation,
    scale (3), offset (3), crop offsets (3), masked slice.
    """
    augment = augment or AugmentSpec()
    crop_shape = tuple(crop_shape)
    choices = central_slices(crop_shape[1])
    for _ in range(MAX_RESAMPLES):
        vol = pool[rng.integers(len(pool))]
        perm = rng.permutation(3) if augment.permute_axes else np.arange(3)
        flips = rng.random(3) < 0.5 if augment.flips else np.zeros(3, bool)
        k = int(rng.integers(4)) if augment.rotations else 0
        if augment.color_shift:
            scale = rng.uniform(*augment.scale_range, size=3)
            offset = rng.uniform(*augment.offset_range, size=3)
        else:
            scale, offset = np.ones(3), np.zeros(3)
        v = _transform(vol.v, perm, flips, k)
        shape = v.shape[:3]
        if any(s < c for s, c in zip(shape, crop_shape)):
            raise DataError(f"volume of shape {shape} cannot hold a crop of {crop_shape}")
        start = [int(rng.integers(s - c + 1)) for s, c in zip(shape, crop_shape)]
        m = int(rng.choice(choices))
        window = tuple(slice(a, a + c) for a, c in zip(start, crop_shape))
        boundary = _transform(vol.boundaries, perm, flips, k)[window][:, m:m + 1, :]
        if not boundary.any():
            continue
        x_star = np.ascontiguousarray(v[window]) * scale + offset
        ids = np.ascontiguousarray(_transform(vol.ids, perm, flips, k)[window])
        mask = np.ones(crop_shape + (3,))
        mask[:, m] = 0.0
        return Sample(x_star, m, mask, np.ascontiguousarray(boundary), ids)
    raise DataError(f"no crop with boundary voxels in the masked slice after {MAX_RESAMPLES} attempts")


def sgd_step(
    params: Dict[str, T.Tensor],
    velocity: Dict[str, np.ndarray],
    lr: float,
    config: TrainConfig,
) -> None:
    """Momentum SGD with L2 weight decay, in place.

    v <- momentum * v + (g + wd * theta);  theta <- theta - lr * v.
    A parameter without a gradient is treated as having a zero gradient.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = config.momentum * v + (g + config.weight_decay * p.data)
        velocity[name] = v
        p.data -= lr * v


@dataclass
class TrainResult:
    state: ModelState
    trace: List[Tuple[int, float, float]] = field(default_factory=list)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.trace:
                w.writerow([step, repr(lr), repr(loss)])


def train(
    pool: Sequence[TrainingVolume],
    state: ModelState,
    config: TrainConfig,
    augment: Optional[AugmentSpec] = None,
    stats: Optional[ChannelStats] = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Run ``total_steps`` updates on ``state`` in place.

    Update i (1-based) uses ``lr_schedule(i)``.  Sampling and dropout draw
    from two independent streams spawned from ``config.seed``.
    """
    sample_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    sample_rng = np.random.default_rng(sample_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    crop = state.config.crop_shape
    result = TrainResult(state)
    params = state.params
    for step in range(1, config.total_steps + 1):
        lr = lr_schedule(step, config)
        T.parameters_zero_grad(params.values())
        total = 0.0
        for _ in range(config.batch_size):
            sample = sample_crop(pool, sample_rng, crop, augment)
            pred = forward(state, sample.masked_input, training=True, rng=dropout_rng)
            loss = boundary_masked_loss(pred, sample.x_star, sample.m, sample.boundary)
            if config.batch_size > 1:
                loss = loss / config.batch_size
            total += loss.item()
            T.backward(loss)
        if not math.isfinite(total):
            raise TrainingError(f"loss became non-finite at step {step}")
        sgd_step(params, result.velocity, lr, config)
        result.trace.append((step, lr, total))
        if step % 100 == 0:
            log.info("step %d lr %.3g loss %.4f", step, lr, total)
        if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"step_{step:07d}.ckpt"
            save_checkpoint(path, state, stats, {"step": step, "train": config.to_dict()}, result.velocity)
    return result
