"""Voxel volume containers and the orientation / grain-ID / boundary pipeline.

Arrays are plain numpy:

* orientation volume: float64 (N1, N2, N3, 3) cubochoric vectors
* grain map: int64 (N1, N2, N3) grain IDs, positive
* boundary mask: bool (N1, N2, N3), true where a face neighbor has another ID
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DimensionError, ParameterError
from .orientation import cubochoric_to_quaternion, misorientation_angle

FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and standard deviation used for z-scoring."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def _face_pairs(shape: Tuple[int, ...]):
    """Yield (axis, lower-slice, upper-slice) index tuples for every face adjacency."""
    for axis in range(len(shape)):
        lo = [slice(None)] * len(shape)
        hi = [slice(None)] * len(shape)
        lo[axis] = slice(0, shape[axis] - 1)
        hi[axis] = slice(1, shape[axis])
        yield axis, tuple(lo), tuple(hi)


def compact_ids(ids: np.ndarray) -> np.ndarray:
    """Relabel to the contiguous set 1..G, preserving the order of the original IDs."""
    _, inverse = np.unique(ids, return_inverse=True)
    return inverse.reshape(ids.shape).astype(np.int64) + 1


def segment_grains(v: np.ndarray, tolerance: float) -> np.ndarray:
    """Label 6-connected regions whose neighbors differ by at most ``tolerance`` radians.

    With ``tolerance == 0`` neighbors join only when their cubochoric vectors
    are exactly equal.
    """
    if tolerance < 0:
        raise ParameterError("misorientation tolerance must be non-negative")
    if v.ndim != 4 or v.shape[-1] != 3:
        raise DimensionError(f"orientation volume must be (N1,N2,N3,3), got {v.shape}")
    shape = v.shape[:3]
    n = int(np.prod(shape))
    index = np.arange(n).reshape(shape)
    quats = cubochoric_to_quaternion(v) if tolerance > 0 else None
    rows, cols = [], []
    for _, lo, hi in _face_pairs(shape):
        if tolerance == 0:
            joined = np.all(v[lo] == v[hi], axis=-1)
        else:
            joined = misorientation_angle(quats[lo], quats[hi]) <= tolerance
        rows.append(index[lo][joined])
        cols.append(index[hi][joined])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return compact_ids(labels.reshape(shape))


def split_disconnected(ids: np.ndarray) -> np.ndarray:
    """Give every 6-connected piece of an ID its own ID (pieces after the first get new IDs)."""
    ids = np.asarray(ids)
    out = ids.astype(np.int64).copy()
    next_id = int(out.max()) + 1
    for label, box in enumerate(ndimage.find_objects(out), start=1):
        if box is None:
            continue
        sub = out[box] == label
        pieces, count = ndimage.label(sub, structure=FACE_STRUCTURE)
        if count <= 1:
            continue
        view = out[box]
        for piece in range(2, count + 1):
            view[pieces == piece] = next_id
            next_id += 1
    return out


def extract_boundaries(g: np.ndarray) -> np.ndarray:
    """True where at least one in-bounds face neighbor carries a different ID."""
    g = np.asarray(g)
    mask = np.zeros(g.shape, dtype=bool)
    for _, lo, hi in _face_pairs(g.shape):
        diff = g[lo] != g[hi]
        mask[lo] |= diff
        mask[hi] |= diff
    return mask


def grain_means(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row i holds the mean vector of grain i (row 0 unused)."""
    flat_ids = g.reshape(-1)
    size = int(flat_ids.max()) + 1
    counts = np.bincount(flat_ids, minlength=size).astype(np.float64)
    means = np.zeros((size, v.shape[-1]))
    for ch in range(v.shape[-1]):
        sums = np.bincount(flat_ids, weights=v[..., ch].reshape(-1), minlength=size)
        means[:, ch] = np.divide(sums, counts, out=np.zeros(size), where=counts > 0)
    return means


def _neighbor_votes(g: np.ndarray, small: np.ndarray, allow_small_targets: bool):
    """Face-contact counts (grain, neighbor) for small grains; returns (src, dst, count) arrays."""
    src, dst = [], []
    for _, lo, hi in _face_pairs(g.shape):
        a = g[lo].reshape(-1)
        b = g[hi].reshape(-1)
        differ = a != b
        a, b = a[differ], b[differ]
        for s, t in ((a, b), (b, a)):
            keep = small[s] & (allow_small_targets | ~small[t])
            src.append(s[keep])
            dst.append(t[keep])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    if src.size == 0:
        return src, dst, src
    base = np.int64(small.size)
    keys, counts = np.unique(src.astype(np.int64) * base + dst, return_counts=True)
    return keys // base, keys % base, counts


def _best_targets(src, dst, counts) -> Dict[int, int]:
    """Most frequent neighbor per source grain; ties go to the lowest neighbor ID."""
    order = np.lexsort((dst, -counts, src))
    src, dst = src[order], dst[order]
    first = np.ones(src.size, dtype=bool)
    first[1:] = src[1:] != src[:-1]
    return dict(zip(src[first].tolist(), dst[first].tolist()))


def merge_small_grain_labels(g: np.ndarray, min_voxels: int = 27) -> np.ndarray:
    """Label-only part of :func:`remove_small_grains`.

    Returns the merged map without compaction, so every surviving label is one
    of the input labels.
    """
    if min_voxels < 1:
        raise ParameterError("min_voxels must be at least 1")
    g = np.asarray(g, dtype=np.int64)
    while True:
        sizes = np.bincount(g.reshape(-1))
        present = sizes > 0
        present[0] = False
        if present.sum() <= 1:
            break
        small = present & (sizes < min_voxels)
        if not small.any():
            break
        src, dst, counts = _neighbor_votes(g, small, allow_small_targets=False)
        if src.size == 0:
            src, dst, counts = _neighbor_votes(g, small, allow_small_targets=True)
            keep = src == src.min()
            src, dst, counts = src[keep], dst[keep], counts[keep]
        relabel = np.arange(sizes.size)
        for s, t in _best_targets(src, dst, counts).items():
            relabel[s] = t
        g = relabel[g]
    return g


def remove_small_grains(
    g: np.ndarray, v: np.ndarray, min_voxels: int = 27
) -> Tuple[np.ndarray, np.ndarray]:
    """Absorb every grain smaller than ``min_voxels`` into a face neighbor.

    Sizes are measured before any merging in a pass, and a small grain only
    merges into a neighbor that is itself large enough, so two adjacent small
    grains are both removed even if their union would pass the threshold.  A
    pass in which no small grain touches a large one (only possible when the
    volume is made entirely of small grains) merges the lowest-ID small grain
    into its most frequent neighbor instead.  Ties go to the lowest neighbor
    ID.  Absorbed voxels take the mean orientation of the absorbing grain.
    IDs are compacted to 1..G on return.
    """
    if g.shape != v.shape[:3]:
        raise DimensionError(f"grain map {g.shape} and orientation volume {v.shape} disagree")
    g = compact_ids(g)
    v = np.array(v, dtype=np.float64)
    merged = merge_small_grain_labels(g, min_voxels)
    # a grain's mean is unchanged by absorbing voxels already set to that mean
    moved = merged != g
    if moved.any():
        v[moved] = grain_means(g, v)[merged[moved]]
    return compact_ids(merged), v


def average_orientations(g: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Replace every voxel by its grain's arithmetic-mean cubochoric vector.

    Returns the averaged volume and a dictionary mapping grain ID to its mean.
    """
    if g.shape != v.shape[:3]:
        raise DimensionError(f"grain map {g.shape} and orientation volume {v.shape} disagree")
    means = grain_means(g, v)
    averaged = means[g]
    present = np.unique(g)
    return averaged, {int(i): means[i].copy() for i in present}


def normalize_channels(
    v: np.ndarray, stats: Optional[ChannelStats] = None
) -> Tuple[np.ndarray, ChannelStats]:
    """Per-channel z-score.  Supplied ``stats`` are applied as-is."""
    v = np.asarray(v, dtype=np.float64)
    if stats is None:
        flat = v.reshape(-1, v.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        if np.any(std <= 0):
            raise ParameterError(f"cannot normalize a zero-variance channel (std={std})")
        stats = ChannelStats(mean, std)
    return (v - stats.mean) / stats.std, stats


def pooled_stats(volumes) -> ChannelStats:
    """Channel statistics over the union of voxels of several volumes."""
    total = 0
    s1 = np.zeros(3)
    s2 = np.zeros(3)
    for v in volumes:
        flat = np.asarray(v, dtype=np.float64).reshape(-1, 3)
        total += flat.shape[0]
        s1 += flat.sum(axis=0)
    mean = s1 / total
    for v in volumes:
        flat = np.asarray(v, dtype=np.float64).reshape(-1, 3)
        s2 += ((flat - mean) ** 2).sum(axis=0)
    std = np.sqrt(s2 / total)
    if np.any(std <= 0):
        raise ParameterError(f"cannot normalize a zero-variance channel (std={std})")
    return ChannelStats(mean, std)


def denormalize_channels(v: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) * stats.std + stats.mean
