"""Synthetic polycrystals: Laguerre tessellation with lognormal radii, random
orientations and planar twin lamellae.

RNG draw order for a given seed (one ``numpy.random.Generator`` stream):

1. seed positions, 2. seed radii, 3. seed orientations,
4. per grain in ID order: twin count, lamella normal, then per lamella the
   anchor voxel, thickness and rotation axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .errors import GenerationError, StatisticsError
from .orientation import (
    axis_angle_to_quaternion,
    canonical_quaternion,
    quaternion_multiply,
    quaternion_to_cubochoric,
    random_quaternions,
)
from .volume import compact_ids, merge_small_grain_labels, split_disconnected

TWIN_ANGLE = np.deg2rad(60.0)


@dataclass
class GenSpec:
    """Generator settings.

    ``mean_grain_size`` is unitless; the mean sphere-equivalent diameter in
    voxels is ``voxels_per_unit * mean_grain_size``.
    """

    shape: Tuple[int, int, int]
    mean_grain_size: float = 2.0
    mean_twins_per_grain: float = 0.0
    seed: int = 0
    sigma_ln: float = 0.4
    voxels_per_unit: float = 4.0
    min_grain_voxels: int = 27
    n_seeds: Optional[int] = None
    twin_thickness: Tuple[int, int] = field(default=(1, 3))

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise GenerationError(f"shape must be three positive sizes, got {self.shape}")
        if self.mean_grain_size <= 0:
            raise GenerationError("mean_grain_size must be positive")
        if self.mean_twins_per_grain < 0:
            raise GenerationError("mean_twins_per_grain must be non-negative")


def seed_count(spec: GenSpec) -> int:
    if spec.n_seeds is not None:
        return int(spec.n_seeds)
    diameter = spec.voxels_per_unit * spec.mean_grain_size
    grain_volume = np.pi / 6.0 * diameter ** 3
    return max(1, int(round(np.prod(spec.shape) / grain_volume)))


def laguerre_labels(shape, centers: np.ndarray, radii: np.ndarray, chunk: int = 1 << 18) -> np.ndarray:
    """Power-diagram cell of every voxel center, 1-based.

    Minimizing |x - s|^2 - r^2 equals a Euclidean nearest neighbor query after
    lifting seeds to 4-D with height sqrt(R^2 - r^2) and voxels to height 0.
    """
    heights = np.sqrt(np.max(radii) ** 2 - np.asarray(radii) ** 2)
    tree = cKDTree(np.column_stack([centers, heights]))
    n1, n2, n3 = shape
    labels = np.empty(n1 * n2 * n3, dtype=np.int64)
    grid23 = np.stack(np.meshgrid(np.arange(n2) + 0.5, np.arange(n3) + 0.5, indexing="ij"), -1).reshape(-1, 2)
    rows_per_chunk = max(1, chunk // grid23.shape[0])
    for start in range(0, n1, rows_per_chunk):
        stop = min(n1, start + rows_per_chunk)
        i = np.repeat(np.arange(start, stop) + 0.5, grid23.shape[0])
        pts = np.column_stack([i, np.tile(grid23, (stop - start, 1)), np.zeros(i.size)])
        _, idx = tree.query(pts)
        labels[start * n2 * n3: stop * n2 * n3] = idx + 1
    return labels.reshape(shape)


def _insert_twins(ids, quats, spec: GenSpec, rng: np.random.Generator):
    """Planar lamellae inside each grain; every lamella gets a fresh ID."""
    shape = ids.shape
    flat = ids.reshape(-1)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, flat.max() + 2))
    coords = np.stack(np.unravel_index(np.arange(flat.size), shape), -1).astype(np.float64) + 0.5
    out = flat.copy()
    new_quats = [q for q in quats]
    next_id = len(quats)
    lo, hi = spec.twin_thickness
    for gid in range(1, int(flat.max()) + 1):
        k = rng.poisson(spec.mean_twins_per_grain)
        if k == 0:
            continue
        members = order[bounds[gid - 1]:bounds[gid]]
        if members.size == 0:
            continue
        normal = rng.standard_normal(3)
        normal /= np.linalg.norm(normal)
        proj = coords[members] @ normal
        for _ in range(k):
            anchor = proj[rng.integers(members.size)]
            thickness = rng.integers(lo, hi + 1)
            axis = rng.standard_normal(3)
            inside = np.abs(proj - anchor) < 0.5 * thickness
            if not inside.any():
                continue
            twin = quaternion_multiply(quats[gid - 1], axis_angle_to_quaternion(axis, TWIN_ANGLE))
            new_quats.append(canonical_quaternion(twin))
            next_id += 1
            out[members[inside]] = next_id
    return out.reshape(shape), np.array(new_quats)


def generate(spec: GenSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Return (orientation volume (N1,N2,N3,3), grain map (N1,N2,N3))."""
    total = int(np.prod(spec.shape))
    if total < spec.min_grain_voxels:
        raise GenerationError(
            f"shape {spec.shape} holds {total} voxels, fewer than one grain of {spec.min_grain_voxels}"
        )
    rng = np.random.default_rng(spec.seed)
    n = seed_count(spec)
    centers = rng.random((n, 3)) * np.array(spec.shape, dtype=np.float64)
    median_radius = 0.5 * spec.voxels_per_unit * spec.mean_grain_size
    radii = rng.lognormal(np.log(median_radius), spec.sigma_ln, size=n)
    quats = random_quaternions(rng, n)

    ids = laguerre_labels(spec.shape, centers, radii)
    # empty power cells vanish here; keep the orientation table aligned
    present, ids = np.unique(ids, return_inverse=True)
    ids = ids.reshape(spec.shape) + 1
    quats = quats[present - 1]

    if spec.mean_twins_per_grain > 0:
        ids, quats = _insert_twins(ids, quats, spec, rng)

    # discrete cells and overwritten lamellae can fall apart into pieces
    whole = ids
    ids = split_disconnected(whole)
    parent_of = np.arange(ids.max() + 1, dtype=np.int64)
    split = ids > whole.max()
    parent_of[ids[split]] = whole[split]

    # merged labels are a subset of the input labels, so orientations stay exact
    ids = merge_small_grain_labels(ids, spec.min_grain_voxels)
    # pieces of one cell may touch again once a sliver between them is absorbed
    by_parent = parent_of[ids]
    ids = compact_ids(split_disconnected(compact_ids(by_parent)))
    cubo_table = quaternion_to_cubochoric(quats)
    return cubo_table[by_parent - 1], ids


def sphere_equivalent_diameters(g: np.ndarray) -> np.ndarray:
    sizes = np.bincount(np.asarray(g).reshape(-1))[1:]
    sizes = sizes[sizes > 0]
    return (6.0 * sizes / np.pi) ** (1.0 / 3.0)


def size_distribution_report(g: np.ndarray, min_grains: int = 30) -> np.ndarray:
    """Probability-plot pairs for ln(D / mean D).

    Returns an array of shape (G, 2): column 0 holds standard-normal quantiles
    at plotting positions (i - 0.5) / G, column 1 the sorted log sizes.
    """
    d = sphere_equivalent_diameters(g)
    if d.size < min_grains:
        raise StatisticsError(f"need at least {min_grains} grains, got {d.size}")
    values = np.sort(np.log(d / d.mean()))
    probs = (np.arange(1, d.size + 1) - 0.5) / d.size
    return np.column_stack([stats.norm.ppf(probs), values])


def central_fit_r2(report: np.ndarray, central: float = 0.8) -> float:
    """R^2 of a straight-line fit through the central fraction of a probability plot."""
    n = report.shape[0]
    probs = (np.arange(1, n + 1) - 0.5) / n
    lo = 0.5 - central / 2.0
    sel = (probs >= lo) & (probs <= 1.0 - lo)
    x, y = report[sel, 0], report[sel, 1]
    if np.ptp(y) == 0:
        return 1.0
    return float(stats.linregress(x, y).rvalue ** 2)
