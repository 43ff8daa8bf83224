"""Missing-slice ID recovery: anchored nearest-neighbor projection and baselines.

A missing slice is an (N1, N3) grid.  Its previous and next slices are fully
observed, so every voxel starts with two observed neighbors across the gap
plus up to four in-slice neighbors that become usable once assigned.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from .errors import DictionaryError, RecoveryError

UNASSIGNED = 0
_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class RecoveryInput:
    prev_ids: np.ndarray
    next_ids: np.ndarray
    dictionary: Mapping[int, np.ndarray]
    pred_slice: Optional[np.ndarray] = None

    def __post_init__(self):
        self.prev_ids = np.asarray(self.prev_ids, dtype=np.int64)
        self.next_ids = np.asarray(self.next_ids, dtype=np.int64)
        if self.prev_ids.ndim != 2 or self.prev_ids.shape != self.next_ids.shape:
            raise RecoveryError(
                f"previous and next slices must be equal 2-D grids, got {self.prev_ids.shape} and {self.next_ids.shape}"
            )
        if self.prev_ids.size == 0:
            raise RecoveryError("slices are empty")
        if self.pred_slice is not None:
            self.pred_slice = np.asarray(self.pred_slice, dtype=np.float64)
            if self.pred_slice.shape[:2] != self.prev_ids.shape:
                raise RecoveryError(f"prediction {self.pred_slice.shape} does not match slices {self.prev_ids.shape}")


def build_dictionary(ids_slices: Sequence[np.ndarray], v_slices: Sequence[np.ndarray]) -> Dict[int, np.ndarray]:
    """Mean cubochoric vector of every ID observed in the given slices."""
    ids = np.concatenate([np.asarray(s).reshape(-1) for s in ids_slices])
    v = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1, 3) for s in v_slices])
    labels, inverse = np.unique(ids, return_inverse=True)
    counts = np.bincount(inverse).astype(np.float64)
    sums = np.stack([np.bincount(inverse, weights=v[:, c]) for c in range(3)], axis=1)
    means = sums / counts[:, None]
    return {int(k): means[i] for i, k in enumerate(labels)}


def anchor(inp: RecoveryInput) -> np.ndarray:
    """IDs where previous and next slices agree; 0 elsewhere."""
    out = np.zeros(inp.prev_ids.shape, dtype=np.int64)
    same = inp.prev_ids == inp.next_ids
    out[same] = inp.prev_ids[same]
    return out


def _propagate(inp: RecoveryInput, choose: Callable[[int, int, list], int]) -> np.ndarray:
    """Shared ordering for projection and voting.

    Each round fixes the threshold t to the largest neighbor count among
    unassigned voxels (two observed across-slice neighbors plus assigned
    in-slice neighbors), then sweeps unassigned voxels in row-major order and
    assigns every voxel whose current count reaches t.  Assignments made
    during a sweep count immediately for later voxels.  ``choose(i, j, ids)``
    picks an ID from the neighbor IDs (with multiplicity).
    """
    out = anchor(inp)
    n1, n2 = out.shape
    prev, nxt = inp.prev_ids, inp.next_ids
    assigned = out != UNASSIGNED
    # in-slice assigned neighbor counts
    counts = np.zeros((n1, n2), dtype=np.int64)
    a = assigned.astype(np.int64)
    counts[1:, :] += a[:-1, :]
    counts[:-1, :] += a[1:, :]
    counts[:, 1:] += a[:, :-1]
    counts[:, :-1] += a[:, 1:]

    out_l = out.tolist()
    counts_l = counts.tolist()
    remaining = [(i, j) for i in range(n1) for j in range(n2) if not assigned[i, j]]
    while remaining:
        threshold = 2 + max(counts_l[i][j] for i, j in remaining)
        left = []
        for i, j in remaining:
            if 2 + counts_l[i][j] < threshold:
                left.append((i, j))
                continue
            neighbor_ids = [int(prev[i, j]), int(nxt[i, j])]
            for di, dj in _OFFSETS:
                p, q = i + di, j + dj
                if 0 <= p < n1 and 0 <= q < n2 and out_l[p][q] != UNASSIGNED:
                    neighbor_ids.append(out_l[p][q])
            out_l[i][j] = choose(i, j, neighbor_ids)
            for di, dj in _OFFSETS:
                p, q = i + di, j + dj
                if 0 <= p < n1 and 0 <= q < n2:
                    counts_l[p][q] += 1
        remaining = left
    return np.array(out_l, dtype=np.int64)


def project(inp: RecoveryInput) -> np.ndarray:
    """Assign each voxel the neighbor ID whose dictionary vector is closest to the prediction.

    Distance ties go to the lowest ID.
    """
    if not inp.dictionary:
        raise RecoveryError("the grain dictionary is empty")
    if inp.pred_slice is None:
        raise RecoveryError("projection needs a predicted slice")
    pred = inp.pred_slice
    table = inp.dictionary

    def choose(i, j, ids):
        best_id, best_d = None, None
        for g in sorted(set(ids)):
            try:
                ref = table[g]
            except KeyError as exc:
                raise DictionaryError(f"grain {g} is missing from the dictionary") from exc
            diff = pred[i, j] - ref
            d = float(diff @ diff)
            if best_d is None or d < best_d:
                best_id, best_d = g, d
        return best_id

    return _propagate(inp, choose)


def knn_vote(inp: RecoveryInput, rng: np.random.Generator) -> np.ndarray:
    """Majority neighbor ID with the projection's ordering; ties are broken by ``rng``."""

    def choose(i, j, ids):
        values, counts = np.unique(ids, return_counts=True)
        tied = values[counts == counts.max()]
        if tied.size == 1:
            return int(tied[0])
        return int(tied[rng.integers(tied.size)])

    return _propagate(inp, choose)


def copy_previous(inp: RecoveryInput) -> np.ndarray:
    return inp.prev_ids.copy()


def copy_next(inp: RecoveryInput) -> np.ndarray:
    return inp.next_ids.copy()


def ids_to_cubochoric(ids: np.ndarray, dictionary: Mapping[int, np.ndarray]) -> np.ndarray:
    ids = np.asarray(ids)
    labels, inverse = np.unique(ids, return_inverse=True)
    missing = [int(g) for g in labels if int(g) not in dictionary]
    if missing:
        raise DictionaryError(f"grains {missing[:10]} are missing from the dictionary")
    table = np.stack([np.asarray(dictionary[int(g)], dtype=np.float64) for g in labels])
    return table[inverse.reshape(ids.shape)]
