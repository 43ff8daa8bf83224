"""Validation partitioning, accuracy metrics and method comparisons."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MetricError, PartitionError, UsageError
from .model import ModelState, forward
from .recovery import RecoveryInput, build_dictionary, copy_next, copy_previous, knn_vote, project
from .training import central_slices
from .volume import ChannelStats, denormalize_channels, extract_boundaries, normalize_channels

METHODS = ("transformer", "knn", "previous", "next")
_METHOD_CODES = {name: i for i, name in enumerate(METHODS)}


@dataclass
class EvalSample:
    """A validation segment with slice ``m`` of axis 1 treated as missing."""

    volume_index: int
    segment_index: int
    origin: Tuple[int, int, int]
    m: int
    v: np.ndarray
    ids: np.ndarray
    boundaries: np.ndarray

    @property
    def key(self) -> Tuple[int, int]:
        return (self.volume_index, self.segment_index)

    @property
    def true_ids(self) -> np.ndarray:
        return self.ids[:, self.m]

    @property
    def true_boundary(self) -> np.ndarray:
        return self.boundaries[:, self.m]

    def recovery_input(self, pred_slice: Optional[np.ndarray] = None) -> RecoveryInput:
        prev_ids, next_ids = self.ids[:, self.m - 1], self.ids[:, self.m + 1]
        dictionary = build_dictionary([prev_ids, next_ids], [self.v[:, self.m - 1], self.v[:, self.m + 1]])
        return RecoveryInput(prev_ids, next_ids, dictionary, pred_slice)


def partition(
    v: np.ndarray,
    g: np.ndarray,
    segment_shape: Tuple[int, int, int] = (64, 7, 64),
    seed: int = 0,
    volume_index: int = 0,
) -> List[EvalSample]:
    """Tile a volume into non-overlapping segments and pick a masked slice per segment.

    Tiles are enumerated in row-major order of their origins; trailing
    remainders are dropped.  Segment ``i`` draws its masked slice from a
    generator seeded with ``(seed, volume_index, i)``.  Segments whose masked
    slice holds no boundary voxel are discarded after the draw, so indices of
    kept segments do not depend on which others were discarded.
    """
    segment_shape = tuple(int(s) for s in segment_shape)
    shape = g.shape
    if v.shape[:3] != shape:
        raise PartitionError(f"orientation volume {v.shape} and grain map {shape} disagree")
    counts = [n // s for n, s in zip(shape, segment_shape)]
    if min(counts) < 1:
        raise PartitionError(f"volume {shape} is smaller than one segment {segment_shape}")
    if segment_shape[1] < 3:
        raise PartitionError("segments need at least 3 slices along axis 1")
    boundaries = extract_boundaries(g)
    choices = central_slices(segment_shape[1])
    samples = []
    index = 0
    for a in range(counts[0]):
        for b in range(counts[1]):
            for c in range(counts[2]):
                origin = (a * segment_shape[0], b * segment_shape[1], c * segment_shape[2])
                rng = np.random.default_rng([seed, volume_index, index])
                m = int(rng.choice(choices))
                window = tuple(slice(o, o + s) for o, s in zip(origin, segment_shape))
                bnd = boundaries[window]
                if bnd[:, m].any():
                    samples.append(
                        EvalSample(volume_index, index, origin, m, v[window].copy(), g[window].copy(), bnd.copy())
                    )
                index += 1
    return samples


def overall_accuracy(pred_ids: np.ndarray, true_ids: np.ndarray) -> float:
    pred_ids, true_ids = np.asarray(pred_ids), np.asarray(true_ids)
    if pred_ids.shape != true_ids.shape:
        raise MetricError(f"shapes differ: {pred_ids.shape} vs {true_ids.shape}")
    return float(np.mean(pred_ids == true_ids))


def boundary_accuracy(pred_ids: np.ndarray, true_ids: np.ndarray, true_boundary: np.ndarray) -> float:
    pred_ids, true_ids = np.asarray(pred_ids), np.asarray(true_ids)
    mask = np.asarray(true_boundary, dtype=bool)
    if pred_ids.shape != true_ids.shape or mask.shape != true_ids.shape:
        raise MetricError(f"shapes differ: {pred_ids.shape}, {true_ids.shape}, {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise MetricError("the slice has no boundary voxels")
    return float(np.sum((pred_ids == true_ids) & mask) / count)


SUMMARY_FIELDS = ("min", "q1", "median", "q3", "max", "mean", "std")


def summarize(values) -> Dict[str, float]:
    """Box-plot quantiles plus mean and population standard deviation."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return {k: float("nan") for k in SUMMARY_FIELDS}
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(SUMMARY_FIELDS, [float(t) for t in q] + [float(x.mean()), float(x.std())]))


def improvements(metric: str, method_records: Sequence[dict], baseline_records: Sequence[dict]) -> np.ndarray:
    """Per-sample ``metric(method) - metric(baseline)``, aligned on sample keys."""
    a = {r["sample"]: r[metric] for r in method_records}
    b = {r["sample"]: r[metric] for r in baseline_records}
    if set(a) != set(b) or len(a) != len(method_records) or len(b) != len(baseline_records):
        raise UsageError("improvements need both methods evaluated on the same sample set")
    keys = sorted(a)
    return np.array([a[k] - b[k] for k in keys], dtype=np.float64)


@dataclass
class EvalReport:
    records: List[dict] = field(default_factory=list)

    def methods(self) -> List[str]:
        seen = []
        for r in self.records:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def by_method(self, method: str) -> List[dict]:
        return [r for r in self.records if r["method"] == method]

    def summary(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        return {
            m: {metric: summarize([r[metric] for r in self.by_method(m)]) for metric in ("overall", "boundary")}
            for m in self.methods()
        }

    def improvement_tables(self, reference: str = "transformer") -> Dict[str, Dict[str, Dict[str, float]]]:
        if reference not in self.methods():
            return {}
        out = {}
        ref = self.by_method(reference)
        for m in self.methods():
            if m == reference:
                continue
            out[f"{reference}-{m}"] = {
                metric: summarize(improvements(metric, ref, self.by_method(m))) for metric in ("overall", "boundary")
            }
        return out

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean([r[metric] for r in self.by_method(method)]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["volume", "segment", "m", "method", "overall", "boundary"])
            for r in self.records:
                w.writerow([r["sample"][0], r["sample"][1], r["m"], r["method"], repr(r["overall"]), repr(r["boundary"])])

    def to_json(self) -> dict:
        return {
            "records": [dict(r, sample=list(r["sample"])) for r in self.records],
            "summary": self.summary(),
            "improvements": self.improvement_tables(),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)


def transformer_slice(state: ModelState, stats: ChannelStats, sample: EvalSample) -> np.ndarray:
    """Denormalized model prediction at the masked slice of a segment."""
    x, _ = normalize_channels(sample.v, stats)
    x = x.copy()
    x[:, sample.m] = 0.0
    pred = forward(state, x, training=False).data
    return denormalize_channels(pred[:, sample.m], stats)


def recover_sample(
    sample: EvalSample,
    method: str,
    seed: int = 0,
    state: Optional[ModelState] = None,
    stats: Optional[ChannelStats] = None,
) -> np.ndarray:
    if method == "transformer":
        if state is None or stats is None:
            raise UsageError("the transformer method needs a model state and channel statistics")
        return project(sample.recovery_input(transformer_slice(state, stats, sample)))
    inp = sample.recovery_input()
    if method == "knn":
        rng = np.random.default_rng([seed, sample.volume_index, sample.segment_index, _METHOD_CODES["knn"]])
        return knn_vote(inp, rng)
    if method == "previous":
        return copy_previous(inp)
    if method == "next":
        return copy_next(inp)
    raise UsageError(f"unknown method {method!r}; choose from {METHODS}")


def _score(sample: EvalSample, methods, seed, state, stats) -> List[dict]:
    out = []
    for method in methods:
        ids = recover_sample(sample, method, seed, state, stats)
        out.append(
            {
                "sample": sample.key,
                "m": sample.m,
                "method": method,
                "overall": overall_accuracy(ids, sample.true_ids),
                "boundary": boundary_accuracy(ids, sample.true_ids, sample.true_boundary),
            }
        )
    return out


_WORKER: dict = {}


def _init_worker(methods, seed, state, stats):
    _WORKER.update(methods=methods, seed=seed, state=state, stats=stats)


def _score_in_worker(sample):
    w = _WORKER
    return _score(sample, w["methods"], w["seed"], w["state"], w["stats"])


def evaluate_samples(
    samples: Sequence[EvalSample],
    methods: Sequence[str] = METHODS,
    seed: int = 0,
    state: Optional[ModelState] = None,
    stats: Optional[ChannelStats] = None,
    workers: int = 1,
) -> EvalReport:
    """Score every method on every sample; rows are ordered by sample, then method."""
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {METHODS}")
    if workers <= 1 or len(samples) <= 1:
        rows = [_score(s, methods, seed, state, stats) for s in samples]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(methods, seed, state, stats)) as ex:
            rows = list(ex.map(_score_in_worker, samples, chunksize=max(1, len(samples) // (4 * workers))))
    return EvalReport([r for group in rows for r in group])


def run_comparison(
    volumes: Sequence[Tuple[np.ndarray, np.ndarray]],
    methods: Sequence[str] = METHODS,
    seed: int = 0,
    state: Optional[ModelState] = None,
    stats: Optional[ChannelStats] = None,
    segment_shape: Optional[Tuple[int, int, int]] = None,
    workers: int = 1,
) -> EvalReport:
    """Partition each (orientation volume, grain map) pair and compare recovery methods."""
    if segment_shape is None:
        segment_shape = state.config.crop_shape if state is not None else (64, 7, 64)
    samples = []
    for j, (v, g) in enumerate(volumes):
        samples.extend(partition(v, g, segment_shape, seed, j))
    return evaluate_samples(samples, methods, seed, state, stats, workers)


def _tile_starts(n: int, c: int) -> List[int]:
    starts = list(range(0, n - c + 1, c))
    if starts[-1] + c < n:
        starts.append(n - c)
    return starts


def predict_slice(state: ModelState, stats: ChannelStats, v: np.ndarray, m: int) -> np.ndarray:
    """Denormalized prediction of slice ``m`` (axis 1) of a whole volume.

    The slice is covered by crops placed on a regular grid along axes 0 and
    2, with the last crop shifted back to the volume edge; where crops
    overlap the later one wins.  Along axis 1 the crop is centered on ``m``
    and clamped to the volume.
    """
    c0, c1, c2 = state.config.crop_shape
    n0, n1, n2 = v.shape[:3]
    if n0 < c0 or n1 < c1 or n2 < c2:
        raise UsageError(f"volume {v.shape[:3]} is smaller than the model crop {state.config.crop_shape}")
    s1 = min(max(m - c1 // 2, 0), n1 - c1)
    local = m - s1
    if local not in central_slices(c1):
        raise UsageError(f"slice {m} cannot be placed among the central slices of a crop")
    x, _ = normalize_channels(v[:, s1:s1 + c1], stats)
    x[:, local] = 0.0
    out = np.zeros((n0, n2, 3))
    for a in _tile_starts(n0, c0):
        for b in _tile_starts(n2, c2):
            pred = forward(state, x[a:a + c0, :, b:b + c2], training=False).data
            out[a:a + c0, b:b + c2] = pred[:, local]
    return denormalize_channels(out, stats)


def recover_slice(
    v: np.ndarray,
    g: np.ndarray,
    m: int,
    method: str = "transformer",
    state: Optional[ModelState] = None,
    stats: Optional[ChannelStats] = None,
    seed: int = 0,
) -> np.ndarray:
    """Recover the IDs of slice ``m`` of a whole volume from slices m-1 and m+1."""
    if not 1 <= m <= g.shape[1] - 2:
        raise UsageError(f"slice {m} needs observed neighbors on both sides (1 <= m <= {g.shape[1] - 2})")
    prev_ids, next_ids = g[:, m - 1], g[:, m + 1]
    dictionary = build_dictionary([prev_ids, next_ids], [v[:, m - 1], v[:, m + 1]])
    if method == "transformer":
        if state is None or stats is None:
            raise UsageError("the transformer method needs a model state and channel statistics")
        return project(RecoveryInput(prev_ids, next_ids, dictionary, predict_slice(state, stats, v, m)))
    inp = RecoveryInput(prev_ids, next_ids, dictionary)
    if method == "knn":
        return knn_vote(inp, np.random.default_rng([seed, m]))
    if method == "previous":
        return copy_previous(inp)
    if method == "next":
        return copy_next(inp)
    raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
