"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 missing input file, 4 checkpoint incompatible with the request.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import load_config
from .errors import CheckpointMismatchError, ConfigError, ParameterError, SliceRecoveryError, UsageError
from .evaluation import METHODS, recover_slice, run_comparison
from .fileio import VolumeFile, import_csv, volume_from_arrays
from .model import ModelConfig, ModelState, axial_attention, load_checkpoint, param_count, save_checkpoint
from .recovery import build_dictionary, ids_to_cubochoric
from .synthgen import GenSpec, generate, size_distribution_report
from .tensor import Tensor, linear, matmul, softmax_rows
from .training import AugmentSpec, TrainConfig, make_pool, train
from .volume import extract_boundaries

log = logging.getLogger("slicerecovery")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING, EXIT_CHECKPOINT = 0, 1, 2, 3, 4

# (name, mean grain size, twins per grain) for the full-scale data set
FULL_SCALE_SETTINGS = [
    ("size2.0", 2.0, 0.0),
    ("size2.5", 2.5, 0.0),
    ("size3.0", 3.0, 0.0),
] + [(f"twins{k}", 2.3, float(k)) for k in range(6)]
FULL_TRAIN_SHAPE = (192, 192, 192)
FULL_VALID_SHAPE = (64, 192, 64)


class CliUsageError(SliceRecoveryError):
    pass


def _derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0])


def _shape(values) -> tuple:
    shape = tuple(int(v) for v in values)
    if len(shape) != 3 or min(shape) < 1:
        raise CliUsageError(f"shape must be three positive integers, got {list(values)}")
    return shape


def _read_volume(path):
    vf = VolumeFile.read(path)
    if vf.ids is None:
        raise CliUsageError(f"{path} has no IDS section")
    return vf.data.astype(np.float64), vf.ids.astype(np.int64)


# ------------------------------------------------------------------ commands

def cmd_gen(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen = cfg.get("gen", {})
    seed = args.seed
    jobs = []
    if args.preset == "full" or gen.get("preset") == "full":
        for i, (name, size, twins) in enumerate(FULL_SCALE_SETTINGS):
            jobs.append((f"train_{name}", FULL_TRAIN_SHAPE, size, twins, _derived_seed(seed, 0, i)))
            jobs.append((f"valid_{name}", FULL_VALID_SHAPE, size, twins, _derived_seed(seed, 1, i)))
    else:
        shape = _shape(args.shape or gen.get("shape", (64, 64, 64)))
        size = args.mean_grain_size if args.mean_grain_size is not None else gen.get("mean_grain_size", 2.0)
        twins = args.twins if args.twins is not None else gen.get("mean_twins_per_grain", 0.0)
        if size <= 0 or twins < 0:
            raise CliUsageError("mean grain size must be positive and twin rate non-negative")
        count = args.count or gen.get("count", 1)
        if np.prod(shape) < gen.get("min_grain_voxels", 27):
            raise CliUsageError(f"shape {shape} is too small to hold a single grain")
        for i in range(count):
            jobs.append((f"volume_{i:03d}", shape, size, twins, _derived_seed(seed, 2, i)))
    report_rows = []
    for name, shape, size, twins, vseed in jobs:
        spec = GenSpec(
            shape,
            size,
            twins,
            seed=vseed,
            sigma_ln=gen.get("sigma_ln", 0.4),
            voxels_per_unit=gen.get("voxels_per_unit", 4.0),
            min_grain_voxels=gen.get("min_grain_voxels", 27),
        )
        t0 = time.perf_counter()
        v, g = generate(spec)
        volume_from_arrays(v, g, extract_boundaries(g)).write(out / f"{name}.ebsd")
        grains = int(g.max())
        log.info("%s: %s, %d grains, %.1fs", name, shape, grains, time.perf_counter() - t0)
        if grains >= 30:
            for q, value in size_distribution_report(g):
                report_rows.append([name, repr(float(q)), repr(float(value))])
    with open(out / "size_distribution.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["volume", "normal_quantile", "log_relative_diameter"])
        w.writerows(report_rows)
    print(f"wrote {len(jobs)} volumes to {out}")
    return EXIT_OK


def _model_config(cfg) -> ModelConfig:
    return ModelConfig(**cfg.get("model", {}))


def cmd_train(args, cfg) -> int:
    tcfg = dict(cfg.get("train", {}))
    paths = args.volumes or tcfg.pop("volumes", [])
    tcfg.pop("volumes", None)
    if not paths:
        raise CliUsageError("train needs at least one volume file")
    if args.steps is not None:
        tcfg["total_steps"] = args.steps
    tcfg.setdefault("seed", args.seed)
    train_cfg = TrainConfig(**tcfg)
    aug = cfg.get("augment", {})
    augment = AugmentSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()})
    model_cfg = _model_config(cfg)
    pool, stats = make_pool([_read_volume(p) for p in paths])
    state = ModelState.initialize(model_cfg, seed=_derived_seed(args.seed, 3))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(pool, state, train_cfg, augment, stats, checkpoint_dir=out)
    result.write_trace(out / "loss.csv")
    save_checkpoint(out / "model.ckpt", state, stats, {"step": train_cfg.total_steps, "train": train_cfg.to_dict()},
                    result.velocity)
    print(f"trained {train_cfg.total_steps} steps; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(path, cfg):
    expect = _model_config(cfg) if "model" in cfg else None
    state, stats, _, _ = load_checkpoint(path, expect)
    if stats is None:
        raise CheckpointMismatchError(f"{path} carries no normalization statistics")
    return state, stats


def cmd_recover(args, cfg) -> int:
    v, g = _read_volume(args.volume)
    state = stats = None
    if args.method == "transformer":
        if not args.checkpoint:
            raise CliUsageError("the transformer method needs --checkpoint")
        state, stats = _load_model(args.checkpoint, cfg)
    ids = recover_slice(v, g, args.slice, args.method, state, stats, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"recovered_slice{args.slice}_{args.method}.ebsd"
    m = args.slice
    dictionary = build_dictionary([g[:, m - 1], g[:, m + 1]], [v[:, m - 1], v[:, m + 1]])
    cubo = ids_to_cubochoric(ids, dictionary)
    volume_from_arrays(cubo[:, None], ids[:, None]).write(path)
    accuracy = float(np.mean(ids == g[:, m]))
    print(f"wrote {path}; agreement with stored slice {accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    ecfg = cfg.get("eval", {})
    paths = args.volumes or ecfg.get("volumes", [])
    if not paths:
        raise CliUsageError("eval needs at least one volume file")
    methods = args.methods or ecfg.get("methods", list(METHODS))
    state = stats = None
    if "transformer" in methods:
        if not args.checkpoint:
            raise CliUsageError("the transformer method needs --checkpoint")
        state, stats = _load_model(args.checkpoint, cfg)
    segment = tuple(ecfg["segment_shape"]) if "segment_shape" in ecfg else None
    workers = args.threads or ecfg.get("workers", 1)
    report = run_comparison([_read_volume(p) for p in paths], methods, args.seed, state, stats, segment, workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    for method, metrics in report.summary().items():
        print(f"{method:12s} overall {metrics['overall']['mean']:.4f}  boundary {metrics['boundary']['mean']:.4f}")
    return EXIT_OK


def full_attention(x: Tensor, wq, wk, wv, wo, heads: int) -> Tensor:
    """Multi-head attention over the flattened volume, for cost comparison."""
    d = x.shape[-1]
    n = int(np.prod(x.shape[:-1]))
    dh = d // heads
    seq = x.reshape(1, n, d)

    def split(t):
        return t.reshape(1, n, heads, dh).permute(0, 2, 1, 3)

    q, k, v = split(linear(seq, wq)), split(linear(seq, wk)), split(linear(seq, wv))
    w = softmax_rows(matmul(q, k.permute(0, 1, 3, 2)) / np.sqrt(dh))
    ctx = matmul(w, v).permute(0, 2, 1, 3).reshape(1, n, d)
    return linear(ctx, wo).reshape(x.shape)


def bench_attention(sizes: List[int], dim: int = 16, heads: int = 2, repeats: int = 3, seed: int = 0):
    """Rows of (side, full seconds, axial seconds, full score bytes, axial score bytes)."""
    rng = np.random.default_rng(seed)
    ws = [Tensor(rng.uniform(-0.25, 0.25, (dim, dim))) for _ in range(4)]
    rows = []
    for side in sizes:
        x = Tensor(rng.standard_normal((side, side, side, dim)))

        def timed(fn):
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            return best

        t_full = timed(lambda: full_attention(x, *ws, heads))
        t_axial = timed(lambda: [axial_attention(x, a, *ws, heads) for a in range(3)])
        n = side ** 3
        rows.append((side, t_full, t_axial, 8 * heads * n * n, 8 * heads * n * side))
    return rows


def cmd_bench_attention(args, cfg) -> int:
    rows = bench_attention(args.sizes, args.dim, args.heads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_attention.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["side", "full_seconds", "axial_seconds", "full_score_bytes", "axial_score_bytes"])
        w.writerows(rows)
    print(f"{'side':>5} {'full s':>10} {'axial s':>10} {'ratio':>8} {'full MB':>10} {'axial MB':>10}")
    for side, tf, ta, mf, ma in rows:
        print(f"{side:5d} {tf:10.4f} {ta:10.4f} {tf / ta:8.2f} {mf / 2**20:10.2f} {ma / 2**20:10.2f}")
    return EXIT_OK


def cmd_import_csv(args, cfg) -> int:
    vf = import_csv(args.path, degrees=args.units == "deg")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (Path(args.path).stem + ".ebsd")
    vf.write(path)
    print(f"wrote {path} with dims {vf.dims}")
    return EXIT_OK


def slice_to_rgb(values: np.ndarray) -> np.ndarray:
    """Min-max scale each channel of an (H, W, 3) array to uint8."""
    lo = values.min(axis=(0, 1), keepdims=True)
    hi = values.max(axis=(0, 1), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.round(255.0 * (values - lo) / span).astype(np.uint8)


def cmd_export_png(args, cfg) -> int:
    from PIL import Image

    vf = VolumeFile.read(args.volume)
    data = vf.data
    if data.shape[-1] != 3:
        raise CliUsageError("export-png needs a three-channel volume")
    if not 0 <= args.slice < data.shape[args.axis]:
        raise CliUsageError(f"slice {args.slice} is out of range for axis {args.axis}")
    image = slice_to_rgb(np.take(data, args.slice, axis=args.axis).astype(np.float64))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{Path(args.volume).stem}_axis{args.axis}_slice{args.slice}.png"
    Image.fromarray(image, mode="RGB").save(path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_param_count(args, cfg) -> int:
    model_cfg = _model_config(cfg)
    for key in ("layers", "heads", "embed_dim", "ff_dim"):
        value = getattr(args, key)
        if value is not None:
            setattr(model_cfg, key, value)
    model_cfg = ModelConfig.from_dict(model_cfg.to_dict())
    print(param_count(model_cfg))
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    default = argparse.SUPPRESS if suppress else None
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=default, help="global seed (default 0)")
    common.add_argument("--threads", type=int, default=default, help="evaluation worker processes")
    common.add_argument("--out", default=default, help="output directory (default .)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="slicerecovery", parents=[_global_flags(False)], description="Missing-slice recovery toolkit."
    )
    common = _global_flags(True)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic volumes")
    g.add_argument("--preset", choices=["full"], help="full-scale training and validation set")
    g.add_argument("--shape", type=int, nargs=3)
    g.add_argument("--mean-grain-size", type=float)
    g.add_argument("--twins", type=float, help="mean twins per grain")
    g.add_argument("--count", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model on volume files")
    t.add_argument("volumes", nargs="*")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("recover", parents=[common], help="recover one slice of a volume")
    r.add_argument("volume")
    r.add_argument("--slice", type=int, required=True, help="index along axis 1")
    r.add_argument("--method", choices=["transformer", "knn", "previous", "next"], default="transformer")
    r.add_argument("--checkpoint")
    r.set_defaults(func=cmd_recover)

    e = sub.add_parser("eval", parents=[common], help="compare recovery methods on validation volumes")
    e.add_argument("volumes", nargs="*")
    e.add_argument("--checkpoint")
    e.add_argument("--methods", nargs="+", choices=["transformer", "knn", "previous", "next"])
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-attention", parents=[common], help="time full against axial attention")
    b.add_argument("--sizes", type=int, nargs="+", default=[4, 6, 8, 10])
    b.add_argument("--dim", type=int, default=16)
    b.add_argument("--heads", type=int, default=2)
    b.set_defaults(func=cmd_bench_attention)

    i = sub.add_parser("import-csv", parents=[common], help="convert x,y,z,phi1,Phi,phi2 rows")
    i.add_argument("path")
    i.add_argument("--units", choices=["rad", "deg"], default="rad")
    i.set_defaults(func=cmd_import_csv)

    x = sub.add_parser("export-png", parents=[common], help="render a slice as RGB")
    x.add_argument("volume")
    x.add_argument("--slice", type=int, required=True)
    x.add_argument("--axis", type=int, choices=[0, 1, 2], default=1)
    x.set_defaults(func=cmd_export_png)

    c = sub.add_parser("param-count", parents=[common], help="print the learnable parameter count")
    c.add_argument("--layers", type=int)
    c.add_argument("--heads", type=int)
    c.add_argument("--embed-dim", type=int)
    c.add_argument("--ff-dim", type=int)
    c.set_defaults(func=cmd_param_count)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else {}
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if args.out is None:
            args.out = cfg.get("out", ".")
        if args.threads is None:
            args.threads = cfg.get("threads")
        if args.threads is not None and args.threads < 1:
            raise CliUsageError("--threads must be at least 1")
        return args.func(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (CliUsageError, ConfigError, ParameterError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SliceRecoveryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
