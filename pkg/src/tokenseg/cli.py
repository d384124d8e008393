"""Command-line entry point: phantom, train, infer, eval, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import objective as ob
from .config import (STRATEGIES, ConfigError, TrainConfig, apply_overrides, flatten, load_config,
                     parse_config_text)
from .decoder import binarize
from .encoder import LayoutError
from .trainer import (TrainingAborted, evaluate, make_case, model_from_checkpoint,
                      save_checkpoint, train)
from .volume import (FormatError, MaskVolume, generate_phantom, load_mask, load_volume,
                     normalize_intensity, random_phantom_spec, save_mask, save_volume,
                     sphere_phantom_spec)

log = logging.getLogger("tokenseg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
INDEX_NAME = "index.tsv"
ABLATE_COLUMNS = ("value", "dice", "iou", "hd95", "time_ms", "util", "boundary_ratio")


class UsageError(Exception):
    """Bad flags, config or missing inputs (exit 2)."""


class RuntimeFailure(Exception):
    """The command ran but could not complete (exit 1)."""


# -- datasets --------------------------------------------------------------------------


@dataclass
class IndexEntry:
    name: str
    volume: str
    mask: str
    split: str = "train"


def case_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def write_dataset(out, count, seed, dims=(32, 32, 32), shape="random", noise=0.1, val_count=0):
    """``count`` phantom (volume, mask) pairs plus an index; the last ``val_count`` are validation."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        s = case_seed(seed, i)
        if shape == "sphere":
            spec = sphere_phantom_spec(dims, s, noise_sigma=noise)
        else:
            spec = random_phantom_spec(dims, s, noise_sigma=noise)
        vol, mask = generate_phantom(spec)
        name = f"case{i:03d}"
        save_volume(vol, out / f"{name}_vol.tsv3")
        save_mask(mask, out / f"{name}_mask.tsv3")
        split = "val" if i >= count - val_count else "train"
        entries.append(IndexEntry(name, f"{name}_vol.tsv3", f"{name}_mask.tsv3", split))
    lines = ["name\tvolume\tmask\tsplit"] + [
        f"{e.name}\t{e.volume}\t{e.mask}\t{e.split}" for e in entries]
    (out / INDEX_NAME).write_text("\n".join(lines) + "\n")
    return entries


def read_index(data_dir) -> list[IndexEntry]:
    data_dir = Path(data_dir)
    path = data_dir / INDEX_NAME
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    if not path.is_file():
        raise UsageError(f"dataset index missing: {path}")
    rows = path.read_text().splitlines()
    entries = []
    for n, row in enumerate(rows[1:], 2):
        if not row.strip():
            continue
        parts = row.split("\t")
        if len(parts) not in (3, 4):
            raise UsageError(f"{path}:{n}: expected name, volume, mask[, split]")
        entries.append(IndexEntry(*parts))
    if not entries:
        raise UsageError(f"{path}: no cases listed")
    return entries


def load_cases(data_dir, entries, need_mask=True):
    """Readable cases and the names of those that failed to load."""
    cases, failed = [], []
    for e in entries:
        try:
            vol = load_volume(Path(data_dir) / e.volume)
            mask = load_mask(Path(data_dir) / e.mask) if need_mask else None
            cases.append(make_case(e.name, vol, mask))
        except (OSError, FormatError, ValueError) as err:
            log.warning("skipping %s: %s", e.name, err)
            failed.append((e.name, str(err)))
    return cases, failed


def split_cases(data_dir):
    entries = read_index(data_dir)
    cases, failed = load_cases(data_dir, entries)
    if failed:
        raise RuntimeFailure("unreadable cases: " + ", ".join(n for n, _ in failed))
    by_name = {e.name: e.split for e in entries}
    train_set = [c for c in cases if by_name[c.name] != "val"]
    val_set = [c for c in cases if by_name[c.name] == "val"]
    if not train_set:
        raise UsageError(f"{data_dir}: no training cases")
    # without a held-out split, validation runs on the training cases
    return train_set, val_set or train_set


# -- manifest -------------------------------------------------------------------------------


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command, cfg, seed, inputs, outputs):
    """Written before any computation so every run is reproducible from it."""
    lines = [f"command = {command}", f"tool_version = {__version__}", f"seed = {seed}"]
    lines += [f"config.{k} = {v}" for k, v in flatten(cfg).items()]
    lines += [f"input.{Path(p).name} = sha256:{sha256(p)}" for p in inputs]
    # relative names keep manifests of identical runs byte-identical
    lines += [f"output.{k} = {Path(v).name}" for k, v in outputs.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def dataset_files(data_dir):
    data_dir = Path(data_dir)
    files = [data_dir / INDEX_NAME]
    for e in read_index(data_dir):
        files += [data_dir / e.volume, data_dir / e.mask]
    return [f for f in files if f.is_file()]


# -- config resolution ---------------------------------------------------------------


def parse_sets(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args, extra=None) -> TrainConfig:
    """Defaults < config file < command-line flags."""
    try:
        cfg = load_config(args.config) if args.config else TrainConfig()
        flags = parse_sets(getattr(args, "set", None))
        flags.update(extra or {})
        if args.seed is not None:
            flags["seed"] = str(args.seed)
        cfg = apply_overrides(cfg, flags)
        return cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from e


def out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeFailure(f"cannot create output directory {p}: {e}") from e
    return p


# -- commands ------------------------------------------------------------------------------


def cmd_phantom(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    dims = parse_dims(args.dims)
    spec = {"shape": args.shape, "noise": args.noise}
    if args.spec:
        try:
            text = Path(args.spec).read_text()
        except OSError as e:
            raise UsageError(f"cannot read spec file: {e}") from e
        try:
            raw = parse_config_text(text)
        except ConfigError as e:
            raise UsageError(str(e)) from e
        unknown = set(raw) - {"shape", "noise", "dims"}
        if unknown:
            raise UsageError(f"unknown phantom spec keys: {sorted(unknown)}")
        if "dims" in raw:
            dims = parse_dims(raw["dims"])
        spec["shape"] = raw.get("shape", spec["shape"])
        spec["noise"] = float(raw.get("noise", spec["noise"]))
    if spec["shape"] not in ("random", "sphere"):
        raise UsageError(f"unknown phantom shape {spec['shape']!r}")
    if spec["noise"] < 0:
        raise UsageError("noise must be >= 0")
    seed = 0 if args.seed is None else args.seed
    try:
        write_dataset(args.out, args.count, seed, dims, spec["shape"], spec["noise"], args.val_count)
    except OSError as e:
        raise RuntimeFailure(f"cannot write dataset: {e}") from e
    print(f"wrote {args.count} cases to {args.out}")


def parse_dims(text):
    try:
        dims = tuple(int(v) for v in str(text).split(","))
    except ValueError as e:
        raise UsageError(f"bad dims {text!r}") from e
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"dims must be three positive integers, got {text!r}")
    return dims


def cmd_train(args):
    extra = {} if args.epochs is None else {"max_epochs": str(args.epochs)}
    if args.epochs is not None:
        extra["patience"] = str(min(args.epochs, TrainConfig().patience))
    cfg = resolve_config(args, extra)
    inputs = dataset_files(args.data)
    out = out_dir(args.out)
    outputs = {"best": out / "best.ckpt", "final": out / "final.ckpt",
               "runlog": out / "runlog.csv", "timing": out / "timing.csv"}
    write_manifest(out / "manifest.txt", "train", cfg, cfg.seed, inputs, outputs)
    train_set, val_set = split_cases(args.data)
    try:
        model, final_state, runlog = train(cfg, train_set, val_set)
    except TrainingAborted as e:
        save_checkpoint(outputs["best"], cfg, e.model.state())
        outputs["runlog"].write_text(e.runlog.to_csv())
        raise RuntimeFailure(str(e)) from e
    except LayoutError as e:
        raise UsageError(f"token layout does not fit the data: {e}") from e
    save_checkpoint(outputs["best"], cfg, model.state())
    save_checkpoint(outputs["final"], cfg, final_state)
    outputs["runlog"].write_text(runlog.to_csv())
    outputs["timing"].write_text(runlog.timing_csv())
    best = max(runlog.val_dice)
    print(f"trained {len(runlog.records)} epochs; best val dice {best:.4f}")


def load_model(path):
    try:
        return model_from_checkpoint(path)
    except FileNotFoundError as e:
        raise UsageError(f"checkpoint not found: {path}") from e
    except (ValueError, ConfigError, KeyError) as e:
        raise RuntimeFailure(f"cannot load checkpoint {path}: {e}") from e


def cmd_infer(args):
    cfg, model = load_model(args.ckpt)
    theta = cfg.model.theta if args.theta is None else args.theta
    if not 0.0 <= theta <= 1.0:
        raise UsageError(f"--theta {theta} outside [0, 1]")
    try:
        vol = load_volume(args.input)
    except FileNotFoundError as e:
        raise UsageError(f"input volume not found: {args.input}") from e
    except FormatError as e:
        raise RuntimeFailure(str(e)) from e
    norm, flat = normalize_intensity(vol)
    if flat:
        log.warning("input volume is constant; normalized to zeros")
    try:
        res = model.forward(norm.voxels.astype(np.float64))
    except (ValueError, LayoutError) as e:
        raise RuntimeFailure(
            f"volume dims {vol.dims} incompatible with checkpoint "
            f"(levels={cfg.model.levels}, layout={cfg.model.layout}, "
            f"stem weights {model.params['stem.w'].data.shape}): {e}") from e
    mask = binarize(res.prob, theta)
    try:
        save_mask(MaskVolume(mask.labels, vol.spacing), args.out)
    except OSError as e:
        raise RuntimeFailure(str(e)) from e
    if args.emit_tokens:
        Path(args.emit_tokens).write_text(tokens_csv(res.sparse))
    print(f"wrote mask {vol.dims} with {int(mask.labels.sum())} foreground voxels")


def tokens_csv(sparse) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "pool_index", "level", "d", "h", "w", "code", "score"])
    for r, (i, lvl, c, code, s) in enumerate(zip(sparse.indices, sparse.levels, sparse.coords,
                                                  sparse.codes, sparse.scores)):
        w.writerow([r, int(i), int(lvl), *map(int, c), int(code), repr(float(s))])
    return buf.getvalue()


def format_value(v):
    return "undefined" if v is None else repr(float(v))


def report_text(per_case, names, agg, skipped, failed, set_util=None) -> str:
    lines = ["# per-case"]
    for name, rep in zip(names, per_case):
        lines += [f"{name}.{k}={format_value(getattr(rep, k))}" for k in ob.METRIC_KEYS]
    lines.append("# aggregate")
    lines += [f"aggregate.{k}={format_value(getattr(agg, k))}" for k in ob.METRIC_KEYS]
    lines += [f"undefined_count.{k}={skipped[k]}" for k in ob.METRIC_KEYS if skipped[k]]
    if set_util is not None:
        lines.append(f"dataset.codebook_utilization={format_value(set_util)}")
    lines.append(f"cases={len(per_case)}")
    lines += [f"skipped_case={name}" for name, _ in failed]
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    cfg, model = load_model(args.ckpt)
    entries = read_index(args.data)
    cases, failed = load_cases(args.data, entries)
    if not cases:
        raise RuntimeFailure("no readable cases")
    theta = cfg.model.theta if args.theta is None else args.theta
    agg, per_case, skipped, set_util = evaluate(model, cases, theta, cfg.model.boundary_radius)
    Path(args.out).write_text(
        report_text(per_case, [c.name for c in cases], agg, skipped, failed, set_util))
    for k in ob.METRIC_KEYS:
        print(f"{k}={format_value(getattr(agg, k))}")
    if failed:
        raise RuntimeFailure("skipped unreadable cases: " + ", ".join(n for n, _ in failed))


AXIS_KEYS = {"tokens": "k", "codebook": "codebook_size", "strategy": "strategy"}


def parse_axis_values(axis, text, n_tokens):
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    if axis == "strategy":
        bad = [v for v in values if v not in STRATEGIES]
        if bad:
            raise UsageError(f"unknown strategy {bad[0]!r}; choose from {', '.join(STRATEGIES)}")
        return values
    try:
        nums = [int(v) for v in values]
    except ValueError as e:
        raise UsageError(f"--values for {axis} must be integers") from e
    if axis == "tokens" and any(not 1 <= v <= n_tokens for v in nums):
        raise UsageError(f"token counts must lie in [1, {n_tokens}]")
    if axis == "codebook" and min(nums) < 2:
        raise UsageError("codebook sizes must be >= 2")
    return [str(v) for v in nums]


def run_ablation(cfg, axis, values, train_set, eval_set):
    """One train + evaluate per value under the shared seed; returns CSV rows."""
    rows = []
    for value in values:
        run_cfg = apply_overrides(cfg, {AXIS_KEYS[axis]: value}).validate()
        model, _, _ = train(run_cfg, train_set, eval_set)
        agg, _, _, util = evaluate(model, eval_set, run_cfg.model.theta,
                                   run_cfg.model.boundary_radius)
        rows.append({"value": value, "dice": agg.dice, "iou": agg.iou, "hd95": agg.hd95,
                     "time_ms": agg.time_ms, "util": util,
                     "boundary_ratio": agg.boundary_token_ratio})
        log.info("%s=%s dice=%s", axis, value, agg.dice)
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATE_COLUMNS)
    for r in rows:
        w.writerow([r["value"]] + [format_value(r[c]) for c in ABLATE_COLUMNS[1:]])
    return buf.getvalue()


def cmd_ablate(args):
    extra = {} if args.epochs is None else {"max_epochs": str(args.epochs),
                                            "patience": str(min(args.epochs, 30))}
    cfg = resolve_config(args, extra)
    values = parse_axis_values(args.axis, args.values, cfg.model.n_tokens)
    inputs = dataset_files(args.data)
    out = Path(args.out)
    out_dir(out.parent)
    write_manifest(out.with_suffix(".manifest.txt"), f"ablate {args.axis}={args.values}", cfg,
                   cfg.seed, inputs, {"sweep": out})
    train_set, eval_set = split_cases(args.data)
    try:
        rows = run_ablation(cfg, args.axis, values, train_set, eval_set)
    except TrainingAborted as e:
        raise RuntimeFailure(str(e)) from e
    except (ConfigError, LayoutError) as e:
        raise UsageError(str(e)) from e
    out.write_text(ablation_csv(rows))
    print(ablation_csv(rows), end="")


# -- parser -------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags(suppress):
    """Global flags; the per-command copy must not clobber values given earlier."""
    g = _Parser(add_help=False)
    unset = argparse.SUPPRESS if suppress else None
    g.add_argument("--seed", type=int, default=unset, help="global random seed")
    g.add_argument("--config", default=unset, help="flat key = value config file")
    g.add_argument("--verbose", "-v", action="store_true",
                   default=argparse.SUPPRESS if suppress else False, help="log progress")
    return g


def build_parser():
    common = _global_flags(suppress=True)
    p = _Parser(prog="tokenseg", description="Sparse-token 3D segmentation on phantoms.",
                parents=[_global_flags(suppress=False)])
    p.add_argument("--version", action="version", version=f"tokenseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, required=True)
    ph.add_argument("--spec", help="phantom spec file (keys: shape, noise, dims)")
    ph.add_argument("--dims", default="32,32,32")
    ph.add_argument("--shape", choices=("random", "sphere"), default="random")
    ph.add_argument("--noise", type=float, default=0.1)
    ph.add_argument("--val-count", type=int, default=0,
                    help="mark the last n cases as validation")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", parents=[common], help="segment one volume")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--in", dest="input", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--theta", type=float)
    inf.add_argument("--emit-tokens", metavar="CSV")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--theta", type=float)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", parents=[common], help="sweep one axis")
    ab.add_argument("--axis", required=True, choices=tuple(AXIS_KEYS))
    ab.add_argument("--values", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"tokenseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        args.func(args)
    except UsageError as e:
        print(f"tokenseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as e:
        print(f"tokenseg: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
