"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import experiment as X
from .diffcore import InputError, TrainingFault
from .losses import CalibrationError, LossConfig

OUTDIR_ENV = "SMOOTHPL_OUTDIR"
DEFAULT_OUTDIR = "smoothpl-out"
VARIANT_CHOICES = ("pl", "spl", "fm", "sfm", "supervised")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(cfg_dict: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` pairs to a nested config dict, rejecting unknown keys."""
    out = json.loads(json.dumps(cfg_dict))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node or not isinstance(node[p], dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(args) -> X.RunConfig:
    base = X.RunConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except ValueError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        base = apply_overrides(base, _flatten(file_cfg))
    base = apply_overrides(base, args.set or [])
    if args.fold_seed is not None:
        base["fold"]["fold_seed"] = args.fold_seed
    if args.train_seed is not None:
        base["train_seed"] = args.train_seed
    try:
        return X.RunConfig.from_dict(base)
    except (InputError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _flatten(d: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k != "meta":
            out.extend(_flatten(v, key + "."))
        else:
            out.append(f"{key}={json.dumps(v)}")
    return out


def variant_loss(cfg: X.RunConfig, name: str) -> LossConfig:
    name = name.lower()
    if name not in VARIANT_CHOICES:
        raise UsageError(f"unknown variant {name!r}; choose from {VARIANT_CHOICES}")
    if name == "supervised":
        return replace(cfg.loss, lambda_u=0.0, lambda_phi=0.0)
    return replace(cfg.loss, variant=name.upper())


def outdir(args) -> Path:
    path = Path(args.out or os.environ.get(OUTDIR_ENV) or DEFAULT_OUTDIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_fold(path) -> D.FoldSpec:
    try:
        return D.FoldSpec.from_json(Path(path).read_text())
    except OSError as exc:
        raise X.PersistError(f"{path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise X.PersistError(f"{path}: not a fold file ({exc})") from exc


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    print(path)
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_sample_folds(args) -> int:
    cfg = load_config(args)
    ds = cfg.dataset.build()
    start = cfg.fold.fold_seed
    recipe = cfg.fold
    if args.protocol:
        recipe = replace(recipe, protocol=args.protocol)
    if args.n_labels is not None:
        recipe = replace(recipe, n_labels=args.n_labels)
    if args.per_class is not None:
        recipe = replace(recipe, per_class=args.per_class)
    if args.keep_fraction is not None:
        recipe = replace(recipe, keep_fraction=args.keep_fraction)
    out = outdir(args)
    for seed in range(start, start + args.folds):
        fold = replace(recipe, fold_seed=seed).build(ds)
        size = len(fold.labeled)
        _write(out / f"fold-{fold.protocol}-n{size}-seed{seed}.json", fold.to_json())
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    cfg = replace(cfg, loss=variant_loss(cfg, args.variant))
    fold = read_fold(args.fold) if args.fold else None
    result = X.run_training(cfg, fold)
    seed = fold.fold_seed if fold else cfg.fold.fold_seed
    path = outdir(args) / f"run-{args.variant.lower()}-fold{seed}-train{cfg.train_seed}.json"
    X.persist(result, path)
    print(path)
    print(f"last_error={result.last_error:.6f} best_error={result.best_error:.6f}@{result.best_step}")
    return 0


def _folds_from_args(args, cfg: X.RunConfig):
    if args.fold_files:
        return [read_fold(p) for p in args.fold_files]
    start = cfg.fold.fold_seed
    return [replace(cfg.fold, fold_seed=s) for s in range(start, start + args.folds)]


def cmd_benchmark(args) -> int:
    cfg = load_config(args)
    variants = {v.lower(): variant_loss(cfg, v) for v in args.variants.split(",")}
    table = X.run_benchmark(cfg, _folds_from_args(args, cfg), variants, jobs=args.jobs)
    out = outdir(args)
    X.persist(table, out / "benchmark.json")
    print(out / "benchmark.json")
    _write(out / "benchmark.csv", table.to_csv())
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    if args.variant:
        cfg = replace(cfg, loss=variant_loss(cfg, args.variant))
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    table = X.sweep(cfg, args.axis, values, jobs=args.jobs)
    out = outdir(args)
    X.persist(table, out / f"sweep-{args.axis}.json")
    print(out / f"sweep-{args.axis}.json")
    _write(out / f"sweep-{args.axis}.csv", table.to_csv())
    return 0


def cmd_compare(args) -> int:
    if args.table:
        table = X.load(args.table)
        if not isinstance(table, X.BenchmarkTable):
            raise UsageError(f"{args.table} is not a benchmark table")
        report = X.compare_methods(table, args.baseline[0], args.method[0])
    else:
        base = [X.load(p) for p in args.baseline]
        meth = [X.load(p) for p in args.method]
        if not all(isinstance(r, X.RunResult) for r in base + meth):
            raise UsageError("--baseline/--method expect run result files (or use --table)")
        report = X.compare_results(base, meth)
    text = report.to_csv()
    sys.stdout.write(text)
    print(f"p_value={report.wilcoxon.p_value!r} exact={report.wilcoxon.exact} zeros={report.wilcoxon.tie_count}")
    if args.out or os.environ.get(OUTDIR_ENV):
        out = outdir(args)
        X.persist(report, out / "comparison.json")
        (out / "comparison.csv").write_text(text)
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args)
    result = X.calibrate(cfg)
    path = outdir(args) / "calibration.json"
    X.persist(result, path)
    print(path)
    print(f"lambda_u={result.loss.lambda_u!r} lambda_phi_bound={result.lambda_phi_bound!r}")
    return 0


def cmd_export_plots(args) -> int:
    out = outdir(args)
    if args.data_dist:
        cfg = load_config(args)
        ds = cfg.dataset.build()
        lo, hi, step = (int(x) for x in args.data_dist.split(":"))
        start = cfg.fold.fold_seed
        lines = ["x,y"]
        for n in range(lo, hi + 1, step):
            devs = [
                D.class_freq_deviation(D.sample_fold_random(ds, n, s, cfg.fold.test_fraction), ds)
                for s in range(start, start + args.folds)
            ]
            lines.append(f"{n},{float(np.mean(devs))}")
        _write(out / "data_dist.csv", "\n".join(lines) + "\n")
    for path in args.inputs:
        obj = X.load(path)
        stem = Path(path).stem
        if isinstance(obj, X.SweepTable):
            _write(out / f"{stem}-series.csv", obj.series_csv())
        elif isinstance(obj, X.RunResult):
            rows = ["x,y"] + [f"{c.step},{c.test_error}" for c in obj.checkpoints]
            _write(out / f"{stem}-series.csv", "\n".join(rows) + "\n")
        elif isinstance(obj, X.BenchmarkTable):
            _write(out / f"{stem}.csv", obj.to_csv())
        else:
            raise UsageError(f"{path}: nothing to plot for a {type(obj).__name__}")
    if not args.inputs and not args.data_dist:
        raise UsageError("export-plots needs input files or --data-dist")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (a partial object is fine)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. optim.beta=0.95")
    common.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV} or ./{DEFAULT_OUTDIR})")
    common.add_argument("--fold-seed", type=int)
    common.add_argument("--train-seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="parallel runs")

    parser = _Parser(prog="smoothpl", description="Smooth pseudo-labeling experiments on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample-folds", parents=[common], help="write fold files")
    p.add_argument("--protocol", choices=("balanced", "random"))
    p.add_argument("--n-labels", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--keep-fraction", type=float)
    p.add_argument("--folds", type=int, default=1)
    p.set_defaults(func=cmd_sample_folds)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--variant", default="sfm", choices=VARIANT_CHOICES, type=str.lower)
    p.add_argument("--fold", help="fold file from sample-folds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", parents=[common], help="folds x variants table")
    p.add_argument("--variants", default="fm,sfm")
    p.add_argument("--folds", type=int, default=6)
    p.add_argument("--fold-files", nargs="+")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sweep", parents=[common], help="one-axis ablation")
    p.add_argument("--axis", required=True, choices=X.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--variant", choices=VARIANT_CHOICES, type=str.lower)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", parents=[common], help="paired gains and signed-rank test")
    p.add_argument("--baseline", nargs="+", required=True, help="run files, or a column name with --table")
    p.add_argument("--method", nargs="+", required=True)
    p.add_argument("--table", help="benchmark file")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", parents=[common], help="estimate lambda_u from pilot runs")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("export-plots", parents=[common], help="plot-ready CSV series")
    p.add_argument("inputs", nargs="*", help="sweep, run or benchmark files")
    p.add_argument("--data-dist", metavar="LO:HI:STEP", help="class-frequency deviation vs label count")
    p.add_argument("--folds", type=int, default=6)
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingFault, X.PersistError, CalibrationError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
