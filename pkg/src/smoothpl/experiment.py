"""Training runs, multi-fold benchmarks, comparisons, calibration and sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data as D
from . import diffcore as dc
from .diffcore import InputError, ModelParams, OptimState, TrainingFault
from .losses import (
    CalibrationError,
    EquilibriumEstimate,
    LossConfig,
    Variant,
    calibrate_lambda_u,
    factor_loss,
    lambda_phi_bound,
    pseudo_labels,
    supervised_from_logp,
    unsupervised_from_logp,
)
from .metrics import (
    ConfusionMatrix,
    GainSummary,
    WilcoxonOutcome,
    collapsed_classes,
    confusion,
    error_rate,
    paired_gain,
    pseudo_label_stats,
    wilcoxon_one_sided,
)

SWEEP_AXES = ("tau", "mu", "beta", "train_seed", "n_labels", "keep_fraction")


class PersistError(RuntimeError):
    """A stored artifact could not be written or parsed."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    n: int = 2000
    n_classes: int = 10
    spread: float = 0.22
    noise: float = 0.1
    seed: int = 0

    def build(self) -> D.Dataset:
        if self.kind == "blobs":
            return D.gen_blobs(self.n, self.n_classes, self.spread, self.seed)
        if self.kind == "moons":
            return D.gen_two_moons(self.n, self.noise, self.seed)
        raise InputError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class FoldRecipe:
    """How to sample the labeled set; ``keep_fraction`` < 1 adds class imbalance."""

    protocol: str = "balanced"
    n_labels: int = 40
    per_class: int = 4
    fold_seed: int = 0
    test_fraction: float = D.DEFAULT_TEST_FRACTION
    keep_fraction: float = 1.0
    imbalance_class: int | None = None

    def build(self, ds: D.Dataset) -> D.FoldSpec:
        if self.protocol == "balanced":
            fold = D.sample_fold_balanced(ds, self.per_class, self.fold_seed, self.test_fraction)
        elif self.protocol == "random":
            fold = D.sample_fold_random(ds, self.n_labels, self.fold_seed, self.test_fraction)
        else:
            raise InputError(f"unknown fold protocol {self.protocol!r}")
        if self.keep_fraction < 1.0:
            fold = D.apply_imbalance(fold, ds, self.fold_seed, self.keep_fraction, self.imbalance_class)
        return fold


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.03
    beta: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    schedule: str = "cosine"


@dataclass(frozen=True)
class AugmentConfig:
    weak_std: float = 0.05
    strong_std: float = 0.10
    max_angle_deg: float = 10.0
    scale_range: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    fold: FoldRecipe = field(default_factory=FoldRecipe)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    batch_size: int = 8
    ratio: int = 7
    steps: int = 20_000
    eval_interval: int = 500
    train_seed: int = 2046
    eval_source: str = "ema"
    record_trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.steps < 1 or self.eval_interval < 1:
            raise InputError("steps and eval_interval must be positive")
        if self.batch_size < 1 or self.ratio < 1:
            raise InputError("batch_size and ratio must be at least 1")
        if self.eval_source not in ("ema", "raw"):
            raise InputError("eval_source must be 'ema' or 'raw'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        sub = {
            "dataset": DatasetSpec,
            "fold": FoldRecipe,
            "optim": OptimConfig,
            "augment": AugmentConfig,
        }
        for key, kind in sub.items():
            if key in d:
                extra = set(d[key]) - {f.name for f in fields(kind)}
                if extra:
                    raise InputError(f"unknown keys in {key}: {sorted(extra)}")
                d[key] = kind(**d[key])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()[:16]


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    step: int
    test_error: float
    coverage: float
    purity: float | None
    mean_weight: float
    accepted_digest: str
    collapsed: tuple[int, ...]
    loss_sup: float
    loss_unsup: float
    loss_phi: float

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        return cls(**{**d, "collapsed": tuple(d["collapsed"])})


@dataclass(frozen=True)
class RunResult:
    config_hash: str
    config: dict
    fold_digest: str
    checkpoints: tuple[Checkpoint, ...]
    final_confusion: ConfusionMatrix
    trace: dict | None = None
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def last_error(self) -> float:
        """Headline metric: the error of the last checkpoint."""
        return self.checkpoints[-1].test_error

    @property
    def best_error(self) -> float:
        return min(c.test_error for c in self.checkpoints)

    @property
    def best_step(self) -> int:
        return min(self.checkpoints, key=lambda c: (c.test_error, c.step)).step

    @property
    def error_series(self) -> list[float]:
        return [c.test_error for c in self.checkpoints]

    def to_dict(self) -> dict:
        # wall clock is kept out so identical runs serialize identically
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "fold_digest": self.fold_digest,
            "checkpoints": [asdict(c) | {"collapsed": list(c.collapsed)} for c in self.checkpoints],
            "final_confusion": self.final_confusion.to_list(),
            "last_error": self.last_error,
            "best_error": self.best_error,
            "best_step": self.best_step,
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(
            config_hash=d["config_hash"],
            config=d["config"],
            fold_digest=d["fold_digest"],
            checkpoints=tuple(Checkpoint.from_dict(c) for c in d["checkpoints"]),
            final_confusion=ConfusionMatrix(np.asarray(d["final_confusion"], dtype=np.int64)),
            trace=d.get("trace"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def fold_digest(fold: D.FoldSpec) -> str:
    return hashlib.sha256(fold.to_json().encode()).hexdigest()[:16]


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _step_losses(params: ModelParams, batch: D.Batch, cfg: LossConfig):
    """Build the step loss on a fresh tape; returns (tape, root, components)."""
    tape = dc.Tape()
    sup = supervised_from_logp(dc.log_softmax(dc.mlp_forward(params, batch.labeled_x, tape)), batch.labeled_y)
    total = sup
    comps = {"sup": float(sup.value), "unsup": 0.0, "phi": 0.0, "weight": 0.0, "ce_acc": math.nan}
    if len(batch.unlabeled_idx) == 0:
        return tape, total, comps
    # pseudo-labels come from the current raw parameters with no gradient path
    pl = pseudo_labels(_probs(dc.mlp_forward(params, batch.weak)), cfg)
    comps["weight"] = float(pl.weight.mean())
    target_x = batch.strong if cfg.variant.two_view else batch.weak
    live_weak = None
    if cfg.lambda_u > 0:
        logits_t = dc.mlp_forward(params, target_x, tape)
        logp_t = dc.log_softmax(logits_t)
        unsup = unsupervised_from_logp(logp_t, pl, cfg)
        total = dc.add(total, dc.mul(unsup, cfg.lambda_u))
        comps["unsup"] = float(dc.value_of(unsup))
        picked = dc.value_of(logp_t)[np.arange(len(pl)), pl.classes]
        if not cfg.variant.two_view:
            live_weak = logits_t
    else:
        picked = np.log(_probs(dc.mlp_forward(params, target_x))[np.arange(len(pl)), pl.classes])
        comps["unsup"] = float(np.sum(-pl.weight * picked) / len(pl))
    if pl.accepted.any():
        comps["ce_acc"] = float(-picked[pl.accepted].mean())
    if cfg.lambda_phi > 0:
        if live_weak is None:
            live_weak = dc.mlp_forward(params, batch.weak, tape)
        phi = factor_loss(dc.softmax(live_weak), pl, cfg)
        total = dc.add(total, phi)
        comps["phi"] = float(dc.value_of(phi))
    return tape, total, comps


def _evaluate(params_eval, params_raw, ds, fold, cfg: RunConfig, step, sums, count) -> tuple[Checkpoint, ConfusionMatrix]:
    test = np.asarray(fold.test, dtype=int)
    if len(test) == 0:
        raise InputError("the fold has no test points")
    preds = np.argmax(dc.mlp_forward(params_eval, ds.points[test]), axis=1)
    cm = confusion(preds, ds.labels[test], ds.n_classes)
    unl = np.asarray(fold.unlabeled, dtype=int)
    if len(unl):
        probs = _probs(dc.mlp_forward(params_raw, ds.points[unl]))
        stats = pseudo_label_stats(probs, ds.labels[unl], cfg.loss)
        accepted = pseudo_labels(probs, cfg.loss).accepted
        cov, pur, mw = stats.coverage, stats.purity, stats.mean_weight
    else:
        accepted = np.zeros(0, dtype=bool)
        cov, pur, mw = 0.0, None, 0.0
    ck = Checkpoint(
        step=step,
        test_error=float(error_rate(cm)),
        coverage=cov,
        purity=pur,
        mean_weight=mw,
        accepted_digest=_digest(np.packbits(accepted)),
        collapsed=tuple(sorted(collapsed_classes(cm))),
        loss_sup=sums["sup"] / count,
        loss_unsup=sums["unsup"] / count,
        loss_phi=sums["phi"] / count,
    )
    return ck, cm


def run_training(cfg: RunConfig, fold: D.FoldSpec | None = None, stop_at: int | None = None) -> RunResult:
    """Train one model and evaluate it on the test split at every checkpoint.

    ``stop_at`` ends the run early (the learning-rate schedule still spans
    ``cfg.steps``). A non-finite loss raises ``TrainingFault`` whose detail
    holds the step, the batch fingerprint and the checkpoints so far.
    """
    started = time.perf_counter()
    ds = cfg.dataset.build()
    if fold is None:
        fold = cfg.fold.build(ds)
    last = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    streams = D.train_streams(cfg.train_seed)
    params = ModelParams.init([ds.dim, *cfg.hidden, ds.n_classes], streams["init"], cfg.activation)
    o = cfg.optim
    state = OptimState.fresh(
        params,
        lr=o.lr,
        beta=o.beta,
        weight_decay=o.weight_decay,
        ema_decay=o.ema_decay,
        total_steps=cfg.steps,
        schedule=o.schedule,
    )
    train_idx = np.asarray(fold.labeled + fold.unlabeled, dtype=int)
    a = cfg.augment
    aug = D.Augmenter.for_points(
        ds.points[train_idx],
        weak_std=a.weak_std,
        strong_std=a.strong_std,
        max_angle_deg=a.max_angle_deg,
        scale_range=a.scale_range,
    )
    batches = D.batch_iterator(fold, ds, cfg.batch_size, cfg.ratio, cfg.train_seed, aug)
    keys = ("sup", "unsup", "phi")
    sums = dict.fromkeys(keys, 0.0)
    count = 0
    trace = {k: [] for k in ("sup", "unsup", "phi", "weight", "ce_acc")} if cfg.record_trace else None
    checkpoints: list[Checkpoint] = []
    cm = None
    for step in range(1, last + 1):
        batch = next(batches)
        tape, root, comps = _step_losses(params, batch, cfg.loss)
        if not math.isfinite(float(root.value)):
            raise TrainingFault(
                f"non-finite loss at step {step}",
                step,
                {
                    "batch_fingerprint": _digest(np.concatenate([batch.labeled_idx, batch.unlabeled_idx])),
                    "components": comps,
                    "checkpoints": [asdict(c) for c in checkpoints],
                },
            )
        grads = dc.backward(tape, root)
        params, state = dc.sgd_step(params, grads, state)
        for k in keys:
            sums[k] += comps[k]
        count += 1
        if trace is not None:
            for k in trace:
                trace[k].append(None if math.isnan(comps[k]) else comps[k])
        if step % cfg.eval_interval == 0 or step == last:
            source = state.ema if cfg.eval_source == "ema" else params
            ck, cm = _evaluate(source, params, ds, fold, cfg, step, sums, count)
            checkpoints.append(ck)
            sums = dict.fromkeys(keys, 0.0)
            count = 0
    return RunResult(
        config_hash=cfg.digest(),
        config=cfg.to_dict(),
        fold_digest=fold_digest(fold),
        checkpoints=tuple(checkpoints),
        final_confusion=cm,
        trace=trace,
        wall_clock=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# Benchmarks and comparisons
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    status: str  # "ok" or "aborted"
    last_error: float | None
    best_error: float | None
    best_step: int | None
    collapsed: tuple[int, ...] = ()
    abort_step: int | None = None
    message: str = ""

    @classmethod
    def from_result(cls, r: RunResult) -> "Cell":
        return cls("ok", r.last_error, r.best_error, r.best_step, r.checkpoints[-1].collapsed)

    @classmethod
    def from_dict(cls, d: dict) -> "Cell":
        return cls(**{**d, "collapsed": tuple(d["collapsed"])})


@dataclass(frozen=True)
class BenchmarkTable:
    """Rows are folds, columns are variants; cells hold last-checkpoint errors."""

    folds: tuple[str, ...]
    variants: tuple[str, ...]
    cells: dict  # (fold, variant) -> Cell

    def column(self, variant: str) -> list[float | None]:
        if variant not in self.variants:
            raise InputError(f"unknown column {variant!r}")
        return [self.cells[(f, variant)].last_error for f in self.folds]

    def summary(self) -> dict[str, dict]:
        out = {}
        for v in self.variants:
            vals = np.array([x for x in self.column(v) if x is not None], dtype=float)
            if len(vals) == 0:
                out[v] = {"n": 0}
                continue
            out[v] = {
                "n": int(len(vals)),
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if len(vals) > 1 else None,
                "max": float(vals.max()),
                "min": float(vals.min()),
                "range": float(vals.max() - vals.min()),
                "median": float(np.median(vals)),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "folds": list(self.folds),
            "variants": list(self.variants),
            "cells": [
                {"fold": f, "variant": v, **asdict(self.cells[(f, v)]), "collapsed": list(self.cells[(f, v)].collapsed)}
                for f in self.folds
                for v in self.variants
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkTable":
        cells = {}
        for c in d["cells"]:
            c = dict(c)
            key = (c.pop("fold"), c.pop("variant"))
            cells[key] = Cell.from_dict(c)
        return cls(tuple(d["folds"]), tuple(d["variants"]), cells)

    def to_csv(self, scale: float = 100.0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", *self.variants])
        for f in self.folds:
            row = [f]
            for v in self.variants:
                c = self.cells[(f, v)]
                row.append(_fmt(c.last_error * scale) if c.last_error is not None else f"aborted@{c.abort_step}")
            w.writerow(row)
        summ = self.summary()
        for label in ("mean±std", "max", "min", "range"):
            row = [label]
            for v in self.variants:
                s = summ[v]
                if s["n"] == 0:
                    row.append("")
                elif label == "mean±std":
                    std = "" if s["std"] is None else _fmt(s["std"] * scale)
                    row.append(f"{_fmt(s['mean'] * scale)}±{std}")
                else:
                    row.append(_fmt(s[label] * scale))
            w.writerow(row)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _run_cell(args):
    key, cfg, fold = args
    try:
        return key, Cell.from_result(run_training(cfg, fold))
    except TrainingFault as exc:
        return key, Cell("aborted", None, None, None, abort_step=exc.step, message=str(exc))
    except Exception as exc:  # isolate the failure to this cell
        return key, Cell("aborted", None, None, None, message=f"{type(exc).__name__}: {exc}")


def run_benchmark(
    base: RunConfig,
    folds: Sequence[D.FoldSpec | FoldRecipe],
    variants: dict[str, RunConfig | LossConfig] | Sequence[LossConfig],
    jobs: int = 1,
) -> BenchmarkTable:
    """Train every (fold, variant) pair; failures are recorded per cell.

    ``variants`` maps a column name to a ``LossConfig`` (replacing the base
    loss) or to a full ``RunConfig``. A plain sequence of loss configs is
    named by variant.
    """
    if not folds:
        raise InputError("need at least one fold")
    if not isinstance(variants, dict):
        variants = {_variant_name(lc): lc for lc in variants}
    if not variants:
        raise InputError("need at least one variant")
    jobs_list, fold_names = [], []
    for k, fold in enumerate(folds):
        if isinstance(fold, FoldRecipe):
            name, spec, recipe = f"seed{fold.fold_seed}", None, fold
        else:
            name, spec, recipe = f"seed{fold.fold_seed}", fold, base.fold
        if name in fold_names:
            name = f"{name}-{k}"
        fold_names.append(name)
        for vname, vcfg in variants.items():
            cfg = vcfg if isinstance(vcfg, RunConfig) else replace(base, loss=vcfg)
            cfg = replace(cfg, fold=recipe)
            jobs_list.append(((name, vname), cfg, spec))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_run_cell, jobs_list))
    else:
        results = dict(map(_run_cell, jobs_list))
    return BenchmarkTable(tuple(fold_names), tuple(variants), results)


def _variant_name(lc: LossConfig) -> str:
    return lc.variant.value if lc.lambda_u > 0 else "supervised"


@dataclass(frozen=True)
class ComparisonReport:
    baseline_name: str
    method_name: str
    folds: tuple[str, ...]
    baseline: tuple[float, ...]
    method: tuple[float, ...]
    gains: tuple[float, ...]
    summary: GainSummary
    wilcoxon: WilcoxonOutcome

    def to_dict(self) -> dict:
        return {
            "baseline_name": self.baseline_name,
            "method_name": self.method_name,
            "folds": list(self.folds),
            "baseline": list(self.baseline),
            "method": list(self.method),
            "gains": list(self.gains),
            "summary": self.summary.to_dict(),
            "wilcoxon": self.wilcoxon.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(
            d["baseline_name"],
            d["method_name"],
            tuple(d["folds"]),
            tuple(d["baseline"]),
            tuple(d["method"]),
            tuple(d["gains"]),
            GainSummary(**d["summary"]),
            WilcoxonOutcome(**d["wilcoxon"]),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "baseline", "method", "gain"])
        for row in zip(self.folds, self.baseline, self.method, self.gains):
            w.writerow([row[0], *(_fmt(x) for x in row[1:])])
        s = self.summary
        std = "" if s.std is None else _fmt(s.std)
        w.writerow(
            [
                "mean±std",
                _fmt(float(np.mean(self.baseline))),
                _fmt(float(np.mean(self.method))),
                f"{_fmt(s.mean)}±{std}",
            ]
        )
        w.writerow(["p_value", "", "", repr(self.wilcoxon.p_value)])
        return buf.getvalue()


def compare_vectors(
    baseline: Sequence[float],
    method: Sequence[float],
    folds: Sequence[str] | None = None,
    names: tuple[str, str] = ("baseline", "method"),
) -> ComparisonReport:
    """Paired gains ``baseline - method`` and a one-sided test that they are positive."""
    b = np.asarray(baseline, dtype=float)
    m = np.asarray(method, dtype=float)
    if b.shape != m.shape:
        raise InputError("baseline and method must be aligned")
    folds = tuple(folds) if folds is not None else tuple(str(i) for i in range(len(b)))
    if len(folds) != len(b):
        raise InputError("fold labels must be aligned with the errors")
    gains = b - m
    return ComparisonReport(
        names[0],
        names[1],
        folds,
        tuple(b.tolist()),
        tuple(m.tolist()),
        tuple(gains.tolist()),
        paired_gain(b, m),
        wilcoxon_one_sided(gains, "greater"),
    )


def compare_methods(table: BenchmarkTable, baseline: str, method: str, scale: float = 100.0) -> ComparisonReport:
    """Compare two columns over the folds where both runs finished (errors scaled to percent)."""
    b, m = table.column(baseline), table.column(method)
    rows = [(f, x, y) for f, x, y in zip(table.folds, b, m) if x is not None and y is not None]
    if not rows:
        raise InputError("no fold has results for both columns")
    folds, bs, ms = zip(*rows)
    return compare_vectors(
        [x * scale for x in bs], [y * scale for y in ms], folds, (baseline, method)
    )


def compare_results(
    baseline: Sequence[RunResult], method: Sequence[RunResult], scale: float = 100.0
) -> ComparisonReport:
    """Compare two lists of runs matched by fold digest."""
    bmap = {r.fold_digest: r for r in baseline}
    mmap = {r.fold_digest: r for r in method}
    if set(bmap) != set(mmap) or len(bmap) != len(baseline) or len(mmap) != len(method):
        raise InputError("baseline and method runs must cover the same folds")
    keys = [r.fold_digest for r in baseline]
    return compare_vectors(
        [bmap[k].last_error * scale for k in keys],
        [mmap[k].last_error * scale for k in keys],
        [f"seed{bmap[k].config['fold']['fold_seed']}" for k in keys],
    )


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    loss: LossConfig
    estimate: EquilibriumEstimate
    lambda_phi_bound: float

    def to_dict(self) -> dict:
        e = self.estimate
        return {
            "loss": self.loss.to_dict(),
            "estimate": {"ell_fm": e.ell_fm, "ell_sfm": e.ell_sfm, "ell_phi": e.ell_phi, "window": list(e.window)},
            "lambda_phi_bound": self.lambda_phi_bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        e = d["estimate"]
        est = EquilibriumEstimate(e["ell_fm"], e["ell_sfm"], e["ell_phi"], tuple(e["window"]))
        return cls(LossConfig.from_dict(d["loss"]), est, d["lambda_phi_bound"])


def _window_mean(values: list, lo: int, hi: int) -> float:
    vals = [v for v in values[lo:hi] if v is not None]
    if not vals:
        raise CalibrationError("no pseudo-label fired inside the calibration window")
    return float(np.mean(vals))


def calibrate(
    base: RunConfig,
    window: tuple[float, float] = (0.05, 0.10),
    lambda_u_fm: float = 1.0,
    fold: D.FoldSpec | None = None,
) -> CalibrationResult:
    """Estimate equilibrium losses from FM and SFM pilots and derive ``lambda_u``.

    Both pilots train with ``lambda_u = lambda_u_fm`` up to the end of the
    window (given as fractions of ``base.steps``) and average per-step
    traces inside it.
    """
    lo = int(math.floor(window[0] * base.steps))
    hi = int(math.ceil(window[1] * base.steps))
    if not 0 <= lo < hi <= base.steps:
        raise InputError("calibration window must be a nonempty part of the run")
    pilot = replace(base, record_trace=True, eval_interval=max(hi, 1))
    fm = replace(pilot, loss=replace(base.loss, variant=Variant.FM, lambda_u=lambda_u_fm, lambda_phi=0.0))
    sfm = replace(pilot, loss=replace(base.loss, variant=Variant.SFM, lambda_u=lambda_u_fm, lambda_phi=0.0))
    tr_fm = run_training(fm, fold, stop_at=hi).trace
    tr_sfm = run_training(sfm, fold, stop_at=hi).trace
    est = EquilibriumEstimate(
        ell_fm=_window_mean(tr_fm["unsup"], lo, hi),
        ell_sfm=_window_mean(tr_sfm["ce_acc"], lo, hi),
        ell_phi=_window_mean(tr_sfm["weight"], lo, hi),
        window=(lo, hi),
    )
    lam = calibrate_lambda_u(est, lambda_u_fm)
    loss = replace(base.loss, variant=Variant.SFM, lambda_u=lam)
    return CalibrationResult(loss, est, lambda_phi_bound(loss.tau, lam, est.ell_sfm))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "tau":
        return replace(cfg, loss=replace(cfg.loss, tau=float(value)))
    if axis == "mu":
        return replace(cfg, loss=replace(cfg.loss, mu=float(value)))
    if axis == "beta":
        return replace(cfg, optim=replace(cfg.optim, beta=float(value)))
    if axis == "train_seed":
        return replace(cfg, train_seed=int(value))
    if axis == "n_labels":
        key = "per_class" if cfg.fold.protocol == "balanced" else "n_labels"
        return replace(cfg, fold=replace(cfg.fold, **{key: int(value)}))
    if axis == "keep_fraction":
        return replace(cfg, fold=replace(cfg.fold, keep_fraction=float(value)))
    raise InputError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


@dataclass(frozen=True)
class SweepRow:
    value: float
    last_error: float | None
    best_error: float | None
    best_step: int | None
    collapsed: tuple[int, ...]
    status: str = "ok"


@dataclass(frozen=True)
class SweepTable:
    axis: str
    rows: tuple[SweepRow, ...]

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": [asdict(r) | {"collapsed": list(r.collapsed)} for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepTable":
        return cls(d["axis"], tuple(SweepRow(**{**r, "collapsed": tuple(r["collapsed"])}) for r in d["rows"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, "last_error", "best_error", "best_step", "collapsed", "status"])
        for r in self.rows:
            w.writerow(
                [
                    r.value,
                    "" if r.last_error is None else r.last_error,
                    "" if r.best_error is None else r.best_error,
                    "" if r.best_step is None else r.best_step,
                    " ".join(map(str, r.collapsed)),
                    r.status,
                ]
            )
        return buf.getvalue()

    def series_csv(self) -> str:
        """Plot-ready ``x,y`` pairs (axis value, last error)."""
        lines = ["x,y"] + [f"{r.value},{r.last_error}" for r in self.rows if r.last_error is not None]
        return "\n".join(lines) + "\n"


def sweep(base: RunConfig, axis: str, values: Sequence, jobs: int = 1, fold: D.FoldSpec | None = None) -> SweepTable:
    """One run per value along ``axis``, everything else fixed."""
    if axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise InputError("sweep needs at least one value")
    # an explicit fold stays fixed unless the axis changes the fold itself
    fixed = fold if axis not in ("n_labels", "keep_fraction") else None
    jobs_list = [((i, v), with_axis(base, axis, v), fixed) for i, v in enumerate(values)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = dict(pool.map(_run_cell, jobs_list))
    else:
        cells = dict(map(_run_cell, jobs_list))
    rows = []
    for i, v in enumerate(values):
        c = cells[(i, v)]
        rows.append(SweepRow(float(v), c.last_error, c.best_error, c.best_step, c.collapsed, c.status))
    return SweepTable(axis, tuple(rows))


def incremental_label_errors(
    base: RunConfig, n_values: Sequence[int], fold_seed: int, jobs: int = 1
) -> SweepTable:
    """Errors along nested random folds of growing labeled size."""
    cfg = replace(base, fold=replace(base.fold, protocol="random", fold_seed=fold_seed))
    return sweep(cfg, "n_labels", n_values, jobs)


def worsening_fraction(errors: Sequence[float]) -> float:
    """Fraction of consecutive label increments after which the error went up."""
    e = [x for x in errors]
    if len(e) < 2:
        raise InputError("need at least two error values")
    worse = sum(1 for a, b in zip(e, e[1:]) if b > a)
    return worse / (len(e) - 1)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_KINDS: dict[str, Any] = {
    "run_result": RunResult,
    "benchmark": BenchmarkTable,
    "comparison": ComparisonReport,
    "sweep": SweepTable,
    "calibration": CalibrationResult,
    "fold": D.FoldSpec,
    "config": RunConfig,
}


def _kind_of(obj) -> str:
    for kind, cls in _KINDS.items():
        if isinstance(obj, cls):
            return kind
    raise InputError(f"cannot persist {type(obj).__name__}")


def dumps(obj) -> str:
    kind = _kind_of(obj)
    return json.dumps({"kind": kind, "data": obj.to_dict()}, sort_keys=True, indent=1) + "\n"


def loads(text: str, source: str = "<string>"):
    try:
        doc = json.loads(text)
        cls = _KINDS[doc["kind"]]
        return cls.from_dict(doc["data"])
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise PersistError(f"{source}: cannot parse stored artifact ({type(exc).__name__}: {exc})") from exc


def persist(obj, path) -> Path:
    path = Path(path)
    text = dumps(obj)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise PersistError(f"{path}: {exc}") from exc
    return path


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise PersistError(f"{path}: {exc}") from exc
    return loads(text, str(path))
