import json
from dataclasses import replace

import numpy as np
import pytest

from smoothpl import data as D
from smoothpl import experiment as X
from smoothpl.diffcore import InputError
from smoothpl.losses import CalibrationError, LossConfig, Variant

TINY = X.RunConfig(
    dataset=X.DatasetSpec(n=300, spread=0.15),
    fold=X.FoldRecipe(protocol="balanced", per_class=2),
    steps=60,
    eval_interval=20,
    batch_size=4,
    ratio=3,
    hidden=(8, 8),
)


@pytest.fixture(scope="module")
def tiny_result():
    return X.run_training(TINY)


class TestRunConfig:
    def test_dict_round_trip(self):
        cfg = replace(TINY, loss=LossConfig(variant=Variant.FM, tau=0.9))
        assert X.RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        d = TINY.to_dict()
        d["optim"]["nesterov"] = True
        with pytest.raises(InputError):
            X.RunConfig.from_dict(d)

    def test_defaults_follow_reference_hyperparameters(self):
        c = X.RunConfig()
        assert (c.optim.lr, c.optim.beta, c.optim.weight_decay, c.optim.ema_decay) == (0.03, 0.9, 5e-4, 0.999)
        assert (c.batch_size, c.ratio, c.steps, c.eval_interval, c.train_seed) == (8, 7, 20_000, 500, 2046)
        assert c.eval_source == "ema" and c.loss.tau == 0.95

    def test_digest_changes_with_config(self):
        assert TINY.digest() != replace(TINY, train_seed=1).digest()


class TestRunTraining:
    def test_checkpoints(self, tiny_result):
        assert [c.step for c in tiny_result.checkpoints] == [20, 40, 60]
        assert tiny_result.last_error == tiny_result.checkpoints[-1].test_error
        assert tiny_result.final_confusion.total == len(TINY.fold.build(TINY.dataset.build()).test)

    def test_deterministic(self, tiny_result):
        again = X.run_training(TINY)
        assert again == tiny_result
        assert again.to_json() == tiny_result.to_json()

    def test_stop_at(self):
        r = X.run_training(TINY, stop_at=30)
        assert [c.step for c in r.checkpoints] == [20, 30]

    def test_high_threshold_gives_no_early_coverage(self):
        cfg = replace(TINY, loss=LossConfig(variant=Variant.SPL, tau=0.999), steps=10, eval_interval=10)
        r = X.run_training(cfg)
        assert r.checkpoints[-1].coverage == pytest.approx(0.0, abs=0.01)

    def test_supervised_fits_labeled_points(self):
        cfg = replace(
            TINY,
            dataset=X.DatasetSpec(n=300, spread=0.03),
            fold=X.FoldRecipe(protocol="balanced", per_class=4),
            loss=LossConfig(variant=Variant.FM, lambda_u=0.0),
            steps=1500,
            eval_interval=1500,
            eval_source="raw",
            hidden=(16, 16),
        )
        r = X.run_training(cfg)
        assert r.last_error < 0.05

    def test_headline_is_last_not_best(self, tiny_result):
        d = tiny_result.to_dict()
        assert d["last_error"] == tiny_result.checkpoints[-1].test_error
        assert d["best_error"] == min(c.test_error for c in tiny_result.checkpoints)

    def test_trace_recorded(self):
        r = X.run_training(replace(TINY, record_trace=True), stop_at=5)
        assert len(r.trace["unsup"]) == 5

    def test_explicit_fold(self):
        ds = TINY.dataset.build()
        fold = D.sample_fold_random(ds, 25, 4)
        r = X.run_training(TINY, fold, stop_at=20)
        assert r.fold_digest == X.fold_digest(fold)

    def test_one_view_and_factor_loss_variants_run(self):
        for loss in (
            LossConfig(variant=Variant.PL),
            LossConfig(variant=Variant.SPL, mu=2.0),
            LossConfig(variant=Variant.SFM, lambda_phi=0.2),
        ):
            r = X.run_training(replace(TINY, loss=loss), stop_at=20)
            assert np.isfinite(r.last_error)

    def test_train_seed_changes_run_not_fold(self):
        a = X.run_training(TINY, stop_at=20)
        b = X.run_training(replace(TINY, train_seed=7), stop_at=20)
        assert a.fold_digest == b.fold_digest
        assert a.checkpoints != b.checkpoints


class TestBenchmark:
    def test_single_cell_equals_run(self, tiny_result):
        table = X.run_benchmark(TINY, [TINY.fold], [TINY.loss])
        assert table.column("SFM") == [tiny_result.last_error]

    def test_structure_and_summary(self):
        folds = [replace(TINY.fold, fold_seed=s) for s in range(3)]
        variants = {"fm": LossConfig(variant=Variant.FM), "sfm": LossConfig(variant=Variant.SFM)}
        table = X.run_benchmark(replace(TINY, steps=20), folds, variants)
        assert len(table.cells) == 6
        s = table.summary()
        assert set(s) == {"fm", "sfm"} and s["fm"]["n"] == 3 and s["fm"]["std"] is not None
        csv = table.to_csv()
        assert csv.splitlines()[0] == "fold,fm,sfm" and "mean±std" in csv

    def test_failed_cell_is_isolated(self):
        bad = replace(TINY, dataset=X.DatasetSpec(kind="spiral"))
        table = X.run_benchmark(TINY, [TINY.fold], {"ok": replace(TINY, steps=20), "bad": bad})
        assert table.cells[(table.folds[0], "ok")].status == "ok"
        assert table.cells[(table.folds[0], "bad")].status == "aborted"
        assert table.column("bad") == [None]

    def test_no_folds(self):
        with pytest.raises(InputError):
            X.run_benchmark(TINY, [], [TINY.loss])

    def test_parallel_matches_sequential(self):
        folds = [replace(TINY.fold, fold_seed=s) for s in range(2)]
        cfg = replace(TINY, steps=20)
        seq = X.run_benchmark(cfg, folds, [TINY.loss], jobs=1)
        par = X.run_benchmark(cfg, folds, [TINY.loss], jobs=2)
        assert seq == par


class TestCompare:
    FIX = [9.77, 7.43, 7.48, 7.36, 15.60, 8.01]
    SMOOTH = [6.25, 7.07, 5.45, 6.32, 11.44, 6.47]

    def test_identical_is_degenerate(self):
        r = X.compare_vectors(self.FIX, self.FIX)
        assert r.wilcoxon.degenerate and r.summary.mean == 0.0

    def test_table_vectors(self):
        r = X.compare_vectors(self.FIX, self.SMOOTH)
        assert r.wilcoxon.p_value == 0.015625
        assert r.summary.mean == pytest.approx(2.1083333, abs=1e-6)

    def test_sign_flip(self):
        p = X.compare_vectors(self.SMOOTH, self.FIX).wilcoxon.p_value
        # P(W+ >= 0) over all sign assignments
        assert p > 0.9 and p == 1.0

    def test_csv_layout(self):
        csv = X.compare_vectors(self.FIX, self.SMOOTH).to_csv().splitlines()
        assert csv[0] == "fold,baseline,method,gain"
        assert csv[-2].startswith("mean±std,") and csv[-1] == "p_value,,,0.015625"

    def test_misaligned(self):
        with pytest.raises(InputError):
            X.compare_vectors([1.0, 2.0], [1.0])

    def test_compare_results_matches_by_fold(self):
        folds = [replace(TINY.fold, fold_seed=s) for s in range(2)]
        runs_a = [X.run_training(replace(TINY, fold=f), stop_at=20) for f in folds]
        runs_b = [X.run_training(replace(TINY, fold=f, train_seed=3), stop_at=20) for f in folds]
        r = X.compare_results(runs_a, runs_b[::-1])
        assert r.baseline == tuple(x.last_error * 100 for x in runs_a)
        assert r.method == tuple(x.last_error * 100 for x in runs_b)


class TestCalibrate:
    def test_returns_sfm_config_and_positive_bound(self):
        cfg = replace(TINY, steps=2000, loss=LossConfig(tau=0.6))
        out = X.calibrate(cfg)
        assert out.loss.variant is Variant.SFM
        assert out.loss.lambda_u > 0 and out.lambda_phi_bound > 0
        assert out.estimate.window == (100, 200)

    def test_no_pseudo_labels_is_calibration_error(self):
        with pytest.raises(CalibrationError):
            X.calibrate(replace(TINY, steps=200, loss=LossConfig(tau=0.999)))


class TestSweep:
    def test_single_value_equals_run(self, tiny_result):
        t = X.sweep(TINY, "tau", [0.95])
        assert t.rows[0].last_error == tiny_result.last_error

    def test_rows_and_series(self):
        t = X.sweep(replace(TINY, steps=20), "beta", [0.5, 0.9])
        assert [r.value for r in t.rows] == [0.5, 0.9]
        assert t.series_csv().splitlines()[0] == "x,y" and len(t.series_csv().splitlines()) == 3

    @pytest.mark.parametrize("axis, value", [("mu", 2.0), ("train_seed", 3), ("n_labels", 3), ("keep_fraction", 0.6)])
    def test_axes(self, axis, value):
        cfg = X.with_axis(TINY, axis, value)
        assert cfg != TINY

    def test_bad_axis_and_empty(self):
        with pytest.raises(InputError):
            X.sweep(TINY, "lr", [0.1])
        with pytest.raises(InputError):
            X.sweep(TINY, "tau", [])

    def test_worsening_fraction(self):
        assert X.worsening_fraction([0.3, 0.2, 0.25, 0.1]) == pytest.approx(1 / 3)


class TestPersist:
    def test_run_round_trip(self, tiny_result, tmp_path):
        path = X.persist(tiny_result, tmp_path / "run.json")
        assert X.load(path) == tiny_result

    def test_table_round_trip(self, tmp_path):
        table = X.run_benchmark(replace(TINY, steps=20), [TINY.fold], [TINY.loss])
        assert X.load(X.persist(table, tmp_path / "t.json")) == table

    @pytest.mark.parametrize(
        "obj",
        [
            X.compare_vectors([3.0, 2.0], [1.0, 1.0]),
            X.SweepTable("tau", (X.SweepRow(0.9, 0.1, 0.05, 20, (1,)),)),
            TINY,
            D.FoldSpec((1,), (2,), (3,), 0, "random"),
        ],
    )
    def test_other_round_trips(self, obj, tmp_path):
        assert X.load(X.persist(obj, tmp_path / "x.json")) == obj

    def test_corrupted_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"kind": "run_result", "data": {"config_hash": ')
        with pytest.raises(X.PersistError, match="bad.json"):
            X.load(p)

    def test_unknown_kind(self, tmp_path):
        p = tmp_path / "odd.json"
        p.write_text(json.dumps({"kind": "mystery", "data": {}}))
        with pytest.raises(X.PersistError):
            X.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(X.PersistError):
            X.load(tmp_path / "nope.json")
