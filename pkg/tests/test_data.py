import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothpl import data as D
from smoothpl.diffcore import InputError

BLOBS = D.gen_blobs(400, 10, 0.1, seed=3)


class TestGenerators:
    def test_moons_noise_free_on_arcs(self):
        ds = D.gen_two_moons(4, noise=0.0)
        outer = ds.points[ds.labels == 0]
        inner = ds.points[ds.labels == 1]
        np.testing.assert_allclose(np.hypot(*outer.T), 1.0)
        np.testing.assert_allclose(np.hypot(inner[:, 0] - 1.0, inner[:, 1] - 0.5), 1.0)

    def test_moons_counts_and_determinism(self):
        a = D.gen_two_moons(2000, 0.1, seed=7)
        assert np.bincount(a.labels).tolist() == [1000, 1000]
        assert a == D.gen_two_moons(2000, 0.1, seed=7)

    @pytest.mark.parametrize("n", [1, 3, 2001])
    def test_moons_odd_rejected(self, n):
        with pytest.raises(InputError):
            D.gen_two_moons(n)

    def test_blobs_counts(self):
        assert np.bincount(D.gen_blobs(100, 10).labels).tolist() == [10] * 10
        assert np.bincount(D.gen_blobs(103, 10).labels).tolist() == [11] * 3 + [10] * 7

    def test_blobs_zero_spread(self):
        ds = D.gen_blobs(50, 5, spread=0.0)
        for c in range(5):
            rows = ds.points[ds.labels == c]
            assert np.all(rows == rows[0])

    def test_nearest_center_oracle_is_perfect_when_separated(self):
        ds = D.gen_blobs(1000, 10, spread=0.03, seed=1)
        centers = D.blob_centers(10)
        pred = np.argmin(((ds.points[:, None] - centers[None]) ** 2).sum(-1), axis=1)
        assert np.all(pred == ds.labels)

    def test_blobs_need_two_classes(self):
        with pytest.raises(InputError):
            D.gen_blobs(10, 1)


class TestAugment:
    AUG = D.Augmenter.for_points(BLOBS.points)

    def test_zero_weak_std_is_identity(self):
        aug = dataclasses.replace(self.AUG, weak_std=0.0)
        x = BLOBS.points[:5]
        np.testing.assert_array_equal(D.augment(x, "weak", np.random.default_rng(0), aug), x)

    def test_reproducible(self):
        x = BLOBS.points[0]
        a = D.augment(x, "strong", np.random.default_rng(9), self.AUG)
        b = D.augment(x, "strong", np.random.default_rng(9), self.AUG)
        np.testing.assert_array_equal(a, b)
        assert a.shape == x.shape

    def test_strong_dominates_weak(self):
        rng = np.random.default_rng(0)
        x = np.repeat(BLOBS.points[:100], 100, axis=0)
        dw = np.linalg.norm(D.augment(x, "weak", rng, self.AUG) - x, axis=1)
        ds = np.linalg.norm(D.augment(x, "strong", rng, self.AUG) - x, axis=1)
        grid = np.quantile(np.concatenate([dw, ds]), np.linspace(0.01, 0.99, 50))
        cdf_w = np.searchsorted(np.sort(dw), grid, side="right") / len(dw)
        cdf_s = np.searchsorted(np.sort(ds), grid, side="right") / len(ds)
        assert np.all(cdf_s <= cdf_w)

    def test_unknown_strength(self):
        with pytest.raises(InputError):
            D.augment(np.zeros(2), "medium", np.random.default_rng(0), self.AUG)


def _check_partition(fold, ds):
    lab, unl, tst = set(fold.labeled), set(fold.unlabeled), set(fold.test)
    train, test = D.train_test_split(ds, fold.meta.get("test_fraction", 0.2))
    assert not (lab & unl or lab & tst or unl & tst)
    if fold.protocol != "imbalanced":
        assert lab | unl == set(train.tolist())
    assert tst == set(test.tolist())


class TestFolds:
    def test_balanced_counts(self):
        ds = D.gen_blobs(2000, 10, 0.1)
        fold = D.sample_fold_balanced(ds, 4, fold_seed=0)
        assert len(fold.labeled) == 40
        assert np.bincount(ds.labels[list(fold.labeled)]).tolist() == [4] * 10
        _check_partition(fold, ds)

    def test_balanced_full_class_empties_unlabeled(self):
        ds = D.gen_blobs(40, 2, 0.1)
        fold = D.sample_fold_balanced(ds, 20, 0, test_fraction=0.0)
        assert fold.unlabeled == () and len(fold.labeled) == 40

    def test_balanced_insufficient(self):
        with pytest.raises(InputError):
            D.sample_fold_balanced(D.gen_blobs(50, 10, 0.1), 10, 0)

    def test_fold_seeds_give_different_labeled_sets(self):
        ds = D.gen_blobs(2000, 10, 0.1)
        sets = {D.sample_fold_balanced(ds, 4, s).labeled for s in range(10)}
        assert len(sets) == 10

    def test_random_full_is_supervised(self):
        train, _ = D.train_test_split(BLOBS)
        fold = D.sample_fold_random(BLOBS, len(train), 0)
        assert fold.unlabeled == ()

    def test_random_may_omit_a_class(self):
        ds = D.gen_blobs(2000, 10, 0.1)
        missing = [s for s in range(50) if len(set(ds.labels[list(D.sample_fold_random(ds, 10, s).labeled)])) < 10]
        assert missing

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 200), st.integers(0, 100))
    def test_random_incremental(self, seed, n, delta):
        small = D.sample_fold_random(BLOBS, n, seed)
        big = D.sample_fold_random(BLOBS, n + delta, seed)
        assert set(small.labeled) <= set(big.labeled)
        _check_partition(small, BLOBS)

    def test_random_too_many(self):
        with pytest.raises(InputError):
            D.sample_fold_random(BLOBS, 10_000, 0)

    def test_json_round_trip(self):
        fold = D.sample_fold_balanced(BLOBS, 2, 5)
        text = fold.to_json()
        assert D.FoldSpec.from_json(text) == fold
        doc = __import__("json").loads(text)
        assert {"protocol", "seed", "labeled", "test", "meta"} <= set(doc)

    def test_overlap_rejected(self):
        with pytest.raises(InputError):
            D.FoldSpec((1, 2), (2, 3), (4,), 0, "random")


class TestImbalance:
    def _fold(self):
        ds = D.gen_blobs(1250, 10, 0.1)
        return ds, D.sample_fold_balanced(ds, 1, 0)

    def test_keep_one_is_identity(self):
        ds, fold = self._fold()
        out = D.apply_imbalance(fold, ds, 0, 1.0, target_class=3)
        assert out.unlabeled == fold.unlabeled and out.labeled == fold.labeled

    def test_sixty_percent_of_hundred(self):
        ds = D.gen_blobs(1000, 10, 0.1)
        unl = tuple(range(1000))
        fold = D.FoldSpec((), unl, (), 0, "random")
        out = D.apply_imbalance(fold, ds, 1, 0.6, target_class=2)
        counts = np.bincount(ds.labels[list(out.unlabeled)], minlength=10)
        assert counts[2] == 60
        assert all(counts[c] == 100 for c in range(10) if c != 2)
        assert out.protocol == "imbalanced" and out.meta["target_class"] == 2

    def test_random_target_is_seeded(self):
        ds, fold = self._fold()
        a = D.apply_imbalance(fold, ds, 11)
        b = D.apply_imbalance(fold, ds, 11)
        assert a == b

    def test_absent_class(self):
        ds = D.gen_blobs(100, 10, 0.1)
        fold = D.FoldSpec((), tuple(np.flatnonzero(ds.labels != 4).tolist()), (), 0, "random")
        with pytest.raises(InputError):
            D.apply_imbalance(fold, ds, 0, 0.6, target_class=4)

    def test_bad_keep_fraction(self):
        ds, fold = self._fold()
        with pytest.raises(InputError):
            D.apply_imbalance(fold, ds, 0, 0.0)


class TestClassFrequency:
    def test_balanced_is_zero(self):
        ds = D.gen_blobs(2000, 10, 0.1)
        assert D.class_freq_deviation(D.sample_fold_balanced(ds, 4, 0), ds) == pytest.approx(0.0)

    def test_paper_fold_zero_list(self):
        freqs = [0.025] + [0.05] * 3 + [0.10] * 2 + [0.125] * 3 + [0.25]
        assert math.fsum(freqs) == pytest.approx(1.0)
        assert D.frequency_deviation(freqs) == pytest.approx(math.sqrt(0.375), abs=1e-12)

    def test_empty_labeled(self):
        fold = D.FoldSpec((), (0, 1), (), 0, "random")
        with pytest.raises(InputError):
            D.class_freq_deviation(fold, BLOBS)


class TestBatches:
    def _fold(self):
        return D.sample_fold_balanced(BLOBS, 3, 1)

    def test_sizes(self):
        b = next(D.batch_iterator(self._fold(), BLOBS, 8, 7, 2046))
        assert b.labeled_x.shape == (8, 2) and len(b.labeled_y) == 8
        assert b.weak.shape == (56, 2) and b.strong.shape == (56, 2)

    def test_deterministic(self):
        it1 = D.batch_iterator(self._fold(), BLOBS, 4, 2, 5)
        it2 = D.batch_iterator(self._fold(), BLOBS, 4, 2, 5)
        for _ in range(5):
            a, b = next(it1), next(it2)
            np.testing.assert_array_equal(a.strong, b.strong)
            np.testing.assert_array_equal(a.labeled_idx, b.labeled_idx)

    def test_epoch_covers_labeled_before_repeat(self):
        fold = self._fold()
        it = D.batch_iterator(fold, BLOBS, 4, 1, 0)
        n = len(fold.labeled)
        seen = np.concatenate([next(it).labeled_idx for _ in range(math.ceil(n / 4) + 1)])[:n]
        assert sorted(seen.tolist()) == sorted(fold.labeled)

    def test_unlabeled_views_carry_no_labels(self):
        b = next(D.batch_iterator(self._fold(), BLOBS, 2, 3, 0))
        pair = b.view_pairs()[0]
        assert {f.name for f in dataclasses.fields(pair)} == {"weak", "strong", "source"}
        assert set(b.unlabeled_idx) <= set(self._fold().unlabeled)

    def test_views_share_source(self):
        fold = self._fold()
        aug = dataclasses.replace(D.Augmenter.for_points(BLOBS.points), weak_std=0.0)
        b = next(D.batch_iterator(fold, BLOBS, 2, 3, 0, aug))
        np.testing.assert_array_equal(b.weak, BLOBS.points[b.unlabeled_idx])

    def test_bad_sizes(self):
        with pytest.raises(InputError):
            next(D.batch_iterator(self._fold(), BLOBS, 0, 7, 0))

    def test_empty_labeled(self):
        fold = D.FoldSpec((), (0, 1), (), 0, "random")
        with pytest.raises(InputError):
            next(D.batch_iterator(fold, BLOBS, 2, 2, 0))

    def test_train_seed_does_not_touch_folds(self):
        assert D.sample_fold_balanced(BLOBS, 3, 1).to_json() == self._fold().to_json()

    def test_monte_carlo_helper_matches_sampler(self):
        ds = D.gen_blobs(2000, 10, 0.1)
        fast = D.random_fold_deviations(ds, 40, range(5))
        slow = [D.class_freq_deviation(D.sample_fold_random(ds, 40, s), ds) for s in range(5)]
        np.testing.assert_array_equal(fast, slow)
