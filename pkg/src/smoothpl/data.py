"""Synthetic datasets, weak/strong views and fold sampling.

Ground-truth labels of unlabeled points never leave this module through the
training path: ``batch_iterator`` yields labels for the labeled batch only.
Metrics read ``Dataset.labels`` directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .diffcore import InputError

# the held-out test split is carved with this seed, independently of fold seeds
SPLIT_SEED = 20_231_029
DEFAULT_TEST_FRACTION = 0.2

PROTOCOLS = ("balanced", "random", "imbalanced")


@dataclass(frozen=True)
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.points.ndim != 2 or len(self.points) != len(self.labels):
            raise InputError("points must be (n, d) and aligned with labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError("labels must lie in [0, n_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.n_classes == other.n_classes
            and self.name == other.name
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.labels, other.labels)
        )


def gen_two_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles with ``n/2`` points each."""
    if n < 2 or n % 2:
        raise InputError(f"two moons needs an even n >= 2, got {n}")
    if noise < 0:
        raise InputError("noise must be nonnegative")
    half = n // 2
    t = np.linspace(0.0, math.pi, half)
    outer = np.column_stack([np.cos(t), np.sin(t)])
    inner = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    points = np.vstack([outer, inner])
    if noise > 0:
        points = points + np.random.default_rng(seed).normal(0.0, noise, points.shape)
    labels = np.repeat([0, 1], half)
    return Dataset(points, labels, 2, f"moons-n{n}-noise{noise}-s{seed}")


def blob_centers(n_classes: int, radius: float = 1.0) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def gen_blobs(
    n: int, n_classes: int = 10, spread: float = 0.1, seed: int = 0, radius: float = 1.0
) -> Dataset:
    """Isotropic Gaussian clusters at evenly spaced centers on a circle."""
    if n_classes < 2:
        raise InputError("need at least two classes")
    if spread < 0:
        raise InputError("spread must be nonnegative")
    counts = [n // n_classes + (k < n % n_classes) for k in range(n_classes)]
    labels = np.repeat(np.arange(n_classes), counts)
    centers = blob_centers(n_classes, radius)
    points = centers[labels].copy()
    if spread > 0:
        points += np.random.default_rng(seed).normal(0.0, spread, points.shape)
    return Dataset(points, labels, n_classes, f"blobs-n{n}-k{n_classes}-sp{spread}-s{seed}")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Augmenter:
    """Weak = Gaussian jitter. Strong = rotation about the centroid, rescaling, jitter.

    Jitter standard deviations are multiples of ``scale`` (the dataset's mean
    per-coordinate standard deviation).
    """

    centroid: np.ndarray
    scale: float
    weak_std: float = 0.05
    strong_std: float = 0.10
    max_angle_deg: float = 10.0
    scale_range: float = 0.2

    @classmethod
    def for_points(cls, points: np.ndarray, **kw) -> "Augmenter":
        return cls(points.mean(axis=0), float(points.std(axis=0).mean()), **kw)


def augment(x, strength: str, rng: np.random.Generator, aug: Augmenter) -> np.ndarray:
    """A weak or strong view of one point ``(d,)`` or a batch ``(m, d)``."""
    x = np.asarray(x, dtype=float)
    rows = np.atleast_2d(x)
    m, d = rows.shape
    if strength == "weak":
        out = rows + rng.normal(0.0, aug.weak_std * aug.scale, rows.shape)
    elif strength == "strong":
        angle = np.deg2rad(rng.uniform(-aug.max_angle_deg, aug.max_angle_deg, m))
        factor = rng.uniform(1.0 - aug.scale_range, 1.0 + aug.scale_range, m)
        centered = rows - aug.centroid
        out = centered.copy()
        if d >= 2:
            c, s = np.cos(angle), np.sin(angle)
            out[:, 0] = c * centered[:, 0] - s * centered[:, 1]
            out[:, 1] = s * centered[:, 0] + c * centered[:, 1]
        out = out * factor[:, None] + aug.centroid
        out = out + rng.normal(0.0, aug.strong_std * aug.scale, rows.shape)
    else:
        raise InputError(f"strength must be 'weak' or 'strong', got {strength!r}")
    return out if x.ndim == 2 else out[0]


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    test: tuple[int, ...]
    fold_seed: int
    protocol: str
    meta: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InputError(f"unknown protocol {self.protocol!r}")
        for name in ("labeled", "unlabeled", "test"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        lab, unl, tst = set(self.labeled), set(self.unlabeled), set(self.test)
        if lab & unl or lab & tst or unl & tst:
            raise InputError("labeled, unlabeled and test indices must be disjoint")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.fold_seed,
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "test": list(self.test),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(
            labeled=tuple(d["labeled"]),
            unlabeled=tuple(d["unlabeled"]),
            test=tuple(d["test"]),
            fold_seed=int(d["seed"]),
            protocol=d["protocol"],
            meta=dict(d.get("meta", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldSpec":
        return cls.from_dict(json.loads(text))


def train_test_split(ds: Dataset, test_fraction: float = DEFAULT_TEST_FRACTION):
    """Sorted (train, test) index arrays; depends only on the dataset size."""
    if not 0.0 <= test_fraction < 1.0:
        raise InputError("test_fraction must lie in [0, 1)")
    perm = np.random.default_rng(SPLIT_SEED).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _meta(ds: Dataset, test_fraction: float, **extra) -> dict:
    return {"dataset": ds.name, "n_points": len(ds), "test_fraction": test_fraction, **extra}


def sample_fold_balanced(
    ds: Dataset, per_class: int, fold_seed: int, test_fraction: float = DEFAULT_TEST_FRACTION
) -> FoldSpec:
    """Exactly ``per_class`` labeled training points from every class."""
    if per_class < 1:
        raise InputError("per_class must be positive")
    train, test = train_test_split(ds, test_fraction)
    rng = np.random.default_rng(fold_seed)
    labeled = []
    for c in range(ds.n_classes):
        pool = train[ds.labels[train] == c]
        if len(pool) < per_class:
            raise InputError(f"class {c} has {len(pool)} training points < {per_class}")
        labeled.extend(rng.choice(pool, size=per_class, replace=False).tolist())
    labeled_set = set(labeled)
    unlabeled = [i for i in train.tolist() if i not in labeled_set]
    return FoldSpec(
        tuple(sorted(labeled)), tuple(unlabeled), tuple(test.tolist()), fold_seed, "balanced",
        _meta(ds, test_fraction, per_class=per_class),
    )


def sample_fold_random(
    ds: Dataset, n_labels: int, fold_seed: int, test_fraction: float = DEFAULT_TEST_FRACTION
) -> FoldSpec:
    """``n_labels`` training points uniformly, no class constraint.

    The labeled set is a prefix of one seeded permutation, so the fold with
    ``n`` labels is contained in the fold with ``n + k`` labels.
    """
    train, test = train_test_split(ds, test_fraction)
    if not 0 <= n_labels <= len(train):
        raise InputError(f"n_labels must lie in [0, {len(train)}]")
    order = np.random.default_rng(fold_seed).permutation(train)
    labeled = np.sort(order[:n_labels])
    unlabeled = np.sort(order[n_labels:])
    return FoldSpec(
        tuple(labeled.tolist()), tuple(unlabeled.tolist()), tuple(test.tolist()), fold_seed, "random",
        _meta(ds, test_fraction, n_labels=n_labels),
    )


def apply_imbalance(
    fold: FoldSpec,
    ds: Dataset,
    seed: int,
    keep_fraction: float = 0.6,
    target_class: int | None = None,
) -> FoldSpec:
    """Drop ``ceil((1 - keep_fraction) * count)`` unlabeled points of one class.

    ``target_class=None`` picks the class at random from ``seed``.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise InputError("keep_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    if target_class is None:
        target_class = int(rng.integers(ds.n_classes))
    unlabeled = np.asarray(fold.unlabeled, dtype=int)
    pool = unlabeled[ds.labels[unlabeled] == target_class]
    if len(pool) == 0:
        raise InputError(f"class {target_class} has no unlabeled points")
    # guard against (1 - 0.6) * 100 = 40.000000000000001
    n_drop = math.ceil(round((1.0 - keep_fraction) * len(pool), 9))
    dropped = set(rng.choice(pool, size=n_drop, replace=False).tolist()) if n_drop else set()
    kept = tuple(i for i in fold.unlabeled if i not in dropped)
    meta = dict(fold.meta)
    meta.update(
        base_protocol=fold.protocol,
        target_class=target_class,
        keep_fraction=keep_fraction,
        imbalance_seed=seed,
        dropped=len(dropped),
    )
    return FoldSpec(fold.labeled, kept, fold.test, fold.fold_seed, "imbalanced", meta)


def frequency_deviation(freqs: Sequence[float]) -> float:
    """Population std of class frequencies about ``1/n``, in units of ``1/n``."""
    f = np.asarray(freqs, dtype=float)
    uniform = 1.0 / len(f)
    return float(np.sqrt(np.mean((f - uniform) ** 2)) / uniform)


def class_frequencies(fold: FoldSpec, ds: Dataset) -> np.ndarray:
    if not fold.labeled:
        raise InputError("the labeled set is empty")
    counts = np.bincount(ds.labels[list(fold.labeled)], minlength=ds.n_classes)
    return counts / counts.sum()


def class_freq_deviation(fold: FoldSpec, ds: Dataset) -> float:
    return frequency_deviation(class_frequencies(fold, ds))


def random_fold_deviations(
    ds: Dataset, n_labels: int, fold_seeds: Sequence[int], test_fraction: float = DEFAULT_TEST_FRACTION
) -> np.ndarray:
    """``class_freq_deviation`` of ``sample_fold_random(ds, n_labels, s)`` for each seed.

    Draws the same labeled sets as the sampler without building fold objects.
    """
    train, _ = train_test_split(ds, test_fraction)
    if not 0 < n_labels <= len(train):
        raise InputError(f"n_labels must lie in (0, {len(train)}]")
    out = np.empty(len(fold_seeds))
    for k, seed in enumerate(fold_seeds):
        labeled = np.random.default_rng(seed).permutation(train)[:n_labels]
        counts = np.bincount(ds.labels[labeled], minlength=ds.n_classes)
        out[k] = frequency_deviation(counts / n_labels)
    return out


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewPair:
    weak: np.ndarray
    strong: np.ndarray
    source: int


@dataclass(frozen=True)
class Batch:
    """One step of data. Unlabeled views carry their source index, never a label."""

    labeled_idx: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_idx: np.ndarray
    weak: np.ndarray
    strong: np.ndarray

    def view_pairs(self) -> list[ViewPair]:
        return [ViewPair(w, s, int(i)) for w, s, i in zip(self.weak, self.strong, self.unlabeled_idx)]


class _EpochStream:
    """Draws indices epoch by epoch, reshuffling at every epoch boundary."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices = np.asarray(indices, dtype=int)
        self.rng = rng
        self.buffer = np.empty(0, dtype=int)

    def take(self, k: int) -> np.ndarray:
        if len(self.indices) == 0:
            return np.empty(0, dtype=int)
        parts, need = [], k
        while need > 0:
            if len(self.buffer) == 0:
                self.buffer = self.rng.permutation(self.indices)
            chunk = self.buffer[:need]
            self.buffer = self.buffer[need:]
            parts.append(chunk)
            need -= len(chunk)
        return np.concatenate(parts)


def train_streams(train_seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for init, labeled order, unlabeled order, augmentation."""
    names = ("init", "labeled", "unlabeled", "augment")
    children = np.random.SeedSequence(train_seed).spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def batch_iterator(
    fold: FoldSpec,
    ds: Dataset,
    batch_size: int,
    ratio: int,
    train_seed: int,
    aug: Augmenter | None = None,
) -> Iterator[Batch]:
    """Endless stream of (weakly augmented labeled batch, unlabeled view pairs).

    The unlabeled batch has ``ratio * batch_size`` items (fewer only when the
    unlabeled pool is empty). Order and augmentations are drawn from streams
    seeded by ``train_seed``; the fold only decides which indices are used.
    """
    if batch_size < 1 or ratio < 1:
        raise InputError("batch_size and ratio must be at least 1")
    if not fold.labeled:
        raise InputError("the labeled set is empty")
    streams = train_streams(train_seed)
    if aug is None:
        train_idx = np.asarray(fold.labeled + fold.unlabeled, dtype=int)
        aug = Augmenter.for_points(ds.points[train_idx])
    labeled = _EpochStream(np.asarray(fold.labeled), streams["labeled"])
    unlabeled = _EpochStream(np.asarray(fold.unlabeled), streams["unlabeled"])
    rng = streams["augment"]
    points, labels = ds.points, ds.labels
    while True:
        li = labeled.take(batch_size)
        ui = unlabeled.take(ratio * batch_size)
        lx = augment(points[li], "weak", rng, aug)
        src = points[ui]
        weak = augment(src, "weak", rng, aug) if len(ui) else src.copy()
        strong = augment(src, "strong", rng, aug) if len(ui) else src.copy()
        yield Batch(li, lx, labels[li], ui, weak, strong)
