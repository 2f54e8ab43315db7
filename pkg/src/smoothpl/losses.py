"""Pseudo-labeling loss family: PL, SPL, FixMatch, Smooth FixMatch, factor loss.

Probabilities may be plain arrays (values come back as floats) or diffcore
nodes (values come back as nodes ready for ``backward``). Pseudo-labels and
their weights are always computed from stop-gradient values.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import InputError, Node


class CalibrationError(ValueError):
    """Equilibrium estimates that make a calibration formula undefined."""


class Variant(str, enum.Enum):
    PL = "PL"
    SPL = "SPL"
    FM = "FM"
    SFM = "SFM"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None

    @property
    def smooth(self) -> bool:
        return self in (Variant.SPL, Variant.SFM)

    @property
    def two_view(self) -> bool:
        return self in (Variant.FM, Variant.SFM)


# shape exponents for the named factor shapes
LINEAR, QUADRATIC, SQRT = 1.0, 2.0, 0.5


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.95
    lambda_u: float = 1.0
    lambda_phi: float = 0.0
    mu: float = LINEAR
    variant: Variant = Variant.SFM
    # average the unlabeled term over accepted items only (off: average over all)
    mean_over_accepted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0.5 < self.tau <= 1.0:
            raise InputError(f"tau must lie in (0.5, 1], got {self.tau}")
        if not self.mu > 0:
            raise InputError(f"mu must be positive, got {self.mu}")
        # lambda_u = 0 is allowed: it is the supervised-only baseline
        if self.lambda_u < 0 or self.lambda_phi < 0:
            raise InputError("loss weights must be nonnegative")
        if (self.variant.smooth or self.lambda_phi > 0) and self.tau >= 1.0:
            raise InputError("smooth factors need tau < 1")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lambda_u": self.lambda_u,
            "lambda_phi": self.lambda_phi,
            "mu": self.mu,
            "variant": self.variant.value,
            "mean_over_accepted": self.mean_over_accepted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass(frozen=True)
class PseudoLabel:
    cls: int
    confidence: float
    weight: float


@dataclass(frozen=True)
class PseudoLabels:
    """Batched pseudo-labels. Everything here is a constant for autodiff."""

    classes: np.ndarray
    confidence: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.classes)

    @property
    def accepted(self) -> np.ndarray:
        return self.weight > 0


@dataclass(frozen=True)
class EquilibriumEstimate:
    """Early-training means of the unsupervised terms over ``window`` steps."""

    ell_fm: float
    ell_sfm: float
    ell_phi: float
    window: tuple[int, int]

    def __post_init__(self):
        if self.window[1] <= self.window[0]:
            raise InputError("equilibrium window must be nonempty")


# ---------------------------------------------------------------------------
# Factors and pseudo-labels
# ---------------------------------------------------------------------------


def _check_tau(tau: float):
    if not 0.5 < tau < 1.0:
        raise InputError(f"shape factor needs tau in (0.5, 1), got {tau}")


def shape_factor(sigma, tau: float, mu: float = LINEAR):
    """``max(0, (sigma - tau) / (1 - tau)) ** mu``; differentiable if ``sigma`` is a node."""
    _check_tau(tau)
    if not mu > 0:
        raise InputError("mu must be positive")
    ramp = dc.clip_min(dc.mul(dc.sub(sigma, tau), 1.0 / (1.0 - tau)), 0.0)
    out = ramp if mu == 1.0 else dc.power(ramp, mu)
    if isinstance(out, Node):
        return out
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


def _check_distribution(p: np.ndarray):
    if p.ndim not in (1, 2) or p.shape[-1] < 2:
        raise InputError(f"expected probability vectors, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InputError("probabilities must be finite and nonnegative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InputError("probabilities must sum to 1")


def pseudo_labels(probs_weak, cfg: LossConfig) -> PseudoLabels:
    """Argmax class (lowest index on ties), its score and its weight, from sg(probs)."""
    p = np.atleast_2d(dc.value_of(dc.sg(probs_weak)))
    _check_distribution(p)
    classes = np.argmax(p, axis=-1)
    sigma = p[np.arange(len(p)), classes]
    if cfg.variant.smooth:
        weight = np.asarray(shape_factor(sigma, cfg.tau, cfg.mu), dtype=float)
    else:
        weight = (sigma > cfg.tau).astype(float)
    return PseudoLabels(classes, sigma, np.atleast_1d(weight))


def pseudo_label(probs_weak, cfg: LossConfig) -> PseudoLabel:
    p = np.asarray(dc.value_of(probs_weak), dtype=float)
    if p.ndim != 1:
        raise InputError("pseudo_label expects a single probability vector")
    pl = pseudo_labels(p, cfg)
    return PseudoLabel(int(pl.classes[0]), float(pl.confidence[0]), float(pl.weight[0]))


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def _finish(x):
    return x if isinstance(x, Node) else float(x)


def _rows(x):
    v = dc.value_of(x)
    return x if v.ndim == 2 else (dc.mul(x, np.ones((1, 1))) if isinstance(x, Node) else v[None, :])


def supervised_from_logp(log_probs, targets) -> Node | float:
    """Mean cross-entropy given log-probabilities and integer class targets."""
    targets = np.asarray(targets, dtype=int)
    if len(targets) == 0:
        raise InputError("the supervised term needs at least one labeled item")
    return _nll_mean(dc.pick(log_probs, targets))


def _nll_mean(picked_logp):
    return _finish(dc.mean(dc.mul(picked_logp, -1.0)))


def unsupervised_from_logp(log_probs, pl: PseudoLabels, cfg: LossConfig):
    """Mean over items of ``-weight * log p[pseudo-class]`` (weights are constants)."""
    if len(pl) == 0:
        return 0.0
    return _weighted_nll(dc.pick(log_probs, pl.classes), pl, cfg)


def _weighted_nll(picked_logp, pl: PseudoLabels, cfg: LossConfig):
    total = dc.sum_(dc.mul(picked_logp, -pl.weight))
    denom = len(pl)
    if cfg.mean_over_accepted:
        denom = max(int(pl.accepted.sum()), 1)
    return _finish(dc.mul(total, 1.0 / denom))


def factor_loss(probs_weak, pl: PseudoLabels, cfg: LossConfig):
    """``-lambda_phi * mean(Phi(sg(sigma)) * Phi(sigma))``; only the second factor is live."""
    if cfg.lambda_phi == 0 or len(pl) == 0:
        return 0.0
    sigma = dc.pick(probs_weak, pl.classes)
    frozen = np.asarray(shape_factor(pl.confidence, cfg.tau, cfg.mu), dtype=float)
    live = shape_factor(sigma, cfg.tau, cfg.mu)
    return _finish(dc.mul(dc.mean(dc.mul(live, frozen)), -cfg.lambda_phi))


def _labeled_batch(labeled):
    """Accept ``[(probs, onehot), ...]`` or ``(probs_matrix, onehot_matrix)``."""
    if isinstance(labeled, tuple) and len(labeled) == 2 and np.ndim(dc.value_of(labeled[0])) == 2:
        probs, onehot = labeled
    else:
        labeled = list(labeled)
        if not labeled:
            raise InputError("the supervised term needs at least one labeled item")
        if any(isinstance(p, Node) for p, _ in labeled):
            raise InputError("pass node batches as (probs_matrix, onehot_matrix)")
        probs = np.stack([np.asarray(p, dtype=float) for p, _ in labeled])
        onehot = np.stack([np.asarray(t, dtype=float) for _, t in labeled])
    onehot = np.asarray(onehot, dtype=float)
    if onehot.ndim != 2 or len(onehot) == 0:
        raise InputError("the supervised term needs at least one labeled item")
    if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)):
        raise InputError("labeled targets must be one-hot")
    return probs, np.argmax(onehot, axis=1)


def supervised_term(labeled):
    probs, targets = _labeled_batch(labeled)
    _check_distribution(np.atleast_2d(dc.value_of(probs)))
    return _nll_mean(dc.log(dc.pick(probs, targets)))


def unsupervised_term(probs_weak, probs_target, cfg: LossConfig):
    """Unweighted (no ``lambda_u``) unsupervised term for any variant.

    For one-view variants pass the same probabilities twice.
    """
    pw, pt = _rows(probs_weak), _rows(probs_target)
    if len(dc.value_of(pw)) == 0:
        return 0.0
    _check_distribution(dc.value_of(pt))
    pl = pseudo_labels(pw, cfg)
    return _weighted_nll(dc.log(dc.pick(pt, pl.classes)), pl, cfg)


def _require(cfg: LossConfig, variant: Variant):
    if cfg.variant != variant:
        raise InputError(f"config variant is {cfg.variant.value}, expected {variant.value}")


def _one_view_loss(labeled, unlabeled_probs, cfg):
    sup = supervised_term(labeled)
    if unlabeled_probs is None or len(dc.value_of(unlabeled_probs)) == 0:
        return sup
    u = _rows(unlabeled_probs)
    unsup = unsupervised_term(u, u, cfg)
    phi = factor_loss(u, pseudo_labels(u, cfg), cfg)
    return _finish(dc.add(dc.add(sup, dc.mul(unsup, cfg.lambda_u)), phi))


def _two_view_loss(labeled, unlabeled_views, cfg):
    sup = supervised_term(labeled)
    weak, strong = _split_views(unlabeled_views)
    if weak is None:
        return sup
    unsup = unsupervised_term(weak, strong, cfg)
    phi = factor_loss(weak, pseudo_labels(weak, cfg), cfg)
    return _finish(dc.add(dc.add(sup, dc.mul(unsup, cfg.lambda_u)), phi))


def _split_views(views):
    if views is None:
        return None, None
    if isinstance(views, tuple) and len(views) == 2 and np.ndim(dc.value_of(views[0])) == 2:
        return views
    views = list(views)
    if not views:
        return None, None
    weak = np.stack([np.asarray(w, dtype=float) for w, _ in views])
    strong = np.stack([np.asarray(s, dtype=float) for _, s in views])
    return weak, strong


def loss_pl(labeled, unlabeled_probs, cfg: LossConfig):
    """Supervised CE + ``lambda_u`` * hard-thresholded self-training term (+ factor loss)."""
    _require(cfg, Variant.PL)
    return _one_view_loss(labeled, unlabeled_probs, cfg)


def loss_spl(labeled, unlabeled_probs, cfg: LossConfig):
    """As ``loss_pl`` with the indicator replaced by the shape factor of sg(sigma)."""
    _require(cfg, Variant.SPL)
    return _one_view_loss(labeled, unlabeled_probs, cfg)


def loss_fm(labeled, unlabeled_views, cfg: LossConfig):
    """FixMatch: pseudo-label from the weak view, learned on the strong view.

    ``unlabeled_views`` is ``[(probs_weak, probs_strong), ...]`` or a pair of
    matrices/nodes ``(probs_weak, probs_strong)``.
    """
    _require(cfg, Variant.FM)
    return _two_view_loss(labeled, unlabeled_views, cfg)


def loss_sfm(labeled, unlabeled_views, cfg: LossConfig):
    _require(cfg, Variant.SFM)
    return _two_view_loss(labeled, unlabeled_views, cfg)


def loss_phi(unlabeled_weak_probs, cfg: LossConfig):
    """Factor-as-loss term on the weak view."""
    if cfg.lambda_phi == 0:
        return 0.0
    w = _rows(unlabeled_weak_probs)
    return factor_loss(w, pseudo_labels(w, cfg), cfg)


LOSSES = {Variant.PL: loss_pl, Variant.SPL: loss_spl, Variant.FM: loss_fm, Variant.SFM: loss_sfm}


def spl_integrated(sigma, tau: float):
    """Antiderivative of ``Phi(sigma)/sigma`` whose gradient matches SPL at the C1 level.

    Constant ``(1 - tau + tau*ln tau)/(tau - 1)`` below the threshold,
    ``(1 - sigma + tau*ln sigma)/(tau - 1)`` above; continuous at ``tau``.
    Differentiable when ``sigma`` is a node.
    """
    _check_tau(tau)
    s = dc.clip_min(sigma, tau)
    out = dc.mul(dc.add(dc.sub(1.0, s), dc.mul(dc.log(s), tau)), 1.0 / (tau - 1.0))
    if isinstance(out, Node):
        return out
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Weight calibration
# ---------------------------------------------------------------------------


def calibrate_lambda_u(est: EquilibriumEstimate, lambda_u_fm: float = 1.0) -> float:
    """``lambda_u`` for SFM so that its unsupervised magnitude matches FixMatch's."""
    denom = est.ell_phi * est.ell_sfm
    if est.ell_phi <= 0 or est.ell_sfm <= 0 or not math.isfinite(denom):
        raise CalibrationError(f"degenerate equilibrium estimate {est}")
    return lambda_u_fm * est.ell_fm / denom


def lambda_phi_bound(tau: float, lambda_u_sfm: float, ell_sfm: float) -> float:
    """Break-even factor-loss weight ``(1 - tau) * lambda_u_sfm / ell_sfm``."""
    if ell_sfm <= 0 or not math.isfinite(ell_sfm):
        raise CalibrationError("ell_sfm must be positive")
    return (1.0 - tau) * lambda_u_sfm / ell_sfm
