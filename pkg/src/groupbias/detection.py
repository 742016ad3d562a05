"""Group bias estimation, bootstrap moments and Wald tests.

The bias of a group is the collapsed CATE prediction on one subset minus an
experimental GATE on a disjoint subset of the same half. Its sampling
distribution comes from a bootstrap that resamples within group, within
split tag and within treatment arm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import gates
from .data import Dataset, EffectScale, GroupView, Half, SplitAssignment, Tag
from .errors import (
    BootstrapDegenerateError,
    GroupBiasWarning,
    InvalidAlphaError,
    SingleGroupError,
    ValidationError,
)

EXPERIMENTAL_METHODS = ("means", "lin", "cuped")
COLLAPSE_METHODS = ("weighted", "converted")

_MAX_RETRIES = 10
_MAX_FAILED_SHARE = 0.10
_CHUNK_CELLS = 4_000_000


@dataclass(frozen=True)
class BiasEstimator:
    """How both sides of the bias decomposition are computed.

    ``gate_method`` picks the experimental GATE (``means``, ``lin`` or
    ``cuped``); ``collapse`` picks the model side (``weighted`` collapse of
    predictions, or the ``converted`` positives-only estimator).
    """

    scale: EffectScale = EffectScale.ADDITIVE
    gate_method: str = "means"
    collapse: str = "weighted"
    covariates: Tuple[str, ...] = ()
    control_column: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "scale", EffectScale(self.scale))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.gate_method not in EXPERIMENTAL_METHODS:
            raise ValidationError(f"unknown gate method {self.gate_method!r}")
        if self.collapse not in COLLAPSE_METHODS:
            raise ValidationError(f"unknown collapse method {self.collapse!r}")
        if self.gate_method in ("lin", "cuped") and self.scale is not EffectScale.ADDITIVE:
            raise ValidationError(f"{self.gate_method} adjustment requires the additive scale")
        if self.gate_method == "cuped" and not self.control_column:
            raise ValidationError("cuped needs a control column")
        if self.collapse == "converted" and self.scale is not EffectScale.RELATIVE:
            raise ValidationError("the converted-only estimator is a relative-scale estimator")

    # point estimates ---------------------------------------------------------

    def model_gate(self, view: GroupView) -> gates.GateEstimate:
        if self.collapse == "converted":
            return gates.converted_only_gate(view)
        return gates.model_implied_gate(view, gates.estimate_collapse_weights(view, self.scale))

    def experimental_gate(self, view: GroupView) -> gates.GateEstimate:
        if self.gate_method == "lin":
            return gates.estimate_gate_lin(view, self.covariates)
        if self.gate_method == "cuped":
            return gates.estimate_gate_cuped(view, self.control_column)
        return gates.estimate_gate_means(view, self.scale)

    def bias(self, predict: GroupView, estimate: GroupView) -> float:
        return self.model_gate(predict).value - self.experimental_gate(estimate).value

    # batch versions ----------------------------------------------------------

    def _uses_mu0(self, view: GroupView) -> bool:
        return self.scale is EffectScale.RELATIVE and view.mu0_pred is not None

    def model_batch(self, view: GroupView, idx: np.ndarray, arm: np.ndarray) -> np.ndarray:
        ds = view.dataset
        tau = ds.cate_pred[idx]
        if self.collapse == "converted":
            return gates.converted_only_batch(tau, ds.outcome[idx], arm)
        mu0 = ds.mu0_pred[idx] if self._uses_mu0(view) else None
        return gates.weighted_collapse_batch(tau, mu0)

    def experimental_batch(self, view: GroupView, idx: np.ndarray, arm: np.ndarray) -> np.ndarray:
        ds = view.dataset
        y = ds.outcome[idx]
        if self.gate_method == "cuped":
            z = ds.column(self.control_column).astype(float)[idx]
            return gates.cuped_batch(y, z, arm)
        if self.gate_method == "lin":
            if not self.covariates:
                return gates.means_contrast_batch(y, arm, EffectScale.ADDITIVE)
            x = np.stack([ds.column(c).astype(float)[idx] for c in self.covariates], axis=-1)
            return gates.lin_batch(y, x, arm)
        return gates.means_contrast_batch(y, arm, self.scale)


# --- resampling ---------------------------------------------------------------


class _StratifiedSampler:
    """Draws arm-stratified resamples of one subset as dataset row indices.

    Columns of every index matrix are ordered treated-first, so the arm of
    each column is fixed and given by ``arm``.
    """

    def __init__(self, view: GroupView):
        t = view.treatment
        self.pools = [view.index[t == 1], view.index[t == 0]]
        self.arm = np.concatenate([np.ones(len(self.pools[0]), np.int8), np.zeros(len(self.pools[1]), np.int8)])
        self.identity = np.concatenate(self.pools)[None, :]

    @property
    def n(self) -> int:
        return len(self.arm)

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        parts = [p[rng.integers(0, len(p), size=(size, len(p)))] for p in self.pools if len(p)]
        return np.concatenate(parts, axis=1)


@dataclass
class BootstrapResult:
    replicates: np.ndarray
    sigma_hat: float
    m2_hat: float
    n_failed: int

    @property
    def valid(self) -> np.ndarray:
        return self.replicates[np.isfinite(self.replicates)]


def replicate_moments(replicates: np.ndarray) -> Tuple[float, float]:
    """(sample SD with n-1 denominator, mean of squares) of the finite replicates."""
    r = np.asarray(replicates, dtype=float)
    r = r[np.isfinite(r)]
    if len(r) < 2:
        raise BootstrapDegenerateError("fewer than two valid bootstrap replicates")
    return float(r.std(ddof=1)), float(np.mean(r * r))


def _half_code(half: Half) -> int:
    return 0 if Half(half) is Half.DETECT else 1


def bias_replicates(
    predict: GroupView,
    estimate: GroupView,
    estimator: BiasEstimator,
    n_boot: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, int]:
    """``n_boot`` bootstrap replicates of the bias; failed ones are ``nan``.

    A replicate on which either side is undefined (e.g. a zero control mean)
    is redrawn up to ten times before it counts as failed.
    """
    ps, es = _StratifiedSampler(predict), _StratifiedSampler(estimate)
    chunk = max(1, _CHUNK_CELLS // max(1, ps.n + es.n))
    out = np.empty(n_boot)

    def draw(size):
        pi = ps.draw(rng, size)
        ei = es.draw(rng, size)
        return (
            estimator.model_batch(predict, pi, ps.arm) - estimator.experimental_batch(estimate, ei, es.arm)
        )

    for start in range(0, n_boot, chunk):
        stop = min(n_boot, start + chunk)
        vals = draw(stop - start)
        for _ in range(_MAX_RETRIES):
            bad = ~np.isfinite(vals)
            if not bad.any():
                break
            vals[bad] = draw(int(bad.sum()))
        out[start:stop] = vals
    n_failed = int((~np.isfinite(out)).sum())
    if n_failed > _MAX_FAILED_SHARE * n_boot:
        raise BootstrapDegenerateError(
            f"group {predict.group!r}: {n_failed} of {n_boot} bootstrap replicates failed"
        )
    return out, n_failed


def _subsets(view: GroupView, split: SplitAssignment, half: Half) -> Tuple[GroupView, GroupView]:
    return view.subset(split, Tag.predict(half)), view.subset(split, Tag.estimate(half))


def estimate_group_bias(
    view: GroupView,
    split: SplitAssignment,
    half: Half = Half.DETECT,
    estimator: Optional[BiasEstimator] = None,
) -> float:
    """Collapsed predictions on the half's predict subset minus the GATE on its estimate subset."""
    estimator = estimator or BiasEstimator(scale=view.scale)
    predict, estimate = _subsets(view, split, half)
    return estimator.bias(predict, estimate)


def bootstrap_moments(
    view: GroupView,
    split: SplitAssignment,
    half: Half = Half.DETECT,
    estimator: Optional[BiasEstimator] = None,
    n_boot: int = 999,
    seed: int = 0,
    group_index: Optional[int] = None,
) -> BootstrapResult:
    """Bootstrap SD and mean square of the bias estimate for one group.

    The generator is keyed on ``(seed, group_index, half)``, so results do
    not depend on which other groups are processed or in what order.
    """
    if n_boot < 2:
        raise ValidationError("n_boot must be at least 2")
    estimator = estimator or BiasEstimator(scale=view.scale)
    if group_index is None:
        group_index = view.dataset.group_index(view.group)
    predict, estimate = _subsets(view, split, half)
    # raise the estimator's own errors on the original sample first
    estimator.bias(predict, estimate)
    rng = np.random.default_rng([seed, group_index, _half_code(half)])
    reps, n_failed = bias_replicates(predict, estimate, estimator, n_boot, rng)
    sigma, m2 = replicate_moments(reps)
    return BootstrapResult(reps, sigma, m2, n_failed)


# --- tests --------------------------------------------------------------------


def critical_value(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise InvalidAlphaError(f"alpha must lie in (0, 1), got {alpha}")
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def bonferroni_adjust(alpha: float, n_tests: int) -> float:
    if n_tests < 1:
        raise ValidationError("n_tests must be at least 1")
    return alpha / n_tests


@dataclass(frozen=True)
class BiasEstimate:
    group: str
    b_hat: float
    sigma_hat: float
    m2_hat: float
    z_stat: float
    p_value: float
    n_boot: int
    detected: bool
    alpha: float
    n: int = 0
    n_failed: int = 0
    model_gate: Optional[float] = None
    experimental_gate: Optional[float] = None


@dataclass(frozen=True)
class CrossGroupBias:
    group: str
    value: float
    sigma_hat: float
    z_stat: float
    p_value: float
    detected: bool
    alpha: float


def wald_statistic(value: float, sigma: float, alpha: float, label: str) -> Tuple[float, float, bool]:
    crit = critical_value(alpha)
    if not sigma > 0:
        warnings.warn(f"{label}: zero standard error, reporting no detection", GroupBiasWarning, stacklevel=3)
        return 0.0, 1.0, False
    z = value / sigma
    p = float(2.0 * stats.norm.sf(abs(z)))
    return float(z), p, bool(abs(z) >= crit)


def wald_test(
    group: str,
    b_hat: float,
    sigma_hat: float,
    m2_hat: float,
    alpha: float = 0.05,
    n_boot: int = 0,
    n: int = 0,
    n_failed: int = 0,
    model_gate: Optional[float] = None,
    experimental_gate: Optional[float] = None,
) -> BiasEstimate:
    """Two-sided test of zero group bias: detected iff ``|b / sigma| >= z_{1-alpha/2}``."""
    z, p, detected = wald_statistic(b_hat, sigma_hat, alpha, f"group {group!r}")
    return BiasEstimate(
        group, float(b_hat), float(sigma_hat), float(m2_hat), z, p, n_boot, detected, alpha, n, n_failed,
        model_gate, experimental_gate,
    )


def complement_weights(groups: Sequence[str], sizes: Mapping[str, int], g: str) -> np.ndarray:
    w = np.array([0.0 if k == g else float(sizes[k]) for k in groups])
    return w / w.sum()


def cross_group_bias(
    values: Mapping[str, float],
    sizes: Mapping[str, int],
    replicates: Mapping[str, np.ndarray],
    alpha: float = 0.05,
) -> List[CrossGroupBias]:
    """Each group's bias minus the size-weighted mean bias of all other groups.

    Replicate vectors must be aligned by replicate index; replicate rows with
    a failure in any group are dropped from the SD.
    """
    groups = list(values)
    if len(groups) < 2:
        raise SingleGroupError("cross-group bias needs at least two groups")
    vals = np.array([values[g] for g in groups], dtype=float)
    reps = np.vstack([np.asarray(replicates[g], dtype=float) for g in groups])
    ok = np.isfinite(reps).all(axis=0)
    reps = reps[:, ok]
    out = []
    for i, g in enumerate(groups):
        w = complement_weights(groups, sizes, g)
        value = float(vals[i] - w @ vals)
        diff = reps[i] - w @ reps
        sigma = float(diff.std(ddof=1)) if diff.size >= 2 else 0.0
        z, p, detected = wald_statistic(value, sigma, alpha, f"cross-group {g!r}")
        out.append(CrossGroupBias(g, value, sigma, z, p, detected, alpha))
    return out


@dataclass
class DetectionResult:
    estimates: Dict[str, BiasEstimate]
    cross: List[CrossGroupBias]
    replicates: Dict[str, np.ndarray] = field(repr=False)
    sizes: Dict[str, int]
    estimator: BiasEstimator
    half: Half
    seed: int
    alpha: float

    @property
    def b_hat(self) -> Dict[str, float]:
        return {g: e.b_hat for g, e in self.estimates.items()}


def detect(
    dataset: Dataset,
    split: SplitAssignment,
    estimator: Optional[BiasEstimator] = None,
    half: Half = Half.DETECT,
    n_boot: int = 999,
    seed: int = 0,
    alpha: float = 0.05,
) -> DetectionResult:
    """Bias, bootstrap moments and Wald tests for every group on one half."""
    estimator = estimator or BiasEstimator(scale=dataset.scale)
    half = Half(half)
    critical_value(alpha)
    estimates, reps = {}, {}
    for gi, g in enumerate(dataset.groups):
        view = dataset.view(g)
        predict, estimate = _subsets(view, split, half)
        model = estimator.model_gate(predict).value
        experimental = estimator.experimental_gate(estimate).value
        boot = bootstrap_moments(view, split, half, estimator, n_boot, seed, gi)
        reps[g] = boot.replicates
        estimates[g] = wald_test(
            g, model - experimental, boot.sigma_hat, boot.m2_hat, alpha, n_boot, view.n, boot.n_failed,
            model, experimental,
        )
    sizes = dataset.group_sizes()
    cross = cross_group_bias({g: e.b_hat for g, e in estimates.items()}, sizes, reps, alpha) if len(estimates) > 1 else []
    return DetectionResult(estimates, cross, reps, sizes, estimator, half, seed, alpha)
