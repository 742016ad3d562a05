"""Group-level treatment effects: experimental estimates and collapsed predictions.

Every estimator has a batch core that works on ``(B, n)`` matrices whose
columns have a fixed treatment arm (``arm``). Point estimates call the core
with ``B = 1``; the bootstrap calls it with one row per replicate. Cores
return ``nan`` where the estimate is undefined instead of raising.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .data import EffectScale, GroupView
from .errors import (
    EmptyArmError,
    EmptySplitError,
    GroupBiasWarning,
    NonBinaryOutcomeError,
    NonpositiveBaselineError,
    NoPositiveOutcomesError,
    RankDeficientDesignError,
    ValidationError,
    ZeroControlMeanError,
    ZeroVarianceControlError,
)

logger = logging.getLogger(__name__)


class GateMethod(str, Enum):
    DIFF_MEANS = "diff_means"
    RATIO_MEANS = "ratio_means"
    LIN = "lin"
    CUPED = "cuped"
    MODEL_COLLAPSE = "model_collapse"
    CONVERTED_ONLY = "converted_only"


@dataclass(frozen=True)
class GateEstimate:
    value: float
    scale: EffectScale
    method: GateMethod
    n_treated: int
    n_control: int
    analytic_se: Optional[float] = None


@dataclass(frozen=True)
class CollapseWeights:
    group: str
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if (w < 0).any():
            raise ValidationError("collapse weights must be nonnegative")


# --- batch cores ------------------------------------------------------------


def means_contrast_batch(y: np.ndarray, arm: np.ndarray, scale: EffectScale) -> np.ndarray:
    m1 = y[:, arm == 1].mean(axis=1)
    m0 = y[:, arm == 0].mean(axis=1)
    if EffectScale(scale) is EffectScale.ADDITIVE:
        return m1 - m0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(m0 > 0, m1 / m0, np.nan)


def cuped_batch(y: np.ndarray, z: np.ndarray, arm: np.ndarray) -> np.ndarray:
    yc = y - y.mean(axis=1, keepdims=True)
    zc = z - z.mean(axis=1, keepdims=True)
    var_z = (zc * zc).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(var_z > 0, (yc * zc).sum(axis=1) / var_z, np.nan)
    adj = y - theta[:, None] * z
    return adj[:, arm == 1].mean(axis=1) - adj[:, arm == 0].mean(axis=1)


def _arm_adjusted_mean(y: np.ndarray, x: np.ndarray, x_bar: np.ndarray) -> float:
    """Mean of y predicted at ``x_bar`` by an OLS fit of y on x within one arm."""
    if x.shape[1] == 0:
        return y.mean()
    xc = x - x.mean(axis=0)
    slope, _, rank, _ = np.linalg.lstsq(xc, y - y.mean(), rcond=None)
    if rank < x.shape[1]:
        raise RankDeficientDesignError(f"covariate design has rank {rank} < {x.shape[1]}")
    return y.mean() + (x_bar - x.mean(axis=0)) @ slope


def lin_batch(y: np.ndarray, x: np.ndarray, arm: np.ndarray) -> np.ndarray:
    """Lin's interacted regression, solved arm by arm.

    The treatment coefficient of ``Y ~ 1 + T + Xc + T:Xc`` equals the
    difference between the two arms' regression predictions at the pooled
    covariate mean, which is what this computes for each replicate row.
    ``x`` is ``(B, n, p)``.
    """
    out = np.empty(y.shape[0])
    t1, t0 = arm == 1, arm == 0
    for b in range(y.shape[0]):
        xb = x[b]
        x_bar = xb.mean(axis=0)
        try:
            out[b] = _arm_adjusted_mean(y[b, t1], xb[t1], x_bar) - _arm_adjusted_mean(y[b, t0], xb[t0], x_bar)
        except (RankDeficientDesignError, np.linalg.LinAlgError):
            out[b] = np.nan
    return out


def weighted_collapse_batch(tau: np.ndarray, mu0: Optional[np.ndarray]) -> np.ndarray:
    if mu0 is None:
        return tau.mean(axis=1)
    total = mu0.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(total > 0, (mu0 * tau).sum(axis=1) / total, np.nan)


def converted_only_batch(tau: np.ndarray, y: np.ndarray, arm: np.ndarray) -> np.ndarray:
    t1, t0 = arm == 1, arm == 0
    n1 = y[:, t1].sum(axis=1)
    n0 = y[:, t0].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam1 = (y[:, t1] * tau[:, t1]).sum(axis=1) / n1
        lam0 = (y[:, t0] * tau[:, t0]).sum(axis=1) / n0
        value = (n0 * lam0**2 + n1 * lam1) / (n0 * lam0 + n1)
    return np.where((n1 > 0) & (n0 > 0), value, np.nan)


# --- point estimators on views ----------------------------------------------


def _require_arms(view: GroupView) -> None:
    if view.n == 0:
        raise EmptySplitError(f"group {view.group!r}: no rows")
    if view.n_treated == 0 or view.n_control == 0:
        raise EmptyArmError(
            f"group {view.group!r}: {view.n_treated} treated and {view.n_control} control rows"
        )


def _one(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=float)[None, :]


def estimate_gate_means(view: GroupView, scale: Optional[EffectScale] = None) -> GateEstimate:
    """Contrast in arm means: difference (additive) or ratio (relative)."""
    scale = EffectScale(scale or view.scale)
    _require_arms(view)
    arm = view.treatment
    if scale is EffectScale.RELATIVE and view.outcome[arm == 0].mean() <= 0:
        raise ZeroControlMeanError(f"group {view.group!r}: control mean is not positive")
    value = float(means_contrast_batch(_one(view.outcome), arm, scale)[0])
    method = GateMethod.DIFF_MEANS if scale is EffectScale.ADDITIVE else GateMethod.RATIO_MEANS
    return GateEstimate(value, scale, method, view.n_treated, view.n_control)


def _covariates(view: GroupView, columns: Sequence[str]) -> np.ndarray:
    if not columns:
        return np.empty((view.n, 0))
    x = np.column_stack([view.numeric(c) for c in columns])
    if not np.isfinite(x).all():
        raise ValidationError(f"group {view.group!r}: non-finite covariates")
    return x


def estimate_gate_lin(view: GroupView, covariate_columns: Sequence[str] = ()) -> GateEstimate:
    """Additive GATE from Lin's fully interacted regression adjustment."""
    _require_arms(view)
    if view.scale is not EffectScale.ADDITIVE:
        raise ValidationError("Lin adjustment is defined on the additive scale only")
    x = _covariates(view, covariate_columns)
    arm = view.treatment
    x_bar = x.mean(axis=0)
    y = view.outcome
    value = _arm_adjusted_mean(y[arm == 1], x[arm == 1], x_bar) - _arm_adjusted_mean(y[arm == 0], x[arm == 0], x_bar)
    return GateEstimate(float(value), EffectScale.ADDITIVE, GateMethod.LIN, view.n_treated, view.n_control)


def estimate_gate_cuped(view: GroupView, control_column: str) -> GateEstimate:
    """Additive GATE on ``Y - theta * Z`` with theta = Cov(Y, Z) / Var(Z) pooled over the group."""
    _require_arms(view)
    if view.scale is not EffectScale.ADDITIVE:
        raise ValidationError("CUPED adjustment is defined on the additive scale only")
    z = view.numeric(control_column)
    if not np.isfinite(z).all():
        raise ValidationError(f"group {view.group!r}: non-finite control variable")
    if np.all(z == z[0]):
        raise ZeroVarianceControlError(f"group {view.group!r}: control {control_column!r} has zero variance")
    value = float(cuped_batch(_one(view.outcome), _one(z), view.treatment)[0])
    return GateEstimate(value, EffectScale.ADDITIVE, GateMethod.CUPED, view.n_treated, view.n_control)


def estimate_collapse_weights(view: GroupView, scale: Optional[EffectScale] = None) -> CollapseWeights:
    """Weights that collapse CATEs to the GATE: 1 (additive) or mu0 / mean(mu0) (relative)."""
    scale = EffectScale(scale or view.scale)
    if scale is EffectScale.ADDITIVE:
        return CollapseWeights(view.group, np.ones(view.n))
    mu0 = view.mu0_pred
    if mu0 is None:
        warnings.warn(
            f"group {view.group!r}: no mu0_pred column; collapsing relative CATEs with uniform weights",
            GroupBiasWarning,
            stacklevel=2,
        )
        logger.warning("group %r: relative-scale collapse without mu0_pred, using W=1", view.group)
        return CollapseWeights(view.group, np.ones(view.n))
    if view.n == 0:
        raise EmptySplitError(f"group {view.group!r}: no rows")
    if (mu0 < 0).any() or mu0.mean() <= 0:
        raise NonpositiveBaselineError(f"group {view.group!r}: baseline predictions must be nonnegative with positive mean")
    w = mu0 / mu0.mean()
    return CollapseWeights(view.group, w / w.mean())


def model_implied_gate(view: GroupView, weights: Optional[CollapseWeights] = None) -> GateEstimate:
    """Weighted mean of CATE predictions over the view's rows."""
    if view.n == 0:
        raise EmptySplitError(f"group {view.group!r}: no rows to collapse")
    if weights is None:
        weights = estimate_collapse_weights(view)
    w = np.asarray(weights.weights, dtype=float)
    if len(w) != view.n:
        raise ValidationError(f"{len(w)} weights for {view.n} rows")
    value = float(np.sum(w * view.cate_pred) / np.sum(w))
    return GateEstimate(value, view.scale, GateMethod.MODEL_COLLAPSE, view.n_treated, view.n_control)


def converted_only_gate(view: GroupView) -> GateEstimate:
    """Model-implied relative GATE computed from positive-outcome rows only."""
    y = view.outcome
    if ((y != 0) & (y != 1)).any():
        raise NonBinaryOutcomeError(f"group {view.group!r}: converted-only estimator needs binary outcomes")
    arm = view.treatment
    for a, name in ((1, "treated"), (0, "control")):
        if not (y[arm == a] == 1).any():
            raise NoPositiveOutcomesError(f"group {view.group!r}: no positive outcomes among {name} rows")
    value = float(converted_only_batch(_one(view.cate_pred), _one(y), arm)[0])
    return GateEstimate(value, EffectScale.RELATIVE, GateMethod.CONVERTED_ONLY, view.n_treated, view.n_control)


def ratio_se_delta(view: GroupView) -> float:
    """Delta-method standard error of the ratio of arm means (independent arms)."""
    _require_arms(view)
    y, arm = view.outcome, view.treatment
    y1, y0 = y[arm == 1], y[arm == 0]
    mu1, mu0 = y1.mean(), y0.mean()
    if mu0 <= 0:
        raise ZeroControlMeanError(f"group {view.group!r}: control mean is not positive")
    v1 = y1.var() / len(y1)
    v0 = y0.var() / len(y0)
    grad = np.array([1.0 / mu0, -mu1 / mu0**2])
    return float(np.sqrt(grad[0] ** 2 * v1 + grad[1] ** 2 * v0))
