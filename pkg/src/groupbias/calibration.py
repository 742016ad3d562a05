"""Pooled regression calibration of model-implied GATEs across groups.

These are benchmarks: one map from predicted to experimental group effects
is fitted across all groups, and the per-group shrinkage it implies is
backed out for comparison with the group-wise strategies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .errors import NonpositiveGateForLogFamilyError, TooFewGroupsError, ValidationError, ZeroWeightError


class CalibrationFamily(str, Enum):
    AFFINE = "affine"
    LOG_AFFINE = "log_affine"
    ISOTONIC = "isotonic"
    LOG_ISOTONIC = "log_isotonic"

    @property
    def on_log_scale(self) -> bool:
        return self in (CalibrationFamily.LOG_AFFINE, CalibrationFamily.LOG_ISOTONIC)


def pava(y, w=None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit to ``y`` (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if y.shape != w.shape:
        raise ValidationError("values and weights differ in length")
    if (w <= 0).any():
        raise ZeroWeightError("PAVA weights must be positive")
    means: List[float] = []
    weights: List[float] = []
    counts: List[int] = []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), weights.pop(), counts.pop()
            m1, w1, c1 = means.pop(), weights.pop(), counts.pop()
            wt = w1 + w2
            means.append((w1 * m1 + w2 * m2) / wt)
            weights.append(wt)
            counts.append(c1 + c2)
    return np.repeat(means, counts)


def _isotonic(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, List[Tuple[float, float]]]:
    """Isotonic fit of y on x; tied x values are pooled before PAVA."""
    order = np.argsort(x, kind="stable")
    xs, ys, ws = x[order], y[order], w[order]
    ux, first, inverse = np.unique(xs, return_index=True, return_inverse=True)
    wsum = np.bincount(inverse, weights=ws)
    ymean = np.bincount(inverse, weights=ws * ys) / wsum
    levels = pava(ymean, wsum)
    fitted = np.empty_like(y)
    fitted[order] = levels[inverse]
    return fitted, [(float(a), float(b)) for a, b in zip(ux, levels)]


def _wls_line(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> Tuple[float, float]:
    if len(np.unique(x)) < 2:
        raise TooFewGroupsError("affine calibration needs at least two distinct predicted GATEs")
    sw = np.sqrt(w)
    design = np.column_stack([np.ones_like(x), x]) * sw[:, None]
    (a, b), *_ = np.linalg.lstsq(design, y * sw, rcond=None)
    return float(a), float(b)


@dataclass(frozen=True)
class CalibrationFit:
    family: CalibrationFamily
    groups: Tuple[str, ...]
    predicted: Mapping[str, float]
    experimental: Mapping[str, float]
    weights: Mapping[str, float]
    fitted: Mapping[str, float]
    parameters: Mapping[str, object] = field(default_factory=dict)

    def corrections(self) -> Dict[str, float]:
        """Shift each group's predictions would receive: predicted minus calibrated."""
        return {g: self.predicted[g] - self.fitted[g] for g in self.groups}


def fit_calibration(
    family,
    predicted_gates: Mapping[str, float],
    experimental_gates: Mapping[str, float],
    weights: Optional[Mapping[str, float]] = None,
) -> CalibrationFit:
    """Regress experimental GATEs on predicted GATEs across groups.

    Weights default to 1; callers typically pass inverse variances.
    Log families fit on log GATEs and map back with ``exp``.
    """
    family = CalibrationFamily(family)
    groups = tuple(predicted_gates)
    if len(groups) < 2:
        raise TooFewGroupsError("calibration needs at least two groups")
    if set(experimental_gates) != set(groups):
        raise ValidationError("predicted and experimental GATEs cover different groups")
    x = np.array([predicted_gates[g] for g in groups], dtype=float)
    y = np.array([experimental_gates[g] for g in groups], dtype=float)
    w = np.ones(len(groups)) if weights is None else np.array([weights[g] for g in groups], dtype=float)
    if not (np.isfinite(w) & (w > 0)).all():
        raise ZeroWeightError("calibration weights must be positive and finite")

    if family.on_log_scale:
        if (x <= 0).any() or (y <= 0).any():
            raise NonpositiveGateForLogFamilyError(f"{family.value} calibration needs strictly positive GATEs")
        x, y = np.log(x), np.log(y)

    if family in (CalibrationFamily.AFFINE, CalibrationFamily.LOG_AFFINE):
        a, b = _wls_line(x, y, w)
        fitted = a + b * x
        params = {"intercept": a, "slope": b}
    else:
        fitted, steps = _isotonic(x, y, w)
        params = {"breakpoints": steps}

    if family.on_log_scale:
        fitted = np.exp(fitted)
    return CalibrationFit(
        family=family,
        groups=groups,
        predicted=dict(predicted_gates),
        experimental=dict(experimental_gates),
        weights=dict(zip(groups, w.tolist())),
        fitted=dict(zip(groups, fitted.tolist())),
        parameters=params,
    )


@dataclass(frozen=True)
class ImpliedGamma:
    gamma: Optional[float]
    outside_unit_interval: bool


def implied_gamma(
    fit: CalibrationFit,
    b_hats: Mapping[str, float],
    experimental_gates: Optional[Mapping[str, float]] = None,
) -> Dict[str, ImpliedGamma]:
    """Shrinkage factor equivalent to the calibrated GATE: ``1 + (exp - cal) / b_hat``.

    Left unclamped; ``gamma`` is ``None`` where ``b_hat`` is zero.
    """
    exp = fit.experimental if experimental_gates is None else experimental_gates
    out = {}
    for g in fit.groups:
        b = float(b_hats[g])
        if b == 0:
            out[g] = ImpliedGamma(None, False)
            continue
        gamma = 1.0 + (exp[g] - fit.fitted[g]) / b
        out[g] = ImpliedGamma(gamma, not 0.0 <= gamma <= 1.0)
    return out
