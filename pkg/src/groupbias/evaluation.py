"""End-to-end offline evaluation of detection and mitigation.

Statistics from the detect half choose the corrections; a fresh bias
estimate on the mitigate half scores them. Since a correction is a constant
once chosen, the hold-out bootstrap is run once and shifted per strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .calibration import CalibrationFamily, CalibrationFit, fit_calibration
from .data import Dataset, Half, SplitAssignment, four_way_split
from .detection import (
    BiasEstimator,
    CrossGroupBias,
    DetectionResult,
    wald_statistic,
    bonferroni_adjust,
    complement_weights,
    cross_group_bias,
    detect,
)
from .errors import PlanHalfLeakageError, ValidationError
from .mitigation import DebiasPlan, ShrinkageStrategy, build_plan

BASELINE = "none"
METRICS = ("rmse", "rmsed", "mae", "maed", "min_abs", "max_abs")


@dataclass(frozen=True)
class ResidualBias:
    group: str
    strategy: str
    value: float
    sigma_hat: float
    z_stat: float
    p_value: float
    detected: bool
    correction: float
    gamma: float


@dataclass
class ResidualReport:
    strategy: str
    groups: Dict[str, ResidualBias]
    cross: List[CrossGroupBias]

    @property
    def values(self) -> Dict[str, float]:
        return {g: r.value for g, r in self.groups.items()}


def residual_bias(holdout: DetectionResult, plan: DebiasPlan) -> ResidualReport:
    """Fresh hold-out bias minus the plan's fixed correction, with Wald tests.

    ``holdout`` must come from the half the plan was *not* built on.
    """
    if plan.half is not None and plan.half is holdout.half:
        raise PlanHalfLeakageError(
            f"plan {plan.strategy!r} was built on the {plan.half.value} half, which is the evaluation half"
        )
    alpha = holdout.alpha
    out, values, reps = {}, {}, {}
    for g, est in holdout.estimates.items():
        c = plan.correction(g)
        value = est.b_hat - c
        z, p, detected = wald_statistic(value, est.sigma_hat, alpha, f"residual {g!r}")
        out[g] = ResidualBias(g, plan.strategy, value, est.sigma_hat, z, p, detected, c, plan.entries[g].gamma)
        values[g] = value
        reps[g] = holdout.replicates[g] - c
    cross = cross_group_bias(values, holdout.sizes, reps, alpha) if len(values) > 1 else []
    return ResidualReport(plan.strategy, out, cross)


# --- metrics --------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    min_abs: float
    max_abs: float
    min_group: str
    max_group: str
    rmsed: Optional[float] = None
    maed: Optional[float] = None

    def get(self, name: str) -> Optional[float]:
        return getattr(self, name)


def distribution_metrics(residuals: Mapping[str, float], sizes: Mapping[str, int]) -> Metrics:
    """RMSE/MAE of residual bias across groups, their cross-group versions and extremes.

    The cross-group residual of ``g`` subtracts the size-weighted mean of
    the other groups' residuals; it is undefined with a single group.
    """
    groups = list(residuals)
    if not groups:
        raise ValidationError("no residuals")
    r = np.array([residuals[g] for g in groups], dtype=float)
    a = np.abs(r)
    rmsed = maed = None
    if len(groups) > 1:
        d = np.array([r[i] - complement_weights(groups, sizes, g) @ r for i, g in enumerate(groups)])
        rmsed = float(np.sqrt(np.mean(d * d)))
        maed = float(np.mean(np.abs(d)))
    return Metrics(
        rmse=float(np.sqrt(np.mean(r * r))),
        mae=float(np.mean(a)),
        min_abs=float(a.min()),
        max_abs=float(a.max()),
        min_group=groups[int(a.argmin())],
        max_group=groups[int(a.argmax())],
        rmsed=rmsed,
        maed=maed,
    )


def pct_change(value: Optional[float], baseline: Optional[float]) -> Optional[float]:
    if value is None or baseline is None:
        return None
    if baseline == 0:
        return 0.0 if value == 0 else None
    return 100.0 * (value / baseline - 1.0)


@dataclass
class MetricsReport:
    """Metrics per strategy plus percentage change against no debiasing."""

    metrics: Dict[str, Dict[str, Optional[float]]]
    sd: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    extremes: Dict[str, Dict[str, str]] = field(default_factory=dict)
    n_runs: int = 1

    @property
    def strategies(self) -> List[str]:
        return list(self.metrics)

    def pct_change(self, strategy: str, metric: str = "rmse") -> Optional[float]:
        return pct_change(self.metrics[strategy][metric], self.metrics[BASELINE][metric])

    def pct_changes(self) -> Dict[str, Dict[str, Optional[float]]]:
        return {s: {m: self.pct_change(s, m) for m in METRICS} for s in self.metrics}

    @classmethod
    def from_metrics(cls, per_strategy: Mapping[str, Metrics]) -> "MetricsReport":
        if BASELINE not in per_strategy:
            raise ValidationError("metrics report needs the no-debias baseline")
        return cls(
            metrics={s: {k: m.get(k) for k in METRICS} for s, m in per_strategy.items()},
            extremes={s: {"min": m.min_group, "max": m.max_group} for s, m in per_strategy.items()},
        )


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean and SD of each metric over runs (folds or seeds); pct change uses the means."""
    if not reports:
        raise ValidationError("nothing to average")
    if len(reports) == 1:
        return reports[0]
    mean, sd = {}, {}
    for s in reports[0].metrics:
        mean[s], sd[s] = {}, {}
        for m in METRICS:
            vals = [r.metrics[s][m] for r in reports]
            if any(v is None for v in vals):
                mean[s][m] = sd[s][m] = None
                continue
            mean[s][m] = float(np.mean(vals))
            sd[s][m] = float(np.std(vals, ddof=1))
    return MetricsReport(mean, sd, {}, sum(r.n_runs for r in reports))


# --- orchestration --------------------------------------------------------


@dataclass(frozen=True)
class EvaluationConfig:
    estimator: Optional[BiasEstimator] = None
    strategies: Sequence[ShrinkageStrategy] = (
        ShrinkageStrategy.naive(),
        ShrinkageStrategy.mean_error(),
        ShrinkageStrategy.mse_minus(),
        ShrinkageStrategy.mse_plus(),
    )
    calibration: Sequence[CalibrationFamily] = ()
    alpha: float = 0.05
    bonferroni: bool = True
    n_boot: int = 999
    seed: int = 0
    estimation_fractions: object = 0.5
    folds: int = 1

    def test_level(self, n_groups: int) -> float:
        return bonferroni_adjust(self.alpha, 4 * n_groups) if self.bonferroni else self.alpha


@dataclass
class FoldResult:
    split: SplitAssignment
    detection: DetectionResult
    holdout: DetectionResult
    plans: Dict[str, DebiasPlan]
    residuals: Dict[str, ResidualReport]
    calibration: Dict[str, CalibrationFit]
    metrics: MetricsReport
    population_metrics: Optional[MetricsReport] = None


@dataclass
class EvaluationResult:
    config: EvaluationConfig
    alpha_test: float
    folds: List[FoldResult]
    metrics: MetricsReport
    population_metrics: Optional[MetricsReport] = None

    @property
    def first(self) -> FoldResult:
        return self.folds[0]


def _calibration_plan(family: CalibrationFamily, detection: DetectionResult):
    est = detection.estimates
    predicted = {g: e.model_gate for g, e in est.items()}
    experimental = {g: e.experimental_gate for g, e in est.items()}
    weights = {g: 1.0 / e.sigma_hat**2 if e.sigma_hat > 0 else math.inf for g, e in est.items()}
    if any(math.isinf(w) for w in weights.values()):
        weights = None
    fit = fit_calibration(family, predicted, experimental, weights)
    plan = DebiasPlan.from_corrections(
        fit.corrections(), strategy=f"calibration:{family.value}", b_hats=detection.b_hat, half=detection.half
    )
    return fit, plan


def _run_fold(
    dataset: Dataset,
    split: SplitAssignment,
    config: EvaluationConfig,
    alpha_test: float,
    true_gates: Optional[Mapping[str, float]],
) -> FoldResult:
    detection = detect(dataset, split, config.estimator, Half.DETECT, config.n_boot, config.seed, alpha_test)
    holdout = detect(dataset, split, config.estimator, Half.MITIGATE, config.n_boot, config.seed, alpha_test)

    plans = {BASELINE: build_plan(detection, ShrinkageStrategy.no_debias())}
    for s in config.strategies:
        plan = build_plan(detection, s)
        plans[plan.strategy] = plan
    fits = {}
    for fam in config.calibration:
        fit, plan = _calibration_plan(CalibrationFamily(fam), detection)
        fits[plan.strategy] = fit
        plans[plan.strategy] = plan

    residuals = {name: residual_bias(holdout, plan) for name, plan in plans.items()}
    metrics = MetricsReport.from_metrics(
        {name: distribution_metrics(r.values, holdout.sizes) for name, r in residuals.items()}
    )
    population = None
    if true_gates is not None:
        # hold-out model-implied GATE against the true GATE instead of its estimate
        true_bias = {g: e.model_gate - true_gates[g] for g, e in holdout.estimates.items()}
        population = MetricsReport.from_metrics(
            {
                name: distribution_metrics({g: true_bias[g] - plan.correction(g) for g in true_bias}, holdout.sizes)
                for name, plan in plans.items()
            }
        )
    return FoldResult(split, detection, holdout, plans, residuals, fits, metrics, population)


def evaluate_end_to_end(
    dataset: Dataset,
    config: EvaluationConfig = EvaluationConfig(),
    split: Optional[SplitAssignment] = None,
    true_gates: Optional[Mapping[str, float]] = None,
) -> EvaluationResult:
    """Split, detect, mitigate under each strategy, and score on hold-out data.

    With ``folds > 1`` the four-way split is redrawn with seeds
    ``seed, seed + 1, ...`` and metrics are averaged. ``true_gates`` maps
    groups to their true GATE (simulation only) and adds population metrics,
    which score the hold-out model-implied GATE against the truth.
    """
    if config.folds < 1:
        raise ValidationError("folds must be at least 1")
    alpha_test = config.test_level(len(dataset.groups))
    folds = []
    for f in range(config.folds):
        if split is not None and f == 0:
            fold_split = split
        else:
            fold_split = four_way_split(dataset, config.estimation_fractions, config.seed + f)
        folds.append(_run_fold(dataset, fold_split, config, alpha_test, true_gates))
    metrics = average_reports([f.metrics for f in folds])
    population = average_reports([f.population_metrics for f in folds]) if true_gates is not None else None
    return EvaluationResult(config, alpha_test, folds, metrics, population)
