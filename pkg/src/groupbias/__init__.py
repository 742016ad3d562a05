"""Detect, test and mitigate group-level bias in CATE predictions using experimental data."""

from .calibration import CalibrationFamily, CalibrationFit, ImpliedGamma, fit_calibration, implied_gamma, pava
from .data import (
    Dataset,
    EffectScale,
    ExperimentRow,
    GroupView,
    Half,
    SplitAssignment,
    Tag,
    four_way_split,
    load_dataset,
    quantile_grouping,
    write_dataset,
)
from .detection import (
    BiasEstimate,
    BiasEstimator,
    BootstrapResult,
    CrossGroupBias,
    DetectionResult,
    bonferroni_adjust,
    bootstrap_moments,
    critical_value,
    cross_group_bias,
    detect,
    estimate_group_bias,
    wald_test,
)
from .errors import GroupBiasError, GroupBiasWarning, ValidationError
from .evaluation import (
    EvaluationConfig,
    EvaluationResult,
    Metrics,
    MetricsReport,
    ResidualBias,
    distribution_metrics,
    evaluate_end_to_end,
    residual_bias,
)
from .gates import (
    CollapseWeights,
    GateEstimate,
    converted_only_gate,
    estimate_collapse_weights,
    estimate_gate_cuped,
    estimate_gate_lin,
    estimate_gate_means,
    model_implied_gate,
    ratio_se_delta,
)
from .mitigation import DebiasPlan, PlanEntry, ShrinkageStrategy, apply_debias, build_plan, compute_gamma
from .simulation import Population, SimConfig, SimSample, draw_sample, generate_population
from .targeting import (
    PolicyEconomics,
    ProfitDelta,
    ProfitEstimate,
    ThresholdPolicy,
    decide,
    disagreement_probability,
    empirical_disagreement_share,
    flip_probability,
    ipw_profit,
    profit_delta,
    top_k_decisions,
)

__version__ = "0.1.0"
