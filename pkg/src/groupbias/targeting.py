"""Threshold targeting, disagreement between policies, and IPW profit estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from .data import Dataset, ExperimentRow, GroupView
from .errors import DegeneratePropensityError, NonpositiveSigmaError, ValidationError
from .mitigation import DebiasPlan, debias_predictions


@dataclass(frozen=True)
class PolicyEconomics:
    """Revenue per conversion and cost per treatment; treat when lift exceeds R / (R - C)."""

    revenue: float
    cost: float

    def __post_init__(self):
        if not self.revenue > 0:
            raise ValidationError("revenue must be positive")
        if not 0 < self.cost < self.revenue:
            raise ValidationError("cost must lie strictly between 0 and revenue")

    @property
    def threshold(self) -> float:
        return self.revenue / (self.revenue - self.cost)


@dataclass(frozen=True)
class ThresholdPolicy:
    """Treat iff the (optionally debiased) prediction strictly exceeds ``threshold``."""

    threshold: float
    plan: Optional[DebiasPlan] = None

    @classmethod
    def from_economics(cls, economics: PolicyEconomics, plan: Optional[DebiasPlan] = None) -> "ThresholdPolicy":
        return cls(economics.threshold, plan)

    def scores(self, predictions, groups) -> np.ndarray:
        if self.plan is None:
            return np.asarray(predictions, dtype=float)
        return debias_predictions(predictions, groups, self.plan)

    def decide_many(self, predictions, groups) -> np.ndarray:
        return (self.scores(predictions, groups) > self.threshold).astype(np.int8)

    def decisions(self, data: Union[Dataset, GroupView]) -> np.ndarray:
        groups = data.group if isinstance(data, Dataset) else np.full(data.n, data.group, dtype=object)
        return self.decide_many(data.cate_pred, groups)


def decide(policy: ThresholdPolicy, row: ExperimentRow) -> int:
    score = row.cate_pred if policy.plan is None else row.cate_pred - policy.plan.correction(row.group)
    return int(score > policy.threshold)


def top_k_decisions(predictions, groups, share: float) -> np.ndarray:
    """Within each group, treat the ``ceil(share * n_g)`` highest predictions."""
    predictions = np.asarray(predictions, dtype=float)
    groups = np.asarray(groups, dtype=object)
    out = np.zeros(len(predictions), dtype=np.int8)
    for g in np.unique(groups.astype(str)):
        idx = np.flatnonzero(groups == g)
        k = int(math.ceil(share * len(idx)))
        order = np.argsort(-predictions[idx], kind="stable")
        out[idx[order[:k]]] = 1
    return out


# --- disagreement -----------------------------------------------------------


def disagreement_probability(tau_plus_b: float, sigma: float, correction_abs: float, threshold: float) -> float:
    """Probability that a correction of size ``correction_abs`` flips a threshold decision.

    The prediction is taken as Normal(``tau_plus_b``, ``sigma**2``).
    """
    if not sigma > 0:
        raise NonpositiveSigmaError(f"sigma must be positive, got {sigma}")
    c = abs(correction_abs)
    upper = special.ndtr((threshold + c - tau_plus_b) / sigma)
    lower = special.ndtr((threshold - c - tau_plus_b) / sigma)
    return float(upper - lower)


def flip_probability(tau_plus_b: float, sigma: float, correction: float, threshold: float) -> float:
    """Probability that subtracting ``correction`` changes the decision ``pred > threshold``.

    The decision flips only when the prediction lies between ``threshold``
    and ``threshold + correction``, so the sign of the correction matters.
    :func:`disagreement_probability` is the sum of this over ``+c`` and ``-c``.
    """
    if not sigma > 0:
        raise NonpositiveSigmaError(f"sigma must be positive, got {sigma}")
    a = special.ndtr((threshold - tau_plus_b) / sigma)
    b = special.ndtr((threshold + correction - tau_plus_b) / sigma)
    return float(abs(b - a))


@dataclass
class DisagreementShares:
    overall: float
    per_group: Dict[str, float]
    bins: List[Dict[str, float]] = field(default_factory=list)


def _quantile_bins(values: np.ndarray, flags: np.ndarray, n_bins: int) -> List[Dict[str, float]]:
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1))
    which = np.clip(np.searchsorted(edges[1:-1], values, side="left"), 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        m = which == b
        if m.any():
            out.append({"lo": float(edges[b]), "hi": float(edges[b + 1]), "n": int(m.sum()), "share": float(flags[m].mean())})
    return out


def empirical_disagreement_share(
    dataset: Dataset,
    policy_a: ThresholdPolicy,
    policy_b: ThresholdPolicy,
    bin_by: Optional[str] = None,
    n_bins: int = 20,
) -> DisagreementShares:
    """Share of rows on which two policies decide differently.

    ``bin_by="distance"`` adds the share within quantile bins of
    ``|prediction - threshold|`` (threshold of ``policy_a``).
    """
    flags = policy_a.decisions(dataset) != policy_b.decisions(dataset)
    per_group = {g: float(flags[dataset.view(g).index].mean()) for g in dataset.groups}
    bins = []
    if bin_by == "distance":
        bins = _quantile_bins(np.abs(dataset.cate_pred - policy_a.threshold), flags.astype(float), n_bins)
    elif bin_by is not None:
        raise ValidationError(f"unknown binning {bin_by!r}")
    return DisagreementShares(float(flags.mean()), per_group, bins)


def disagreement_over_thresholds(dataset: Dataset, plan: DebiasPlan, thresholds: Sequence[float]) -> List[Dict[str, float]]:
    out = []
    for m in thresholds:
        s = empirical_disagreement_share(dataset, ThresholdPolicy(m), ThresholdPolicy(m, plan))
        out.append({"threshold": float(m), "share": s.overall})
    return out


def disagreement_over_noise(
    dataset: Dataset, plan: DebiasPlan, threshold: float, noise_sds: Sequence[float], seed: int = 0
) -> List[Dict[str, float]]:
    """Disagreement after adding Normal(0, sd^2) noise to every prediction."""
    rng = np.random.default_rng(seed)
    base_noise = rng.standard_normal(dataset.n)
    out = []
    for sd in noise_sds:
        noisy = dataset.with_predictions(dataset.cate_pred + sd * base_noise)
        s = empirical_disagreement_share(noisy, ThresholdPolicy(threshold), ThresholdPolicy(threshold, plan))
        out.append({"noise_sd": float(sd), "share": s.overall})
    return out


# --- IPW profit ---------------------------------------------------------------


@dataclass(frozen=True)
class ProfitEstimate:
    value: float
    variance: float
    n: int
    treated_share: float
    disagreement_share: Optional[float] = None

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)


def _propensity(treatment: np.ndarray, p: Optional[float]) -> float:
    p = float(treatment.mean()) if p is None else float(p)
    if not 0.0 < p < 1.0:
        raise DegeneratePropensityError(f"treatment propensity must lie in (0, 1), got {p}")
    return p


def ipw_terms(outcome, treatment, decisions, economics: PolicyEconomics, p: float) -> np.ndarray:
    """Per-row Horvitz-Thompson profit contributions ``w_j (Y_j R - pi_j C)``."""
    y = np.asarray(outcome, dtype=float)
    t = np.asarray(treatment, dtype=float)
    pi = np.asarray(decisions, dtype=float)
    w = t * pi / p + (1.0 - t) * (1.0 - pi) / (1.0 - p)
    return w * (y * economics.revenue - pi * economics.cost)


def _variance(terms: np.ndarray, method: str) -> float:
    n = len(terms)
    if method == "sandwich":
        return float(np.sum((terms - terms.mean()) ** 2) / n**2)
    if method == "sample":
        return float(terms.var(ddof=1) / n) if n > 1 else 0.0
    raise ValidationError(f"unknown variance method {method!r}")


def ipw_profit(
    view: Union[Dataset, GroupView],
    policy: Union[ThresholdPolicy, np.ndarray],
    economics: PolicyEconomics,
    p: Optional[float] = None,
    variance: str = "sandwich",
    base_decisions: Optional[np.ndarray] = None,
) -> ProfitEstimate:
    """Mean IPW profit of ``policy`` and its robust variance.

    ``policy`` may be a :class:`ThresholdPolicy` or an explicit 0/1 decision
    vector. ``p`` defaults to the observed treated share of ``view``.
    """
    decisions = policy.decisions(view) if isinstance(policy, ThresholdPolicy) else np.asarray(policy)
    t = view.treatment
    p = _propensity(t, p)
    terms = ipw_terms(view.outcome, t, decisions, economics, p)
    dis = None if base_decisions is None else float(np.mean(decisions != base_decisions))
    return ProfitEstimate(float(terms.mean()), _variance(terms, variance), len(terms), float(np.mean(decisions)), dis)


@dataclass
class GroupProfitDelta:
    group: str
    n: int
    base: ProfitEstimate
    debiased: ProfitEstimate
    delta: float
    variance: float


@dataclass
class ProfitDelta:
    groups: Dict[str, GroupProfitDelta]
    delta: float
    variance: float
    base_value: float
    debiased_value: float
    ci: tuple
    relative_change: Optional[float]
    treated_share: float
    disagreement_share: float


def profit_delta(
    dataset: Dataset,
    base_policy: Union[ThresholdPolicy, np.ndarray],
    debiased_policy: Union[ThresholdPolicy, np.ndarray],
    economics: PolicyEconomics,
    p: Optional[float] = None,
    variance: str = "sandwich",
    level: float = 0.95,
) -> ProfitDelta:
    """Per-group and population change in IPW profit from switching policies.

    Within a group the variance is that of the paired per-row differences;
    groups are combined with weights ``N_g / N`` as independent samples.
    """
    def decisions_of(policy):
        return policy.decisions(dataset) if isinstance(policy, ThresholdPolicy) else np.asarray(policy)

    base_all = decisions_of(base_policy)
    deb_all = decisions_of(debiased_policy)
    n_total = dataset.n
    groups = {}
    agg = agg_var = base_v = deb_v = 0.0
    for g in dataset.groups:
        view = dataset.view(g)
        ix = view.index
        pg = _propensity(view.treatment, p)
        tb = ipw_terms(view.outcome, view.treatment, base_all[ix], economics, pg)
        td = ipw_terms(view.outcome, view.treatment, deb_all[ix], economics, pg)
        base = ProfitEstimate(float(tb.mean()), _variance(tb, variance), view.n, float(base_all[ix].mean()))
        deb = ProfitEstimate(
            float(td.mean()), _variance(td, variance), view.n, float(deb_all[ix].mean()),
            float(np.mean(base_all[ix] != deb_all[ix])),
        )
        d = td - tb
        gd = GroupProfitDelta(g, view.n, base, deb, float(d.mean()), _variance(d, variance))
        groups[g] = gd
        w = view.n / n_total
        agg += w * gd.delta
        agg_var += w * w * gd.variance
        base_v += w * base.value
        deb_v += w * deb.value
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * math.sqrt(agg_var)
    return ProfitDelta(
        groups=groups,
        delta=agg,
        variance=agg_var,
        base_value=base_v,
        debiased_value=deb_v,
        ci=(agg - half, agg + half),
        relative_change=None if base_v == 0 else agg / base_v,
        treated_share=float(deb_all.mean()),
        disagreement_share=float(np.mean(base_all != deb_all)),
    )
