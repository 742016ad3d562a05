"""Synthetic marketing-style experiments with known group effects and injected prediction bias."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from .data import Dataset, EffectScale, SplitAssignment, four_way_split
from .errors import InvalidDistributionParamsError, SampleTooLargeError

_CHUNK = 1 << 16
GROUP_LABELS = ("G1", "G2", "G3", "G4", "G5")


@dataclass(frozen=True)
class SimConfig:
    """Parameters of the simulated population.

    ``zeta`` scales covariate heterogeneity, ``beta`` is the systematic
    prediction shift per group and ``rho`` scales prediction noise relative
    to the group's outcome variance. ``x2_scale`` is the scale of the
    shape-2 gamma covariate; the default 5 reads Gamma(2, 0.2) as shape
    and rate.
    """

    n_population: int = 1_000_000
    group_props: Tuple[float, ...] = (0.45, 0.20, 0.15, 0.12, 0.08)
    zeta: Tuple[float, ...] = (1.0, 1.4, 0.8, 1.2, 0.6)
    beta: Tuple[float, ...] = (0.05, -0.20, 0.30, -0.10, 0.25)
    rho: Tuple[float, ...] = (0.5, 1.0, 1.5, 1.0, 2.0)
    estimation_fractions: Tuple[float, ...] = (0.55, 0.35, 0.30, 0.25, 0.50)
    seed: int = 0
    sample_size: int = 50_000
    groups: Optional[Tuple[str, ...]] = None
    x2_scale: float = 5.0

    def __post_init__(self):
        k = len(self.group_props)
        for name in ("zeta", "beta", "rho", "estimation_fractions"):
            if len(getattr(self, name)) != k:
                raise InvalidDistributionParamsError(f"{name} needs {k} entries, one per group")
        props = np.asarray(self.group_props, dtype=float)
        if (props < 0).any() or abs(props.sum() - 1.0) > 1e-12:
            raise InvalidDistributionParamsError("group_props must be nonnegative and sum to 1")
        if (np.asarray(self.rho, dtype=float) < 0).any():
            raise InvalidDistributionParamsError("rho must be nonnegative")
        if self.n_population < 1:
            raise InvalidDistributionParamsError("n_population must be positive")
        if not self.x2_scale > 0:
            raise InvalidDistributionParamsError("x2_scale must be positive")
        if self.groups is not None and len(self.groups) != k:
            raise InvalidDistributionParamsError("groups needs one label per proportion")

    @property
    def labels(self) -> Tuple[str, ...]:
        if self.groups is not None:
            return tuple(self.groups)
        if len(self.group_props) <= len(GROUP_LABELS):
            return GROUP_LABELS[: len(self.group_props)]
        return tuple(f"G{i + 1}" for i in range(len(self.group_props)))

    @classmethod
    def no_bias(cls, **kw) -> "SimConfig":
        """Predictions equal the true CATE plus noise, with no systematic shift."""
        kw.setdefault("beta", (0.0,) * len(kw.get("group_props", cls.group_props)))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "n_population": self.n_population,
            "group_props": list(self.group_props),
            "zeta": list(self.zeta),
            "beta": list(self.beta),
            "rho": list(self.rho),
            "estimation_fractions": list(self.estimation_fractions),
            "seed": self.seed,
            "sample_size": self.sample_size,
            "groups": list(self.labels),
            "x2_scale": self.x2_scale,
        }


def largest_remainder(total: int, props: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``total * props``."""
    raw = total * np.asarray(props, dtype=float)
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


@dataclass
class Population:
    """Simulated population with its hidden truth.

    ``true_gate`` aggregates the true ratio effect with the correct
    collapse weights; ``model_gate`` does the same for the predictions, so
    ``true_bias`` is the group bias an infinite experiment would measure.
    """

    dataset: Dataset
    tau: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    true_gate: Dict[str, float]
    model_gate: Dict[str, float]
    true_bias: Dict[str, float]
    config: SimConfig


def _covariates(rng: np.random.Generator, n: int, x2_scale: float):
    x1 = rng.beta(2.0, 18.0, n)
    x2 = rng.gamma(2.0, x2_scale, n)
    a = (0.0 - 0.05) / 0.1
    x3 = stats.truncnorm.rvs(a, np.inf, loc=0.05, scale=0.1, size=n, random_state=rng)
    return x1, x2, x3


def linear_predictors(x1, x2, x3, zeta):
    eta0 = 0.1 + zeta * (0.5 * x1 + 0.25 * x1**2 + 0.3 * x2 + 0.2 * x2 * x3)
    eta1 = eta0 * (1.0 + np.abs(zeta * (0.75 * x1 + 0.9 * x2 + 1.2 * x3)))
    return eta0, eta1


def generate_population(config: SimConfig = SimConfig()) -> Population:
    """Draw the full population.

    Rows are generated in fixed-size chunks, each with its own generator
    keyed by ``(seed, chunk)``, so output does not depend on how chunks are
    scheduled. Noise variance uses each group's outcome variance, computed
    before predictions are built.
    """
    n = config.n_population
    labels = config.labels
    counts = largest_remainder(n, config.group_props)
    gid = np.repeat(np.arange(len(labels)), counts)
    zeta = np.asarray(config.zeta, dtype=float)[gid]

    x1, x2, x3 = (np.empty(n) for _ in range(3))
    t = np.empty(n, dtype=np.int8)
    u_y = np.empty(n)
    z_eps = np.empty(n)
    for c, start in enumerate(range(0, n, _CHUNK)):
        sl = slice(start, min(start + _CHUNK, n))
        m = sl.stop - sl.start
        rng = np.random.default_rng([config.seed, c])
        x1[sl], x2[sl], x3[sl] = _covariates(rng, m, config.x2_scale)
        t[sl] = rng.random(m) < 0.5
        u_y[sl] = rng.random(m)
        z_eps[sl] = rng.standard_normal(m)

    eta0, eta1 = linear_predictors(x1, x2, x3, zeta)
    p0, p1 = special.expit(eta0), special.expit(eta1)
    y = (u_y < np.where(t == 1, p1, p0)).astype(float)
    tau = p1 / p0

    beta = np.asarray(config.beta, dtype=float)
    rho = np.asarray(config.rho, dtype=float)
    var_y = np.array([y[gid == k].var() if counts[k] else 0.0 for k in range(len(labels))])
    eps = np.sqrt(rho * var_y)[gid] * z_eps
    cate_pred = tau + beta[gid] + eps

    true_gate, model_gate, true_bias = {}, {}, {}
    for k, g in enumerate(labels):
        m = gid == k
        if not m.any():
            continue
        w = p0[m]
        true_gate[g] = float(p1[m].mean() / w.mean())
        model_gate[g] = float(np.sum(w * cate_pred[m]) / w.sum())
        true_bias[g] = model_gate[g] - true_gate[g]

    group = np.asarray(labels, dtype=object)[gid]
    dataset = Dataset(
        group=group,
        treatment=t,
        outcome=y,
        cate_pred=cate_pred,
        mu0_pred=p0,
        aux={"X1": x1, "X2": x2, "X3": x3},
        scale=EffectScale.RELATIVE,
    )
    return Population(dataset, tau, p0, p1, true_gate, model_gate, true_bias, config)


@dataclass
class SimSample:
    dataset: Dataset
    split: SplitAssignment
    rows: np.ndarray
    true_gates: Dict[str, float] = field(default_factory=dict)


def draw_sample(population: Population, n: Optional[int] = None, seed: int = 0) -> SimSample:
    """Group-stratified sample without replacement, then the four-way split.

    ``rows`` indexes the population; ``true_gates`` carries its true GATEs.
    """
    config = population.config
    n = config.sample_size if n is None else int(n)
    ds = population.dataset
    if n > ds.n:
        raise SampleTooLargeError(f"sample of {n} rows requested from a population of {ds.n}")
    sizes = ds.group_sizes()
    labels = [g for g in config.labels if g in sizes]
    props = np.array([sizes[g] for g in labels], dtype=float) / ds.n
    want = largest_remainder(n, props)
    rng = np.random.default_rng(seed)
    picks = []
    for g, k in zip(labels, want):
        members = ds.view(g).index
        picks.append(rng.choice(members, size=int(min(k, len(members))), replace=False))
    rows = np.concatenate(picks)
    sample = ds.take(rows).replace(unit_id=rows)
    fractions = dict(zip(config.labels, config.estimation_fractions))
    split = four_way_split(sample, {g: fractions[g] for g in sample.groups}, seed)
    return SimSample(sample, split, rows, dict(population.true_gate))
