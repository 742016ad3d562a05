"""Shrinkage factors and debiasing plans."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .data import Dataset, Half
from .detection import BiasEstimate, DetectionResult, critical_value
from .errors import InvalidAlphaError, UnknownGroupInPlanError, ValidationError

_KINDS = ("none", "naive", "me", "mse+", "mse-", "oracle")
_ALIASES = {
    "nodebias": "none",
    "no-debias": "none",
    "mean-error": "me",
    "meanerror": "me",
    "mse_plus": "mse+",
    "mseplus": "mse+",
    "mse_minus": "mse-",
    "mseminus": "mse-",
}


@dataclass(frozen=True)
class ShrinkageStrategy:
    """A rule mapping detection statistics to a shrinkage factor in [0, 1].

    Build with the class methods, or :meth:`parse` from strings such as
    ``"naive"``, ``"me"``, ``"me:0.01"``, ``"mse+"``, ``"mse-"``, ``"none"``.
    A mean-error strategy without ``alpha`` takes its level from the caller.
    """

    kind: str
    alpha: Optional[float] = None
    b: Optional[float] = None
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown strategy {self.kind!r}")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise InvalidAlphaError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.kind == "oracle" and (self.b is None or self.sigma is None or self.sigma < 0):
            raise ValidationError("oracle strategy needs b and a nonnegative sigma")

    @classmethod
    def no_debias(cls):
        return cls("none")

    @classmethod
    def naive(cls):
        return cls("naive")

    @classmethod
    def mean_error(cls, alpha: Optional[float] = None):
        return cls("me", alpha=alpha)

    @classmethod
    def mse_plus(cls):
        return cls("mse+")

    @classmethod
    def mse_minus(cls):
        return cls("mse-")

    @classmethod
    def oracle_mse(cls, b: float, sigma: float):
        return cls("oracle", b=b, sigma=sigma)

    @classmethod
    def parse(cls, text: str) -> "ShrinkageStrategy":
        name, _, arg = text.strip().lower().partition(":")
        name = _ALIASES.get(name, name)
        if name == "me":
            return cls.mean_error(float(arg) if arg else None)
        if arg:
            raise ValidationError(f"strategy {name!r} takes no argument")
        return cls(name)

    @property
    def name(self) -> str:
        if self.kind == "me" and self.alpha is not None:
            return f"me:{self.alpha:g}"
        if self.kind == "oracle":
            return f"oracle:{self.b:g}:{self.sigma:g}"
        return self.kind

    def with_default_alpha(self, alpha: float) -> "ShrinkageStrategy":
        if self.kind == "me" and self.alpha is None:
            return ShrinkageStrategy("me", alpha=alpha)
        return self


def _clamp(x: float) -> Tuple[float, bool]:
    if x < 0.0:
        return 0.0, True
    if x > 1.0:
        return 1.0, True
    return float(x), False


def compute_gamma(strategy: ShrinkageStrategy, stats: Optional[BiasEstimate] = None) -> Tuple[float, bool]:
    """Shrinkage factor and whether clamping to [0, 1] was needed."""
    kind = strategy.kind
    if kind == "none":
        return 0.0, False
    if kind == "naive":
        return 1.0, False
    if kind == "oracle":
        denom = strategy.sigma**2 + strategy.b**2
        return (0.0, False) if denom == 0 else (strategy.b**2 / denom, False)
    if stats is None:
        raise ValidationError(f"strategy {kind!r} needs detection statistics")
    if kind == "me":
        alpha = strategy.alpha if strategy.alpha is not None else stats.alpha
        crit = critical_value(alpha)
        if not stats.sigma_hat > 0:
            return 0.0, False
        return (1.0 if abs(stats.b_hat / stats.sigma_hat) >= crit else 0.0), False
    if stats.m2_hat <= 0:
        return 0.0, False
    if kind == "mse-":
        return _clamp((stats.m2_hat - stats.sigma_hat**2) / stats.m2_hat)
    return _clamp(stats.b_hat**2 / stats.m2_hat)


@dataclass(frozen=True)
class PlanEntry:
    gamma: float
    b_hat: float
    correction: float
    clamped: bool = False


@dataclass(frozen=True)
class DebiasPlan:
    """Per-group corrections ``gamma * b_hat`` and where they came from.

    ``half`` records which half of the data produced the statistics; the
    evaluation refuses plans built on its hold-out half.
    """

    strategy: str
    entries: Mapping[str, PlanEntry]
    half: Optional[Half] = Half.DETECT
    bounded: bool = True
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.half is not None:
            object.__setattr__(self, "half", Half(self.half))
        for g, e in self.entries.items():
            if self.bounded and not 0.0 <= e.gamma <= 1.0:
                raise ValidationError(f"group {g!r}: gamma {e.gamma} outside [0, 1]")

    @property
    def corrections(self) -> Dict[str, float]:
        return {g: e.correction for g, e in self.entries.items()}

    def correction(self, group: str) -> float:
        try:
            return self.entries[group].correction
        except KeyError:
            raise UnknownGroupInPlanError(f"group {group!r} is not in the plan") from None

    @classmethod
    def from_corrections(
        cls,
        corrections: Mapping[str, float],
        strategy: str = "fixed",
        b_hats: Optional[Mapping[str, float]] = None,
        half: Optional[Half] = None,
    ) -> "DebiasPlan":
        """Plan with given corrections; gamma is backed out when ``b_hats`` is known."""
        entries = {}
        for g, c in corrections.items():
            b = float(b_hats[g]) if b_hats is not None else float(c)
            gamma = float(c) / b if b != 0 else (0.0 if c == 0 else math.nan)
            entries[g] = PlanEntry(gamma=gamma, b_hat=b, correction=float(c))
        return cls(strategy, entries, half=half, bounded=False)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "half": None if self.half is None else self.half.value,
            "bounded": self.bounded,
            "meta": dict(self.meta),
            "groups": {
                g: {"gamma": e.gamma, "b_hat": e.b_hat, "correction": e.correction, "clamped": e.clamped}
                for g, e in self.entries.items()
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DebiasPlan":
        entries = {
            g: PlanEntry(float(e["gamma"]), float(e["b_hat"]), float(e["correction"]), bool(e.get("clamped", False)))
            for g, e in d["groups"].items()
        }
        return cls(d["strategy"], entries, d.get("half"), bool(d.get("bounded", True)), dict(d.get("meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DebiasPlan":
        return cls.from_dict(json.loads(text))


def build_plan(detection: DetectionResult, strategy: ShrinkageStrategy) -> DebiasPlan:
    """Shrinkage plan from detection statistics; mean-error defaults to the detection alpha."""
    name = strategy.name
    strategy = strategy.with_default_alpha(detection.alpha)
    entries = {}
    for g, est in detection.estimates.items():
        gamma, clamped = compute_gamma(strategy, est)
        entries[g] = PlanEntry(gamma, est.b_hat, gamma * est.b_hat, clamped)
    meta = {"alpha": strategy.alpha} if strategy.kind == "me" else {}
    return DebiasPlan(name, entries, half=detection.half, meta=meta)


def debias_predictions(predictions, groups, plan: DebiasPlan) -> np.ndarray:
    """``prediction - correction[group]`` row by row."""
    groups = np.asarray(groups, dtype=object)
    labels, inverse = np.unique(groups.astype(str), return_inverse=True)
    shift = np.array([plan.correction(g) for g in labels], dtype=float)
    return np.asarray(predictions, dtype=float) - shift[inverse]


def apply_debias(dataset: Dataset, plan: DebiasPlan) -> Dataset:
    """Copy of ``dataset`` with every prediction shifted by its group's correction."""
    return dataset.with_predictions(debias_predictions(dataset.cate_pred, dataset.group, plan))
