"""Experiment datasets: ingestion, validation, grouping and sample splitting.

A :class:`Dataset` is a column store of numpy arrays that are made read-only
at construction, so views can be shared freely between workers.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import IO, Dict, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import (
    DegenerateScoreError,
    GroupBiasWarning,
    GroupTooSmallError,
    MissingColumnError,
    NonBinaryOutcomeError,
    NonBinaryTreatmentError,
    NonpositivePredictionError,
    UnparseableCellError,
    ValidationError,
)

REQUIRED_COLUMNS = ("group", "treatment", "outcome", "cate_pred")
OPTIONAL_COLUMNS = ("mu0_pred", "unit_id")


class EffectScale(str, Enum):
    ADDITIVE = "additive"
    RELATIVE = "relative"


class Half(str, Enum):
    DETECT = "detect"
    MITIGATE = "mitigate"


class Tag(IntEnum):
    DETECT_PREDICT = 0
    DETECT_ESTIMATE = 1
    MITIGATE_PREDICT = 2
    MITIGATE_ESTIMATE = 3

    @classmethod
    def predict(cls, half: Half) -> "Tag":
        return cls.DETECT_PREDICT if Half(half) is Half.DETECT else cls.MITIGATE_PREDICT

    @classmethod
    def estimate(cls, half: Half) -> "Tag":
        return cls.DETECT_ESTIMATE if Half(half) is Half.DETECT else cls.MITIGATE_ESTIMATE


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ExperimentRow:
    """One observation, materialized from a :class:`Dataset`."""

    unit_id: Optional[str]
    group: str
    treatment: int
    outcome: float
    cate_pred: float
    mu0_pred: Optional[float] = None
    aux: Mapping[str, object] = field(default_factory=dict)


class Dataset:
    """Immutable columnar experiment data.

    Parameters
    ----------
    group, treatment, outcome, cate_pred : array-like
        Required columns, one entry per row.
    mu0_pred : array-like, optional
        Fitted control-arm mean outcome per row; source of collapse weights
        on the relative scale.
    unit_id : array-like, optional
    aux : mapping of str to array-like, optional
        Any further columns (CUPED controls ``z_*``, Lin covariates ``x_*``,
        a grouping ``score``). Numeric where parseable, strings otherwise.
    scale : EffectScale
    """

    def __init__(
        self,
        group,
        treatment,
        outcome,
        cate_pred,
        mu0_pred=None,
        unit_id=None,
        aux: Optional[Mapping[str, np.ndarray]] = None,
        scale: EffectScale = EffectScale.ADDITIVE,
        column_names: Optional[Mapping[str, str]] = None,
    ):
        self.group = _frozen(np.asarray(group, dtype=object).astype(str).astype(object))
        self.treatment = _frozen(np.asarray(treatment, dtype=np.int8))
        self.outcome = _frozen(np.asarray(outcome, dtype=float))
        self.cate_pred = _frozen(np.asarray(cate_pred, dtype=float))
        self.mu0_pred = None if mu0_pred is None else _frozen(np.asarray(mu0_pred, dtype=float))
        self.unit_id = None if unit_id is None else _frozen(np.asarray(unit_id, dtype=object))
        self.aux: Dict[str, np.ndarray] = {k: _frozen(np.asarray(v)) for k, v in (aux or {}).items()}
        self.scale = EffectScale(scale)
        self.column_names = dict(column_names or {})

        n = len(self.group)
        for name in ("treatment", "outcome", "cate_pred"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column {name!r} has length {len(getattr(self, name))}, expected {n}")
        self.groups: Tuple[str, ...] = tuple(sorted(set(self.group.tolist())))
        self._members = {g: _frozen(np.flatnonzero(self.group == g)) for g in self.groups}

    def __len__(self) -> int:
        return len(self.group)

    @property
    def n(self) -> int:
        return len(self.group)

    def group_index(self, g: str) -> int:
        return self.groups.index(g)

    def group_sizes(self) -> Dict[str, int]:
        return {g: len(ix) for g, ix in self._members.items()}

    def view(self, g: str) -> "GroupView":
        if g not in self._members:
            raise KeyError(f"unknown group {g!r}")
        return GroupView(self, g, self._members[g])

    def views(self) -> Dict[str, "GroupView"]:
        return {g: self.view(g) for g in self.groups}

    def column(self, name: str) -> np.ndarray:
        if name in ("group", "treatment", "outcome", "cate_pred"):
            return getattr(self, name)
        if name == "mu0_pred" and self.mu0_pred is not None:
            return self.mu0_pred
        if name in self.aux:
            return self.aux[name]
        raise MissingColumnError(f"column {name!r} not present")

    def row(self, i: int) -> ExperimentRow:
        return ExperimentRow(
            unit_id=None if self.unit_id is None else self.unit_id[i],
            group=self.group[i],
            treatment=int(self.treatment[i]),
            outcome=float(self.outcome[i]),
            cate_pred=float(self.cate_pred[i]),
            mu0_pred=None if self.mu0_pred is None else float(self.mu0_pred[i]),
            aux={k: v[i] for k, v in self.aux.items()},
        )

    def rows(self) -> Iterator[ExperimentRow]:
        for i in range(self.n):
            yield self.row(i)

    def replace(self, **changes) -> "Dataset":
        kwargs = dict(
            group=self.group,
            treatment=self.treatment,
            outcome=self.outcome,
            cate_pred=self.cate_pred,
            mu0_pred=self.mu0_pred,
            unit_id=self.unit_id,
            aux=self.aux,
            scale=self.scale,
            column_names=self.column_names,
        )
        kwargs.update(changes)
        return Dataset(**kwargs)

    def with_predictions(self, cate_pred) -> "Dataset":
        return self.replace(cate_pred=cate_pred)

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            group=self.group[index],
            treatment=self.treatment[index],
            outcome=self.outcome[index],
            cate_pred=self.cate_pred[index],
            mu0_pred=None if self.mu0_pred is None else self.mu0_pred[index],
            unit_id=None if self.unit_id is None else self.unit_id[index],
            aux={k: v[index] for k, v in self.aux.items()},
            scale=self.scale,
            column_names=self.column_names,
        )

    def small_groups(self, min_size: int) -> Dict[str, int]:
        return {g: n for g, n in self.group_sizes().items() if n < min_size}


@dataclass(frozen=True)
class GroupView:
    """Read-only slice of a dataset holding the rows of one group."""

    dataset: Dataset
    group: str
    index: np.ndarray

    @property
    def n(self) -> int:
        return len(self.index)

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def treatment(self) -> np.ndarray:
        return self.dataset.treatment[self.index]

    @property
    def outcome(self) -> np.ndarray:
        return self.dataset.outcome[self.index]

    @property
    def cate_pred(self) -> np.ndarray:
        return self.dataset.cate_pred[self.index]

    @property
    def mu0_pred(self) -> Optional[np.ndarray]:
        mu0 = self.dataset.mu0_pred
        return None if mu0 is None else mu0[self.index]

    @property
    def scale(self) -> EffectScale:
        return self.dataset.scale

    def column(self, name: str) -> np.ndarray:
        return self.dataset.column(name)[self.index]

    def numeric(self, name: str) -> np.ndarray:
        col = self.column(name)
        try:
            return col.astype(float)
        except (TypeError, ValueError) as exc:
            raise UnparseableCellError(f"column {name!r} is not numeric") from exc

    def subset(self, split: "SplitAssignment", tag: Tag) -> "GroupView":
        keep = split.tags[self.index] == int(tag)
        return GroupView(self.dataset, self.group, self.index[keep])

    def take(self, positions) -> "GroupView":
        return GroupView(self.dataset, self.group, self.index[np.asarray(positions)])

    def rows(self) -> Iterator[ExperimentRow]:
        for i in self.index:
            yield self.dataset.row(int(i))


@dataclass(frozen=True)
class SplitAssignment:
    """Per-row tags partitioning every group into the four subsets."""

    tags: np.ndarray
    seed: int
    estimation_fractions: Mapping[str, float]

    def counts(self, dataset: Dataset) -> Dict[str, Dict[Tag, int]]:
        out = {}
        for g in dataset.groups:
            t = self.tags[dataset.view(g).index]
            out[g] = {tag: int((t == int(tag)).sum()) for tag in Tag}
        return out


# --- ingestion -------------------------------------------------------------


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return math.nan


def _parse_numeric(raw: pd.Series, name: str) -> np.ndarray:
    # float() is correctly rounded, unlike pandas' fast parser, so writes round-trip
    cells = raw.str.strip().to_numpy(dtype=object)
    try:
        parsed = cells.astype(float)
    except ValueError:
        parsed = np.array([_to_float(c) for c in cells], dtype=float)
    bad = ~np.isfinite(parsed)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise UnparseableCellError(f"column {name!r}: cannot parse {raw.iloc[i]!r} as a finite number", row=i)
    return parsed


def _read_table(source) -> pd.DataFrame:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    return pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")


def load_dataset(
    source: Union[str, os.PathLike, bytes, IO],
    schema: Optional[Mapping[str, str]] = None,
    scale: EffectScale = EffectScale.ADDITIVE,
    min_group_size: Optional[int] = None,
    strict_min_group_size: bool = False,
    strict_predictions: bool = False,
) -> Dataset:
    """Parse and validate a CSV export of CATE predictions.

    ``schema`` maps canonical column names (``group``, ``treatment``,
    ``outcome``, ``cate_pred``, ``mu0_pred``, ``unit_id``) to the header names
    used in the file. Columns not named in the schema are kept as ``aux``.

    On the relative scale outcomes must be binary. Nonpositive predictions
    only warn unless ``strict_predictions`` is set, since noisy learners
    routinely emit a few of them. Row indices in errors are 0-based data rows.
    """
    scale = EffectScale(scale)
    schema = dict(schema or {})
    names = {c: schema.get(c, c) for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
    frame = _read_table(source)

    for c in REQUIRED_COLUMNS:
        if names[c] not in frame.columns:
            raise MissingColumnError(f"required column {names[c]!r} (for {c!r}) not found")

    treatment = _parse_numeric(frame[names["treatment"]], names["treatment"])
    nonbinary = (treatment != 0) & (treatment != 1)
    if nonbinary.any():
        i = int(np.flatnonzero(nonbinary)[0])
        raise NonBinaryTreatmentError(f"treatment must be 0 or 1, got {frame[names['treatment']].iloc[i]!r}", row=i)

    outcome = _parse_numeric(frame[names["outcome"]], names["outcome"])
    cate_pred = _parse_numeric(frame[names["cate_pred"]], names["cate_pred"])

    if scale is EffectScale.RELATIVE:
        bad = (outcome != 0) & (outcome != 1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonBinaryOutcomeError(f"relative scale requires binary outcomes, got {outcome[i]!r}", row=i)
        nonpos = cate_pred <= 0
        if nonpos.any():
            i = int(np.flatnonzero(nonpos)[0])
            if strict_predictions:
                raise NonpositivePredictionError(f"relative-scale prediction must be positive, got {cate_pred[i]!r}", row=i)
            warnings.warn(
                f"{int(nonpos.sum())} nonpositive relative-scale predictions (first at row {i})",
                GroupBiasWarning,
                stacklevel=2,
            )

    mu0 = None
    if names["mu0_pred"] in frame.columns:
        mu0 = _parse_numeric(frame[names["mu0_pred"]], names["mu0_pred"])
        neg = mu0 < 0
        if neg.any():
            i = int(np.flatnonzero(neg)[0])
            raise UnparseableCellError(f"mu0_pred must be nonnegative, got {mu0[i]!r}", row=i)

    unit_id = frame[names["unit_id"]].to_numpy(dtype=object) if names["unit_id"] in frame.columns else None

    declared = {names[c] for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}
    aux = {}
    for col in frame.columns:
        if col in declared:
            continue
        parsed = pd.to_numeric(frame[col].str.strip(), errors="coerce").to_numpy(dtype=float)
        aux[col] = parsed if np.isfinite(parsed).all() else frame[col].to_numpy(dtype=object)

    ds = Dataset(
        group=frame[names["group"]].to_numpy(dtype=object),
        treatment=treatment.astype(np.int8),
        outcome=outcome,
        cate_pred=cate_pred,
        mu0_pred=mu0,
        unit_id=unit_id,
        aux=aux,
        scale=scale,
        column_names={**{c: n for c, n in names.items() if n in frame.columns}, "_order": list(frame.columns)},
    )

    if min_group_size is not None:
        small = ds.small_groups(min_group_size)
        if small:
            msg = f"groups below minimum size {min_group_size}: {small}"
            if strict_min_group_size:
                raise GroupTooSmallError(msg)
            warnings.warn(msg, GroupBiasWarning, stacklevel=2)
    return ds


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_dataset(dataset: Dataset, target: Union[str, os.PathLike, IO]) -> None:
    """Write ``dataset`` as CSV; reading it back with the same schema is lossless."""
    names = dataset.column_names
    canonical = {
        "group": dataset.group,
        "treatment": dataset.treatment,
        "outcome": dataset.outcome,
        "cate_pred": dataset.cate_pred,
    }
    if dataset.mu0_pred is not None:
        canonical["mu0_pred"] = dataset.mu0_pred
    if dataset.unit_id is not None:
        canonical["unit_id"] = dataset.unit_id
    columns = {names.get(c, c): v for c, v in canonical.items()}
    columns.update(dataset.aux)
    order = [c for c in names.get("_order", []) if c in columns]
    order += [c for c in columns if c not in order]

    own = isinstance(target, (str, os.PathLike))
    fh = open(target, "w", newline="", encoding="utf-8") if own else target
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(order)
        cols = [columns[c] for c in order]
        for i in range(dataset.n):
            w.writerow([_fmt(col[i]) for col in cols])
    finally:
        if own:
            fh.close()


# --- grouping and splitting ------------------------------------------------


def quantile_grouping(dataset: Dataset, score_column: str = "score", k: int = 5) -> Dataset:
    """Relabel rows by which of ``k`` equal-mass score bins they fall in.

    Edges are the interior k-quantiles (linear interpolation) of the full
    column; a score equal to an edge goes to the lower bin. Labels are
    ``Q1`` (lowest) to ``Qk``.
    """
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    if score_column not in dataset.aux:
        raise MissingColumnError(f"score column {score_column!r} not found")
    try:
        score = dataset.aux[score_column].astype(float)
    except (TypeError, ValueError) as exc:
        raise UnparseableCellError(f"score column {score_column!r} is not numeric") from exc
    if not np.isfinite(score).all():
        raise UnparseableCellError(f"score column {score_column!r} has non-finite values")
    if len(np.unique(score)) < k:
        raise DegenerateScoreError(f"score has fewer than {k} distinct values")

    edges = np.quantile(score, np.arange(1, k) / k)
    bins = np.searchsorted(edges, score, side="left")
    width = len(str(k))
    labels = np.array([f"Q{b + 1:0{width}d}" for b in range(k)], dtype=object)
    return dataset.replace(group=labels[bins])


def _fractions_for(dataset: Dataset, estimation_fractions) -> Dict[str, float]:
    if isinstance(estimation_fractions, Mapping):
        missing = set(dataset.groups) - set(estimation_fractions)
        if missing:
            raise ValidationError(f"no estimation fraction for groups {sorted(missing)}")
        fr = {g: float(estimation_fractions[g]) for g in dataset.groups}
    elif isinstance(estimation_fractions, Sequence) and not isinstance(estimation_fractions, str):
        if len(estimation_fractions) != len(dataset.groups):
            raise ValidationError("estimation_fractions length does not match number of groups")
        fr = {g: float(f) for g, f in zip(dataset.groups, estimation_fractions)}
    else:
        fr = {g: float(estimation_fractions) for g in dataset.groups}
    for g, f in fr.items():
        if not 0.0 < f < 1.0:
            raise ValidationError(f"estimation fraction for {g!r} must lie in (0, 1), got {f}")
    return fr


def _interleaved_order(treatment: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random row order in which every contiguous run is near arm-proportional."""
    keys = np.empty(len(treatment))
    for arm in (0, 1):
        pos = np.flatnonzero(treatment == arm)
        if len(pos) == 0:
            continue
        shuffled = rng.permutation(pos)
        keys[shuffled] = (np.arange(len(pos)) + rng.random()) / len(pos)
    return np.lexsort((treatment, keys))


def four_way_split(dataset: Dataset, estimation_fractions=0.5, seed: int = 0) -> SplitAssignment:
    """Split each group into detect/mitigate halves, then predict/estimate.

    Halves are 50/50 (the detect half takes the extra row for odd sizes).
    Within each half the estimate subset takes ``round(f * half)`` rows.
    Assignment is stratified by treatment arm and seeded per group, so a
    group's tags depend only on ``(seed, group position, group rows)``.
    """
    fr = _fractions_for(dataset, estimation_fractions)
    tags = np.full(dataset.n, -1, dtype=np.int8)
    for gi, g in enumerate(dataset.groups):
        view = dataset.view(g)
        n = view.n
        if n < 4:
            raise GroupTooSmallError(f"group {g!r} has {n} rows; the four-way split needs at least 4")
        rng = np.random.default_rng([seed, gi])
        order = view.index[_interleaved_order(view.treatment, rng)]
        h = int(math.floor(n / 2 + 0.5))
        e_d = int(math.floor(fr[g] * h + 0.5))
        e_m = int(math.floor(fr[g] * (n - h) + 0.5))
        tags[order[:e_d]] = Tag.DETECT_ESTIMATE
        tags[order[e_d:h]] = Tag.DETECT_PREDICT
        tags[order[h : h + e_m]] = Tag.MITIGATE_ESTIMATE
        tags[order[h + e_m :]] = Tag.MITIGATE_PREDICT
    return SplitAssignment(tags=_frozen(tags), seed=seed, estimation_fractions=fr)
