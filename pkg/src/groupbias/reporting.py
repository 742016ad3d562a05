"""JSON reports and tidy CSV tables for every pipeline stage.

Reports are plain JSON with sorted keys and no timestamps, so identical
inputs give byte-identical files. Each report is validated against the
schema shipped in ``groupbias/schemas/report.schema.json``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .calibration import CalibrationFit, ImpliedGamma
from .detection import DetectionResult
from .evaluation import METRICS, EvaluationResult, MetricsReport
from .mitigation import DebiasPlan
from .targeting import PolicyEconomics, ProfitDelta, ProfitEstimate

SCHEMA_VERSION = 1
TABLE_COLUMNS = ("group", "strategy", "metric", "value")


def to_jsonable(obj):
    """Recursively convert to JSON types; non-finite floats become ``None``."""
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


@lru_cache(maxsize=1)
def report_schema() -> dict:
    text = resources.files("groupbias").joinpath("schemas/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(report: Mapping) -> None:
    import jsonschema

    jsonschema.validate(report, report_schema())


def envelope(kind: str, config: Mapping, result: Mapping) -> dict:
    return to_jsonable({"schema_version": SCHEMA_VERSION, "kind": kind, "config": config, "result": result})


def dumps_report(report: Mapping) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(report: Mapping, path: Union[str, os.PathLike]) -> None:
    validate_report(report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_report(report))


def write_table(rows: Iterable[Mapping], path: Union[str, os.PathLike], columns: Sequence[str] = TABLE_COLUMNS) -> None:
    """Tidy CSV, one row per group x strategy x metric."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else _cell(row.get(c)) for c in columns])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --- sections ---------------------------------------------------------------


def detection_section(result: DetectionResult) -> dict:
    groups = []
    for g, e in result.estimates.items():
        groups.append(
            {
                "group": g,
                "b_hat": e.b_hat,
                "sigma_hat": e.sigma_hat,
                "m2_hat": e.m2_hat,
                "z": e.z_stat,
                "p": e.p_value,
                "detected": e.detected,
                "n": e.n,
                "n_boot": e.n_boot,
                "n_failed": e.n_failed,
                "model_gate": e.model_gate,
                "experimental_gate": e.experimental_gate,
            }
        )
    cross = [
        {"group": c.group, "value": c.value, "sigma_hat": c.sigma_hat, "z": c.z_stat, "p": c.p_value, "detected": c.detected}
        for c in result.cross
    ]
    return {"half": result.half.value, "alpha": result.alpha, "seed": result.seed, "groups": groups, "cross": cross}


def detection_rows(result: DetectionResult) -> List[dict]:
    rows = []
    for g, e in result.estimates.items():
        for m, v in (("b_hat", e.b_hat), ("sigma_hat", e.sigma_hat), ("m2_hat", e.m2_hat), ("z", e.z_stat), ("p", e.p_value), ("detected", float(e.detected))):
            rows.append({"group": g, "strategy": "detect", "metric": m, "value": v})
    for c in result.cross:
        rows.append({"group": c.group, "strategy": "detect", "metric": "cross_bias", "value": c.value})
    return rows


def plan_section(plan: DebiasPlan) -> dict:
    return plan.to_dict()


def plan_rows(plan: DebiasPlan) -> List[dict]:
    rows = []
    for g, e in plan.entries.items():
        for m in ("gamma", "b_hat", "correction"):
            rows.append({"group": g, "strategy": plan.strategy, "metric": m, "value": getattr(e, m)})
    return rows


def _metrics_section(report: MetricsReport) -> dict:
    return {
        "metrics": report.metrics,
        "sd": report.sd,
        "pct_change": report.pct_changes(),
        "extremes": report.extremes,
        "n_runs": report.n_runs,
    }


def evaluation_section(result: EvaluationResult) -> dict:
    first = result.first
    residuals = {}
    for name, rep in first.residuals.items():
        residuals[name] = [
            {"group": g, "value": r.value, "sigma_hat": r.sigma_hat, "z": r.z_stat, "p": r.p_value, "detected": r.detected, "gamma": r.gamma, "correction": r.correction}
            for g, r in rep.groups.items()
        ]
    out = {
        "alpha_test": result.alpha_test,
        "folds": len(result.folds),
        "detection": detection_section(first.detection),
        "holdout": detection_section(first.holdout),
        "plans": {name: plan.to_dict() for name, plan in first.plans.items()},
        "residuals": residuals,
        "metrics": _metrics_section(result.metrics),
    }
    if first.calibration:
        out["calibration"] = {name: calibration_section(fit) for name, fit in first.calibration.items()}
    if result.population_metrics is not None:
        out["population_metrics"] = _metrics_section(result.population_metrics)
    return out


def evaluation_rows(result: EvaluationResult) -> List[dict]:
    rows = []
    for kind, report in (("empirical", result.metrics), ("population", result.population_metrics)):
        if report is None:
            continue
        pct = report.pct_changes()
        for s in report.metrics:
            for m in METRICS:
                suffix = "" if kind == "empirical" else "_true"
                rows.append({"group": "ALL", "strategy": s, "metric": m + suffix, "value": report.metrics[s][m]})
                rows.append({"group": "ALL", "strategy": s, "metric": m + suffix + "_pct_change", "value": pct[s][m]})
    for name, rep in result.first.residuals.items():
        for g, r in rep.groups.items():
            rows.append({"group": g, "strategy": name, "metric": "residual_bias", "value": r.value})
    return rows


def calibration_section(fit: CalibrationFit, implied: Optional[Mapping[str, ImpliedGamma]] = None) -> dict:
    out = {
        "family": fit.family.value,
        "parameters": fit.parameters,
        "groups": [
            {
                "group": g,
                "predicted": fit.predicted[g],
                "experimental": fit.experimental[g],
                "weight": fit.weights[g],
                "fitted": fit.fitted[g],
                "correction": fit.predicted[g] - fit.fitted[g],
            }
            for g in fit.groups
        ],
    }
    if implied is not None:
        for row in out["groups"]:
            ig = implied[row["group"]]
            row["implied_gamma"] = ig.gamma
            row["outside_unit_interval"] = ig.outside_unit_interval
    return out


def calibration_rows(fit: CalibrationFit, implied: Optional[Mapping[str, ImpliedGamma]] = None) -> List[dict]:
    rows = []
    for g in fit.groups:
        rows.append({"group": g, "strategy": fit.family.value, "metric": "fitted", "value": fit.fitted[g]})
        rows.append({"group": g, "strategy": fit.family.value, "metric": "correction", "value": fit.predicted[g] - fit.fitted[g]})
        if implied is not None:
            rows.append({"group": g, "strategy": fit.family.value, "metric": "implied_gamma", "value": implied[g].gamma})
    return rows


def _profit(e: ProfitEstimate) -> dict:
    return {
        "value": e.value,
        "variance": e.variance,
        "se": e.se,
        "n": e.n,
        "treated_share": e.treated_share,
        "disagreement_share": e.disagreement_share,
    }


def targeting_section(economics: PolicyEconomics, deltas: Mapping[str, ProfitDelta]) -> dict:
    strategies = {}
    for name, d in deltas.items():
        strategies[name] = {
            "delta": d.delta,
            "variance": d.variance,
            "ci": list(d.ci),
            "base_value": d.base_value,
            "debiased_value": d.debiased_value,
            "relative_change": d.relative_change,
            "treated_share": d.treated_share,
            "disagreement_share": d.disagreement_share,
            "groups": [
                {"group": g, "n": gd.n, "delta": gd.delta, "variance": gd.variance, "base": _profit(gd.base), "debiased": _profit(gd.debiased)}
                for g, gd in d.groups.items()
            ],
        }
    return {"revenue": economics.revenue, "cost": economics.cost, "threshold": economics.threshold, "strategies": strategies}


def targeting_rows(deltas: Mapping[str, ProfitDelta]) -> List[dict]:
    rows = []
    for name, d in deltas.items():
        for m in ("delta", "relative_change", "treated_share", "disagreement_share"):
            rows.append({"group": "ALL", "strategy": name, "metric": m, "value": getattr(d, m)})
        for g, gd in d.groups.items():
            rows.append({"group": g, "strategy": name, "metric": "delta", "value": gd.delta})
            rows.append({"group": g, "strategy": name, "metric": "treated_share", "value": gd.debiased.treated_share})
            rows.append({"group": g, "strategy": name, "metric": "disagreement_share", "value": gd.debiased.disagreement_share})
    return rows


def simulation_section(population, sample) -> dict:
    return {
        "n_population": population.dataset.n,
        "n_sample": sample.dataset.n,
        "group_sizes": sample.dataset.group_sizes(),
        "true_gate": population.true_gate,
        "model_gate": population.model_gate,
        "true_bias": population.true_bias,
        "sim_config": population.config.to_dict(),
    }


def simulation_rows(population) -> List[dict]:
    rows = []
    for g in population.true_gate:
        for m, src in (("true_gate", population.true_gate), ("model_gate", population.model_gate), ("true_bias", population.true_bias)):
            rows.append({"group": g, "strategy": "truth", "metric": m, "value": src[g]})
    return rows
