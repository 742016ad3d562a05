"""Command-line entry points: ``groupbias <detect|mitigate|evaluate|calibrate|target|simulate>``.

Exit codes: 0 success, 2 validation or usage error, 3 runtime error.
The default seed comes from ``GROUPBIAS_SEED`` when set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import reporting
from .calibration import CalibrationFamily, fit_calibration, implied_gamma
from .data import Dataset, EffectScale, Half, four_way_split, load_dataset, quantile_grouping, write_dataset
from .detection import BiasEstimator, detect
from .errors import GroupBiasError, ValidationError
from .evaluation import EvaluationConfig, evaluate_end_to_end
from .mitigation import DebiasPlan, ShrinkageStrategy, apply_debias, build_plan
from .simulation import SimConfig, draw_sample, generate_population
from .targeting import PolicyEconomics, ThresholdPolicy, profit_delta

SEED_ENV = "GROUPBIAS_SEED"
COMMANDS = ("detect", "mitigate", "evaluate", "calibrate", "target", "simulate")
CV_N_BOOT = 50


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    """Every option of a run; serialized into each report."""

    command: str = "detect"
    input: Optional[str] = None
    output: Optional[str] = None
    table: Optional[str] = None
    scale: str = "additive"
    columns: Dict[str, str] = field(default_factory=dict)
    score_column: Optional[str] = None
    quantiles: int = 5
    gate_method: str = "means"
    collapse: str = "weighted"
    covariates: Tuple[str, ...] = ()
    control_column: Optional[str] = None
    estimation_fraction: float = 0.5
    strategies: Tuple[str, ...] = ("naive", "me", "mse-", "mse+")
    calibration: Tuple[str, ...] = ()
    alpha: float = 0.05
    bonferroni: bool = True
    n_boot: int = 999
    folds: int = 1
    seed: int = 0
    revenue: float = 1.0
    cost: float = 0.005
    p: Optional[float] = None
    variance: str = "sandwich"
    plan: Optional[str] = None
    plan_out: Optional[str] = None
    apply_to: Optional[str] = None
    n_population: int = 1_000_000
    sample_size: int = 50_000
    no_bias: bool = False
    sample_out: Optional[str] = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["covariates"] = list(self.covariates)
        d["strategies"] = list(self.strategies)
        d["calibration"] = list(self.calibration)
        d["columns"] = dict(sorted(self.columns.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config fields {sorted(unknown)}")
        kw = dict(d)
        for name in ("covariates", "strategies", "calibration"):
            if name in kw:
                kw[name] = tuple(kw[name])
        if "columns" in kw:
            kw["columns"] = dict(kw["columns"])
        return cls(**kw)

    def estimator(self) -> BiasEstimator:
        return BiasEstimator(
            scale=EffectScale(self.scale),
            gate_method=self.gate_method,
            collapse=self.collapse,
            covariates=self.covariates,
            control_column=self.control_column,
        )


# --- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> Tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _column_map(text: str) -> Dict[str, str]:
    out = {}
    for part in _csv_list(text):
        key, sep, value = part.partition("=")
        if not sep or not key or not value:
            raise argparse.ArgumentTypeError(f"expected canonical=header pairs, got {part!r}")
        out[key.strip()] = value.strip()
    return out


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("input", help="CSV with group, treatment, outcome, cate_pred[, mu0_pred] columns")
        p.add_argument("--scale", choices=[s.value for s in EffectScale], default="additive")
        p.add_argument("--columns", type=_column_map, default={}, help="remap, e.g. group=segment,outcome=y")
        p.add_argument("--score-column", default=None, help="group rows by quantiles of this column")
        p.add_argument("--quantiles", type=int, default=5)
        p.add_argument("--gate-method", choices=["means", "lin", "cuped"], default="means")
        p.add_argument("--collapse", choices=["weighted", "converted"], default="weighted")
        p.add_argument("--covariates", type=_csv_list, default=())
        p.add_argument("--control-column", default=None)
        p.add_argument("--estimation-fraction", type=float, default=0.5)
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--n-boot", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help=f"default from ${SEED_ENV}, else 0")
    p.add_argument("-o", "--output", default=None, help="JSON report path (stdout if omitted)")
    p.add_argument("--table", default=None, help="tidy CSV table path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groupbias", description="Detect and mitigate group bias in CATE predictions.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="estimate group bias with bootstrap Wald tests")
    _common(p)

    p = sub.add_parser("mitigate", help="build a debiasing plan and optionally apply it")
    _common(p)
    p.add_argument("--strategy", default="mse-", help="none, naive, me[:alpha], mse+, mse-")
    p.add_argument("--plan", default=None, help="apply an existing plan JSON instead of detecting")
    p.add_argument("--plan-out", default=None)
    p.add_argument("--apply-to", default=None, help="write debiased predictions of the input here")

    p = sub.add_parser("evaluate", help="end-to-end out-of-sample evaluation")
    _common(p)
    p.add_argument("--strategies", type=_csv_list, default=("naive", "me", "mse-", "mse+"))
    p.add_argument("--calibration", type=_csv_list, default=())
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--no-bonferroni", action="store_true")

    p = sub.add_parser("calibrate", help="pooled calibration benchmarks and implied shrinkage")
    _common(p)
    p.add_argument("--families", type=_csv_list, default=tuple(f.value for f in CalibrationFamily))

    p = sub.add_parser("target", help="threshold targeting and IPW profit change from debiasing")
    _common(p)
    p.add_argument("--revenue", type=float, default=1.0)
    p.add_argument("--cost", type=float, default=0.005)
    p.add_argument("--p", type=float, default=None, help="known treatment propensity")
    p.add_argument("--strategies", type=_csv_list, default=("naive", "me", "mse-", "mse+"))
    p.add_argument("--plan", default=None)
    p.add_argument("--variance", choices=["sandwich", "sample"], default="sandwich")

    p = sub.add_parser("simulate", help="draw a synthetic experiment with known truth")
    _common(p, data=False)
    p.add_argument("--n-population", type=int, default=1_000_000)
    p.add_argument("--sample-size", type=int, default=50_000)
    p.add_argument("--no-bias", action="store_true")
    p.add_argument("--sample-out", default=None, help="write the sample CSV here")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=ns.command)
    for f in dataclasses.fields(RunConfig):
        if f.name in ("command", "n_boot", "seed"):
            continue
        attr = "input" if f.name == "input" else f.name
        if hasattr(ns, attr) and getattr(ns, attr) is not None:
            setattr(cfg, f.name, getattr(ns, attr))
    if getattr(ns, "families", None):
        cfg.calibration = tuple(ns.families)
    if getattr(ns, "no_bonferroni", False):
        cfg.bonferroni = False
    cfg.seed = default_seed() if ns.seed is None else ns.seed
    n_boot = getattr(ns, "n_boot", None)
    cfg.n_boot = n_boot if n_boot is not None else (CV_N_BOOT if cfg.folds > 1 else 999)
    if cfg.command == "simulate":
        cfg.scale = EffectScale.RELATIVE.value
    if getattr(ns, "strategy", None):
        cfg.strategies = (ns.strategy,)
    for name in ("covariates", "strategies", "calibration"):
        setattr(cfg, name, tuple(getattr(cfg, name)))
    return cfg


# --- pipelines ----------------------------------------------------------------


def load_input(cfg: RunConfig) -> Dataset:
    ds = load_dataset(cfg.input, schema=cfg.columns, scale=cfg.scale)
    if cfg.score_column:
        ds = quantile_grouping(ds, cfg.score_column, cfg.quantiles)
    return ds


def _detection(cfg: RunConfig, ds: Dataset):
    split = four_way_split(ds, cfg.estimation_fraction, cfg.seed)
    return detect(ds, split, cfg.estimator(), Half.DETECT, cfg.n_boot, cfg.seed, cfg.alpha)


def _plans(cfg: RunConfig, ds: Dataset) -> Dict[str, DebiasPlan]:
    if cfg.plan:
        with open(cfg.plan, encoding="utf-8") as fh:
            plan = DebiasPlan.from_json(fh.read())
        return {plan.strategy: plan}
    det = _detection(cfg, ds)
    out = {}
    for s in cfg.strategies:
        plan = build_plan(det, ShrinkageStrategy.parse(s))
        out[plan.strategy] = plan
    return out


def run_detect(cfg: RunConfig):
    det = _detection(cfg, load_input(cfg))
    return reporting.detection_section(det), reporting.detection_rows(det)


def run_mitigate(cfg: RunConfig):
    ds = load_input(cfg)
    result = {}
    if cfg.plan:
        with open(cfg.plan, encoding="utf-8") as fh:
            plan = DebiasPlan.from_json(fh.read())
    else:
        det = _detection(cfg, ds)
        plan = build_plan(det, ShrinkageStrategy.parse(cfg.strategies[0]))
        result["detection"] = reporting.detection_section(det)
    result["plan"] = reporting.plan_section(plan)
    if cfg.plan_out:
        with open(cfg.plan_out, "w", encoding="utf-8") as fh:
            fh.write(plan.to_json() + "\n")
    if cfg.apply_to:
        write_dataset(apply_debias(ds, plan), cfg.apply_to)
    return result, reporting.plan_rows(plan)


def run_evaluate(cfg: RunConfig):
    ds = load_input(cfg)
    config = EvaluationConfig(
        estimator=cfg.estimator(),
        strategies=tuple(ShrinkageStrategy.parse(s) for s in cfg.strategies),
        calibration=tuple(CalibrationFamily(c) for c in cfg.calibration),
        alpha=cfg.alpha,
        bonferroni=cfg.bonferroni,
        n_boot=cfg.n_boot,
        seed=cfg.seed,
        estimation_fractions=cfg.estimation_fraction,
        folds=cfg.folds,
    )
    result = evaluate_end_to_end(ds, config)
    return reporting.evaluation_section(result), reporting.evaluation_rows(result)


def run_calibrate(cfg: RunConfig):
    det = _detection(cfg, load_input(cfg))
    est = det.estimates
    predicted = {g: e.model_gate for g, e in est.items()}
    experimental = {g: e.experimental_gate for g, e in est.items()}
    weights = None
    if all(e.sigma_hat > 0 for e in est.values()):
        weights = {g: 1.0 / e.sigma_hat**2 for g, e in est.items()}
    fits, rows = [], []
    for fam in cfg.calibration:
        fit = fit_calibration(fam, predicted, experimental, weights)
        ig = implied_gamma(fit, det.b_hat)
        fits.append(reporting.calibration_section(fit, ig))
        rows += reporting.calibration_rows(fit, ig)
    return {"detection": reporting.detection_section(det), "fits": fits}, rows


def run_target(cfg: RunConfig):
    ds = load_input(cfg)
    econ = PolicyEconomics(cfg.revenue, cfg.cost)
    base = ThresholdPolicy(econ.threshold)
    deltas = {
        name: profit_delta(ds, base, ThresholdPolicy(econ.threshold, plan), econ, cfg.p, cfg.variance)
        for name, plan in _plans(cfg, ds).items()
    }
    return reporting.targeting_section(econ, deltas), reporting.targeting_rows(deltas)


def run_simulate(cfg: RunConfig):
    kw = dict(n_population=cfg.n_population, seed=cfg.seed, sample_size=cfg.sample_size)
    sim = SimConfig.no_bias(**kw) if cfg.no_bias else SimConfig(**kw)
    pop = generate_population(sim)
    sample = draw_sample(pop, cfg.sample_size, cfg.seed)
    if cfg.sample_out:
        write_dataset(sample.dataset, cfg.sample_out)
    return reporting.simulation_section(pop, sample), reporting.simulation_rows(pop)


RUNNERS = {
    "detect": run_detect,
    "mitigate": run_mitigate,
    "evaluate": run_evaluate,
    "calibrate": run_calibrate,
    "target": run_target,
    "simulate": run_simulate,
}


def execute(cfg: RunConfig) -> dict:
    """Run one command and return its validated report."""
    if cfg.command not in RUNNERS:
        raise ValidationError(f"unknown command {cfg.command!r}")
    result, rows = RUNNERS[cfg.command](cfg)
    report = reporting.envelope(cfg.command, cfg.to_dict(), result)
    reporting.validate_report(report)
    if cfg.output:
        reporting.write_report(report, cfg.output)
    else:
        sys.stdout.write(reporting.dumps_report(report))
    if cfg.table:
        reporting.write_table(rows, cfg.table)
    return report


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        execute(config_from_args(ns))
    except ValidationError as e:
        print(f"groupbias: invalid input: {e}", file=sys.stderr)
        return 2
    except GroupBiasError as e:
        print(f"groupbias: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
