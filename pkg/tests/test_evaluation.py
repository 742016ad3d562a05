import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupbias import (
    DebiasPlan,
    EvaluationConfig,
    ShrinkageStrategy,
    build_plan,
    detect,
    distribution_metrics,
    evaluate_end_to_end,
    four_way_split,
    residual_bias,
)
from groupbias.errors import PlanHalfLeakageError, ValidationError
from groupbias.evaluation import METRICS, MetricsReport, average_reports, pct_change

from conftest import make_dataset


def shifted_dataset(rng, shifts, n_per_group=1000, effect=0.5):
    k = len(shifts)
    n = k * n_per_group
    group = np.repeat([f"g{i}" for i in range(k)], n_per_group)
    t = np.tile(np.arange(n_per_group) % 2, k)
    y = rng.normal(size=n) + effect * t
    pred = effect + np.repeat(np.asarray(shifts, dtype=float), n_per_group)
    return make_dataset(group, t, y, pred)


class TestDistributionMetrics:
    def test_single_group(self):
        m = distribution_metrics({"a": -0.3}, {"a": 10})
        assert m.rmse == pytest.approx(0.3)
        assert m.mae == pytest.approx(0.3)
        assert m.rmsed is None and m.maed is None

    def test_antisymmetric_pair(self):
        m = distribution_metrics({"a": 0.3, "b": -0.3}, {"a": 5, "b": 5})
        assert m.rmse == pytest.approx(0.3)
        assert m.rmsed == pytest.approx(0.6)
        assert m.maed == pytest.approx(0.6)

    def test_all_zero(self):
        m = distribution_metrics({"a": 0.0, "b": 0.0, "c": 0.0}, {"a": 1, "b": 2, "c": 3})
        for name in METRICS:
            assert m.get(name) == 0.0

    def test_extremes(self):
        m = distribution_metrics({"a": 0.1, "b": -0.5, "c": 0.02}, {"a": 1, "b": 1, "c": 1})
        assert (m.min_abs, m.min_group) == (pytest.approx(0.02), "c")
        assert (m.max_abs, m.max_group) == (pytest.approx(0.5), "b")

    def test_hand_values(self):
        m = distribution_metrics({"a": 0.1, "b": -0.2, "c": 0.4}, {"a": 1, "b": 1, "c": 2})
        assert m.rmse == pytest.approx(np.sqrt((0.01 + 0.04 + 0.16) / 3))
        assert m.mae == pytest.approx(0.7 / 3)
        # complements: a -> (-0.2 + 0.8)/3, b -> (0.1 + 0.8)/3, c -> (0.1 - 0.2)/2
        d = np.array([0.1 - 0.2, -0.2 - 0.3, 0.4 + 0.05])
        assert m.rmsed == pytest.approx(np.sqrt(np.mean(d**2)))

    @settings(max_examples=50, deadline=None)
    @given(
        vals=st.lists(st.floats(-1, 1), min_size=2, max_size=8),
        c=st.floats(-5, 5).filter(lambda x: abs(x) > 1e-3),
        data=st.data(),
    )
    def test_relabel_and_scale(self, vals, c, data):
        groups = [f"g{i}" for i in range(len(vals))]
        sizes = {g: i + 1 for i, g in enumerate(groups)}
        base = distribution_metrics(dict(zip(groups, vals)), sizes)
        perm = data.draw(st.permutations(range(len(vals))))
        relabeled = {f"h{perm[i]}": v for i, v in enumerate(vals)}
        rsizes = {f"h{perm[i]}": sizes[g] for i, g in enumerate(groups)}
        again = distribution_metrics(relabeled, rsizes)
        scaled = distribution_metrics({g: c * v for g, v in zip(groups, vals)}, sizes)
        for name in ("rmse", "mae", "rmsed", "maed", "min_abs", "max_abs"):
            assert again.get(name) == pytest.approx(base.get(name), abs=1e-12)
            assert scaled.get(name) == pytest.approx(abs(c) * base.get(name), rel=1e-9, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError):
            distribution_metrics({}, {})


class TestPctChange:
    def test_values(self):
        assert pct_change(0.5, 1.0) == pytest.approx(-50.0)
        assert pct_change(2.0, 1.0) == pytest.approx(100.0)
        assert pct_change(0.0, 0.0) == 0.0
        assert pct_change(1.0, 0.0) is None
        assert pct_change(None, 1.0) is None

    def test_report_needs_baseline(self):
        m = distribution_metrics({"a": 0.1}, {"a": 1})
        with pytest.raises(ValidationError):
            MetricsReport.from_metrics({"naive": m})

    def test_average_reports(self):
        r1 = MetricsReport.from_metrics({"none": distribution_metrics({"a": 0.2, "b": 0.0}, {"a": 1, "b": 1})})
        r2 = MetricsReport.from_metrics({"none": distribution_metrics({"a": 0.4, "b": 0.0}, {"a": 1, "b": 1})})
        avg = average_reports([r1, r2])
        assert avg.metrics["none"]["mae"] == pytest.approx(0.15)
        assert avg.sd["none"]["mae"] == pytest.approx(np.std([0.1, 0.2], ddof=1))
        assert avg.n_runs == 2


class TestResidualBias:
    def setup(self, rng, shifts=(0.3, -0.1)):
        ds = shifted_dataset(rng, shifts)
        split = four_way_split(ds, 0.5, 0)
        det = detect(ds, split, half="detect", n_boot=99, seed=0)
        hold = detect(ds, split, half="mitigate", n_boot=99, seed=0)
        return ds, det, hold

    def test_zero_gamma_is_fresh_estimate(self, rng):
        _, det, hold = self.setup(rng)
        rep = residual_bias(hold, build_plan(det, ShrinkageStrategy.no_debias()))
        for g, r in rep.groups.items():
            assert r.value == hold.estimates[g].b_hat

    def test_exact_cancellation(self, rng):
        _, _, hold = self.setup(rng)
        plan = DebiasPlan.from_corrections(hold.b_hat, half="detect")
        rep = residual_bias(hold, plan)
        for r in rep.groups.values():
            assert r.value == 0.0

    def test_value_is_holdout_minus_correction(self, rng):
        _, det, hold = self.setup(rng)
        plan = build_plan(det, ShrinkageStrategy.naive())
        rep = residual_bias(hold, plan)
        for g, r in rep.groups.items():
            assert r.value == hold.estimates[g].b_hat - det.estimates[g].b_hat
            assert r.sigma_hat == hold.estimates[g].sigma_hat

    def test_leakage_refused(self, rng):
        _, _, hold = self.setup(rng)
        leaked = build_plan(hold, ShrinkageStrategy.naive())
        with pytest.raises(PlanHalfLeakageError):
            residual_bias(hold, leaked)

    def test_conditional_unbiasedness(self):
        vals = []
        for seed in range(200):
            rng = np.random.default_rng(seed)
            ds = shifted_dataset(rng, (0.3,), n_per_group=400)
            split = four_way_split(ds, 0.5, seed)
            hold = detect(ds, split, half="mitigate", n_boot=2, seed=seed)
            plan = DebiasPlan.from_corrections({"g0": 0.1}, half="detect")
            vals.append(residual_bias(hold, plan).groups["g0"].value)
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - 0.2) <= 3 * se

    def test_naive_residual_near_zero_large_n(self):
        rng = np.random.default_rng(3)
        ds = shifted_dataset(rng, (0.3,), n_per_group=100_000)
        res = evaluate_end_to_end(ds, EvaluationConfig(strategies=(ShrinkageStrategy.naive(),), n_boot=99))
        f = res.first
        r = f.residuals["naive"].groups["g0"].value
        se = np.hypot(f.detection.estimates["g0"].sigma_hat, f.holdout.estimates["g0"].sigma_hat)
        assert abs(r) < 3 * se


class TestEndToEnd:
    def test_baseline_only(self, rng):
        ds = shifted_dataset(rng, (0.2, -0.2, 0.0))
        res = evaluate_end_to_end(ds, EvaluationConfig(strategies=(), n_boot=49))
        assert list(res.metrics.metrics) == ["none"]
        assert all(v in (0.0, None) for v in res.metrics.pct_changes()["none"].values())
        for g, r in res.first.residuals["none"].groups.items():
            assert r.value == res.first.holdout.estimates[g].b_hat

    def test_bonferroni_level(self, rng):
        ds = shifted_dataset(rng, (0.2, -0.2, 0.0, 0.1, 0.0))
        res = evaluate_end_to_end(ds, EvaluationConfig(n_boot=19))
        assert res.alpha_test == pytest.approx(0.0025)
        assert res.first.detection.alpha == pytest.approx(0.0025)
        res = evaluate_end_to_end(ds, EvaluationConfig(n_boot=19, bonferroni=False))
        assert res.alpha_test == 0.05

    def test_plans_use_detect_half_only(self, rng):
        ds = shifted_dataset(rng, (0.5, -0.5))
        res = evaluate_end_to_end(ds, EvaluationConfig(n_boot=49))
        f = res.first
        for name, plan in f.plans.items():
            assert plan.half.value == "detect"
            for g, e in plan.entries.items():
                assert e.b_hat == f.detection.estimates[g].b_hat

    def test_large_bias_corrected(self, rng):
        ds = shifted_dataset(rng, (0.8, -0.6, 0.5), n_per_group=4000)
        res = evaluate_end_to_end(ds, EvaluationConfig(n_boot=99))
        for s in ("naive", "me", "mse-", "mse+"):
            assert res.metrics.pct_change(s, "rmse") < -70

    def test_deterministic(self, rng):
        ds = shifted_dataset(rng, (0.2, 0.0))
        a = evaluate_end_to_end(ds, EvaluationConfig(n_boot=49, seed=4))
        b = evaluate_end_to_end(ds, EvaluationConfig(n_boot=49, seed=4))
        assert a.metrics.metrics == b.metrics.metrics

    def test_folds_average(self, rng):
        ds = shifted_dataset(rng, (0.2, 0.0))
        res = evaluate_end_to_end(ds, EvaluationConfig(n_boot=19, folds=3))
        assert len(res.folds) == 3
        assert res.metrics.n_runs == 3
        expected = np.mean([f.metrics.metrics["naive"]["rmse"] for f in res.folds])
        assert res.metrics.metrics["naive"]["rmse"] == pytest.approx(expected)

    def test_true_gates_population_metrics(self, rng):
        ds = shifted_dataset(rng, (0.3, -0.3))
        res = evaluate_end_to_end(ds, EvaluationConfig(n_boot=19), true_gates={"g0": 0.5, "g1": 0.5})
        f = res.first
        for g in ("g0", "g1"):
            truth = f.holdout.estimates[g].model_gate - 0.5
            assert truth == pytest.approx(0.3 if g == "g0" else -0.3)
        assert res.population_metrics.metrics["none"]["rmse"] == pytest.approx(0.3)

    def test_calibration_strategies_included(self, rng):
        ds = shifted_dataset(rng, (0.3, -0.3, 0.1))
        res = evaluate_end_to_end(ds, EvaluationConfig(n_boot=19, calibration=("affine", "isotonic")))
        assert "calibration:affine" in res.metrics.metrics
        assert "calibration:isotonic" in res.first.calibration

    def test_folds_validated(self, rng):
        ds = shifted_dataset(rng, (0.0,))
        with pytest.raises(ValidationError):
            evaluate_end_to_end(ds, EvaluationConfig(folds=0))
