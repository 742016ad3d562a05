import json

import numpy as np
import pandas as pd
import pytest

from groupbias import cli, load_dataset
from groupbias.cli import RunConfig, main
from groupbias.errors import ValidationError
from groupbias.reporting import report_schema, validate_report

# the simulated predictions include a few nonpositive ratios by construction
pytestmark = pytest.mark.filterwarnings("ignore:.*nonpositive relative-scale predictions")


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    path = d / "sample.csv"
    code = main(["simulate", "--n-population", "40000", "--sample-size", "10000", "--sample-out", str(path), "-o", str(d / "sim.json")])
    assert code == 0
    return path


def run(argv):
    return main([str(a) for a in argv])


def read(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class TestSimulate:
    def test_report(self, sim_csv):
        rep = read(sim_csv.parent / "sim.json")
        validate_report(rep)
        assert rep["kind"] == "simulate"
        assert rep["result"]["n_sample"] == 10_000
        assert set(rep["result"]["true_gate"]) == {"G1", "G2", "G3", "G4", "G5"}

    def test_sample_loads(self, sim_csv):
        ds = load_dataset(sim_csv, scale="relative")
        assert ds.n == 10_000
        assert ds.mu0_pred is not None


class TestDetect:
    def test_five_bias_rows(self, sim_csv, tmp_path):
        out, table = tmp_path / "r.json", tmp_path / "t.csv"
        assert run(["detect", sim_csv, "--scale", "relative", "--n-boot", 99, "-o", out, "--table", table]) == 0
        rep = read(out)
        assert len(rep["result"]["groups"]) == 5
        assert len(rep["result"]["cross"]) == 5
        t = pd.read_csv(table)
        assert list(t.columns) == ["group", "strategy", "metric", "value"]
        assert set(t["metric"]) >= {"b_hat", "sigma_hat", "p"}

    def test_byte_identical(self, sim_csv, tmp_path):
        # the output path is part of the config, so both runs write the same file
        out = tmp_path / "r.json"
        runs = []
        for _ in range(2):
            assert run(["detect", sim_csv, "--scale", "relative", "--n-boot", 49, "--seed", 3, "-o", out]) == 0
            runs.append(out.read_bytes())
        assert runs[0] == runs[1]

    def test_seed_from_environment(self, sim_csv, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "7")
        out = tmp_path / "r.json"
        assert run(["detect", sim_csv, "--scale", "relative", "--n-boot", 19, "-o", out]) == 0
        assert read(out)["config"]["seed"] == 7

    def test_stdout(self, sim_csv, capsys):
        assert run(["detect", sim_csv, "--scale", "relative", "--n-boot", 19]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["kind"] == "detect"

    def test_column_remap(self, tmp_path, rng):
        n = 400
        df = pd.DataFrame(
            {
                "segment": np.repeat(["a", "b"], n // 2),
                "treated": np.arange(n) % 2,
                "y": rng.normal(size=n),
                "pred": np.zeros(n),
            }
        )
        df.to_csv(tmp_path / "in.csv", index=False)
        out = tmp_path / "r.json"
        code = run(["detect", tmp_path / "in.csv", "--columns", "group=segment,treatment=treated,outcome=y,cate_pred=pred", "--n-boot", 19, "-o", out])
        assert code == 0
        assert [g["group"] for g in read(out)["result"]["groups"]] == ["a", "b"]


class TestEvaluate:
    def test_strategy_blocks(self, sim_csv, tmp_path):
        out, table = tmp_path / "r.json", tmp_path / "t.csv"
        code = run(["evaluate", sim_csv, "--scale", "relative", "--strategies", "naive,me,mse-,mse+", "--n-boot", 49, "-o", out, "--table", table])
        assert code == 0
        metrics = read(out)["result"]["metrics"]["metrics"]
        assert set(metrics) == {"none", "naive", "me", "mse-", "mse+"}
        assert read(out)["result"]["alpha_test"] == pytest.approx(0.05 / 20)
        t = pd.read_csv(table)
        assert set(t["strategy"]) == {"none", "naive", "me", "mse-", "mse+"}

    def test_folds_default_n_boot(self, sim_csv, tmp_path):
        out = tmp_path / "r.json"
        assert run(["evaluate", sim_csv, "--scale", "relative", "--folds", 2, "-o", out]) == 0
        rep = read(out)
        assert rep["config"]["n_boot"] == cli.CV_N_BOOT
        assert rep["result"]["folds"] == 2


class TestMitigate:
    def test_plan_roundtrip_and_apply(self, sim_csv, tmp_path):
        plan_path, applied = tmp_path / "plan.json", tmp_path / "applied.csv"
        code = run(["mitigate", sim_csv, "--scale", "relative", "--strategy", "naive", "--n-boot", 49, "--plan-out", plan_path, "--apply-to", applied, "-o", tmp_path / "r.json"])
        assert code == 0
        plan = read(plan_path)
        before = load_dataset(sim_csv, scale="relative")
        after = load_dataset(applied, scale="relative")
        corr = np.array([plan["groups"][g]["correction"] for g in before.group])
        np.testing.assert_allclose(after.cate_pred, before.cate_pred - corr, atol=1e-12)

        out2 = tmp_path / "r2.json"
        assert run(["mitigate", sim_csv, "--scale", "relative", "--plan", plan_path, "-o", out2]) == 0
        assert read(out2)["result"]["plan"]["groups"] == plan["groups"]


class TestCalibrateAndTarget:
    def test_calibrate(self, sim_csv, tmp_path):
        out = tmp_path / "r.json"
        assert run(["calibrate", sim_csv, "--scale", "relative", "--n-boot", 49, "-o", out]) == 0
        fits = read(out)["result"]["fits"]
        assert [f["family"] for f in fits] == ["affine", "log_affine", "isotonic", "log_isotonic"]
        assert all("implied_gamma" in g for g in fits[0]["groups"])

    def test_target_threshold(self, sim_csv, tmp_path):
        out = tmp_path / "r.json"
        assert run(["target", sim_csv, "--scale", "relative", "--revenue", 1, "--cost", 0.005, "--n-boot", 49, "-o", out]) == 0
        res = read(out)["result"]
        assert res["threshold"] == pytest.approx(1.005, abs=1e-4)
        assert set(res["strategies"]) == {"naive", "me", "mse-", "mse+"}
        for s in res["strategies"].values():
            assert 0.0 <= s["treated_share"] <= 1.0
            assert s["ci"][0] <= s["delta"] <= s["ci"][1]


class TestExitCodes:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_invalid_alpha(self, sim_csv):
        assert run(["detect", sim_csv, "--alpha", 1.5, "--n-boot", 9]) == 2

    def test_missing_column(self, tmp_path):
        pd.DataFrame({"group": ["a"], "treatment": [1]}).to_csv(tmp_path / "bad.csv", index=False)
        assert run(["detect", tmp_path / "bad.csv"]) == 2

    def test_runtime_error(self, tmp_path):
        # relative scale with no control conversions: zero control mean
        n = 40
        pd.DataFrame(
            {"group": ["a"] * n, "treatment": np.arange(n) % 2, "outcome": (np.arange(n) % 2).astype(float), "cate_pred": np.ones(n), "mu0_pred": np.full(n, 0.1)}
        ).to_csv(tmp_path / "z.csv", index=False)
        assert run(["detect", tmp_path / "z.csv", "--scale", "relative", "--n-boot", 9]) == 3

    def test_bad_seed_env(self, sim_csv, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        assert run(["detect", sim_csv, "--n-boot", 9]) == 2


class TestConfig:
    def test_roundtrip(self):
        cfg = RunConfig(command="evaluate", strategies=("naive", "me:0.01"), columns={"group": "seg"}, covariates=("x",))
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            RunConfig.from_dict({"colour": "red"})

    def test_schema_is_draft_2020(self):
        assert report_schema()["$schema"].endswith("2020-12/schema")
