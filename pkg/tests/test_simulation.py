import numpy as np
import pytest
from scipy import special

from groupbias import SimConfig, draw_sample, estimate_collapse_weights, estimate_group_bias, generate_population
from groupbias.errors import InvalidDistributionParamsError, SampleTooLargeError
from groupbias.simulation import largest_remainder, linear_predictors


@pytest.fixture(scope="module")
def population():
    return generate_population(SimConfig())


def small(**kw):
    kw.setdefault("n_population", 20_000)
    return SimConfig(**kw)


class TestConfig:
    def test_defaults(self):
        c = SimConfig()
        assert c.labels == ("G1", "G2", "G3", "G4", "G5")
        assert sum(c.group_props) == pytest.approx(1.0)
        assert SimConfig.no_bias().beta == (0.0,) * 5

    @pytest.mark.parametrize(
        "kw",
        [
            {"group_props": (0.5, 0.4, 0.05, 0.03, 0.01)},
            {"rho": (0.5, -1.0, 1.5, 1.0, 2.0)},
            {"zeta": (1.0, 1.0)},
            {"n_population": 0},
            {"x2_scale": 0.0},
            {"groups": ("a", "b")},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidDistributionParamsError):
            SimConfig(**kw)

    def test_to_dict(self):
        d = SimConfig(seed=3).to_dict()
        assert d["seed"] == 3 and d["groups"] == ["G1", "G2", "G3", "G4", "G5"]


class TestLargestRemainder:
    def test_exact_shares(self):
        np.testing.assert_array_equal(largest_remainder(50_000, SimConfig().group_props), [22500, 10000, 7500, 6000, 4000])

    def test_sums_to_total(self):
        counts = largest_remainder(7, [1 / 3, 1 / 3, 1 / 3])
        assert counts.sum() == 7 and counts.max() - counts.min() <= 1


class TestPopulation:
    def test_no_heterogeneity(self):
        pop = generate_population(small(zeta=(0.0,) * 5))
        np.testing.assert_allclose(pop.tau, 1.0)
        np.testing.assert_allclose(pop.p0, special.expit(0.1))
        for g in pop.true_gate.values():
            assert g == pytest.approx(1.0, abs=1e-12)

    def test_no_bias_no_noise(self):
        pop = generate_population(small(beta=(0.0,) * 5, rho=(0.0,) * 5))
        np.testing.assert_array_equal(pop.dataset.cate_pred, pop.tau)
        for b in pop.true_bias.values():
            assert b == pytest.approx(0.0, abs=1e-12)

    def test_columns_and_truth(self, population):
        ds = population.dataset
        assert ds.n == 1_000_000
        assert set(ds.aux) == {"X1", "X2", "X3"}
        x1, x2, x3 = ds.column("X1"), ds.column("X2"), ds.column("X3")
        zeta = np.asarray(SimConfig().zeta)[np.searchsorted(np.array(ds.groups), ds.group.astype(str))]
        eta0, eta1 = linear_predictors(x1, x2, x3, zeta)
        np.testing.assert_array_equal(ds.mu0_pred, special.expit(eta0))
        np.testing.assert_allclose(population.tau, special.expit(eta1) / special.expit(eta0))

    def test_covariate_ranges(self, population):
        ds = population.dataset
        assert ds.column("X1").min() > 0 and ds.column("X1").max() < 1
        assert ds.column("X2").min() > 0
        assert ds.column("X3").min() >= 0
        assert ds.column("X1").mean() == pytest.approx(0.1, abs=0.002)
        assert ds.column("X2").mean() == pytest.approx(10.0, rel=0.01)

    def test_true_gate_is_ratio_of_means(self, population):
        ds = population.dataset
        for g, gate in population.true_gate.items():
            m = ds.view(g).index
            p0, p1 = population.p0[m], population.p1[m]
            assert gate == pytest.approx(p1.mean() / p0.mean(), rel=1e-10)
            w = p0 / p0.mean()
            assert gate == pytest.approx(np.mean(w * population.tau[m]), rel=1e-10)

    def test_group_sizes(self, population):
        assert population.dataset.group_sizes() == {"G1": 450_000, "G2": 200_000, "G3": 150_000, "G4": 120_000, "G5": 80_000}

    def test_injected_bias_close_to_beta(self, population):
        for g, b in zip(SimConfig().labels, SimConfig().beta):
            assert population.true_bias[g] == pytest.approx(b, abs=0.005)

    def test_deterministic_and_seeded(self):
        a = generate_population(small(seed=5))
        b = generate_population(small(seed=5))
        c = generate_population(small(seed=6))
        np.testing.assert_array_equal(a.dataset.outcome, b.dataset.outcome)
        np.testing.assert_array_equal(a.dataset.cate_pred, b.dataset.cate_pred)
        assert not np.array_equal(a.dataset.cate_pred, c.dataset.cate_pred)

    def test_chunks_independent_of_population_size(self):
        # rows in the first chunk do not depend on how many rows follow
        a = generate_population(SimConfig(n_population=70_000, group_props=(1.0,), zeta=(1.0,), beta=(0.0,), rho=(0.0,), estimation_fractions=(0.5,)))
        b = generate_population(SimConfig(n_population=100_000, group_props=(1.0,), zeta=(1.0,), beta=(0.0,), rho=(0.0,), estimation_fractions=(0.5,)))
        np.testing.assert_array_equal(a.dataset.column("X1")[:65536], b.dataset.column("X1")[:65536])


class TestDrawSample:
    def test_group_sizes(self, population):
        s = draw_sample(population, 50_000, seed=0)
        assert s.dataset.group_sizes() == {"G1": 22500, "G2": 10000, "G3": 7500, "G4": 6000, "G5": 4000}

    def test_small_sample_average_size(self, population):
        s = draw_sample(population, 5000, seed=0)
        assert np.mean(list(s.dataset.group_sizes().values())) == 1000

    def test_rows_map_back(self, population):
        s = draw_sample(population, 2000, seed=1)
        np.testing.assert_array_equal(s.dataset.outcome, population.dataset.outcome[s.rows])
        assert len(np.unique(s.rows)) == len(s.rows)
        assert s.true_gates == population.true_gate

    def test_full_draw_is_permutation(self):
        pop = generate_population(small())
        s = draw_sample(pop, pop.dataset.n, seed=2)
        np.testing.assert_array_equal(np.sort(s.rows), np.arange(pop.dataset.n))

    def test_too_large(self):
        pop = generate_population(small())
        with pytest.raises(SampleTooLargeError):
            draw_sample(pop, pop.dataset.n + 1)

    def test_deterministic(self, population):
        a = draw_sample(population, 3000, seed=9)
        b = draw_sample(population, 3000, seed=9)
        np.testing.assert_array_equal(a.rows, b.rows)
        np.testing.assert_array_equal(a.split.tags, b.split.tags)

    def test_estimation_fractions(self, population):
        s = draw_sample(population, 50_000, seed=0)
        counts = s.split.counts(s.dataset)
        for g, f in zip(SimConfig().labels, SimConfig().estimation_fractions):
            c = counts[g]
            detect = c[0] + c[1]
            assert c[1] / detect == pytest.approx(f, abs=1e-3)

    def test_collapse_weights_converge(self, population):
        def rmse(n):
            s = draw_sample(population, n, seed=0)
            errs = []
            for g in s.dataset.groups:
                v = s.dataset.view(g)
                w_hat = estimate_collapse_weights(v).weights
                w_true = population.p0[s.rows[v.index]] / population.p0[population.dataset.view(g).index].mean()
                errs.append(np.mean((w_hat - w_true) ** 2))
            return np.sqrt(np.mean(errs))

        assert rmse(50_000) < rmse(2_000)


class TestBiasRecovery:
    @pytest.mark.slow
    def test_beta_recovered(self, population):
        b = {g: [] for g in population.true_gate}
        for seed in range(200):
            s = draw_sample(population, 50_000, seed=seed)
            for g in s.dataset.groups:
                b[g].append(estimate_group_bias(s.dataset.view(g), s.split))
        for g, beta in zip(SimConfig().labels, SimConfig().beta):
            v = np.asarray(b[g])
            se = v.std(ddof=1) / np.sqrt(len(v))
            assert abs(v.mean() - beta) <= 3 * se

    def test_injected_shift_interval(self):
        # one group, beta = 0.3, N_g = 10,000: estimate lands in [0.2, 0.4] almost always
        hits = 0
        for seed in range(100):
            cfg = SimConfig(n_population=10_000, group_props=(1.0,), zeta=(1.0,), beta=(0.3,), rho=(1.0,), estimation_fractions=(0.5,), seed=seed)
            pop = generate_population(cfg)
            s = draw_sample(pop, 10_000, seed=seed)
            hits += 0.2 <= estimate_group_bias(s.dataset.view("G1"), s.split) <= 0.4
        assert hits >= 95
