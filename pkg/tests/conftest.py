import numpy as np
import pytest

from groupbias import Dataset, EffectScale


def make_dataset(group, treatment, outcome, cate_pred, mu0_pred=None, scale="additive", **aux):
    return Dataset(
        group=group,
        treatment=treatment,
        outcome=outcome,
        cate_pred=cate_pred,
        mu0_pred=mu0_pred,
        aux={k: np.asarray(v) for k, v in aux.items()},
        scale=EffectScale(scale),
    )


def random_binary_dataset(rng, n_groups=3, n_per_group=400, p0=0.3, lift=1.2, pred_shift=0.0, scale="relative"):
    """Binary outcomes, known arm rates, predictions = true ratio + shift."""
    n = n_groups * n_per_group
    group = np.repeat([f"g{i}" for i in range(n_groups)], n_per_group)
    t = np.tile(np.arange(n_per_group) % 2, n_groups)
    p = np.where(t == 1, p0 * lift, p0)
    y = (rng.random(n) < p).astype(float)
    pred = np.full(n, lift + pred_shift)
    return make_dataset(group, t, y, pred, mu0_pred=np.full(n, p0), scale=scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
