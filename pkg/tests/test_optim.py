import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dauconv import optim


def group(role="dense_weight", values=None, **kw):
    if values is None:
        values = np.zeros(3)
    return optim.make_group(f"g.{role}", role, values, **kw)


def cfg(**kw):
    base = dict(base_lr=0.1, momentum=0.0, weight_decay=0.0,
                batch_size=4, total_iterations=100)
    base.update(kw)
    return optim.TrainConfig(**base)


def test_plain_step():
    g = group(values=np.zeros(1))
    optim.sgd_step([g], [np.ones(1)], cfg(), 0)
    np.testing.assert_allclose(g.values, [-0.1])


def test_momentum_velocity_recursion():
    g = group(values=np.zeros(1))
    c = cfg(base_lr=1.0, momentum=0.9)
    optim.sgd_step([g], [np.ones(1)], c, 0)
    np.testing.assert_allclose(g.values, [-1.0])
    optim.sgd_step([g], [np.ones(1)], c, 1)
    np.testing.assert_allclose(g.values, [-2.9])  # second move is 1.9


def test_selective_decay_skips_displacements():
    w = group(role="dau_weight", values=np.full(2, 2.0))
    mu = group(role="dau_mu", values=np.full(2, 2.0), clamp_abs=4.0)
    c = cfg(base_lr=0.1, weight_decay=0.0005)
    optim.sgd_step([w, mu], [np.zeros(2), np.zeros(2)], c, 0)
    np.testing.assert_allclose(w.values, 2.0 * (1 - 0.1 * 0.0005))
    assert np.array_equal(mu.values, np.full(2, 2.0))  # bit-identical


def test_mu_group_defaults():
    mu = group(role="dau_mu", values=np.zeros(2), clamp_abs=4.0)
    assert mu.lr_multiplier == 500.0
    assert not mu.weight_decay_enabled
    with pytest.raises(ValueError):
        optim.ParamGroup("x", "dau_mu", np.zeros(1), weight_decay_enabled=True)


def test_mu_clamped_after_step():
    mu = group(role="dau_mu", values=np.array([3.9, -3.9]), clamp_abs=4.0,
               mu_lr_multiplier=1.0)
    optim.sgd_step([mu], [np.array([-5.0, 5.0])], cfg(base_lr=1.0), 0)
    np.testing.assert_array_equal(mu.values, [4.0, -4.0])


def test_sigma_floor_counts():
    s = group(role="dau_sigma", values=np.array([0.06, 0.5]))
    clamps = optim.sgd_step([s], [np.array([10.0, 0.0])], cfg(base_lr=0.1), 0)
    assert clamps == 1
    np.testing.assert_allclose(s.values, [optim.MIN_LEARNABLE_SIGMA, 0.5])


def test_nan_grad_aborts_without_update():
    g1 = group(values=np.full(2, 1.0))
    g2 = group(role="bias", values=np.full(2, 1.0))
    with pytest.raises(optim.OptimizerError, match="g.bias"):
        optim.sgd_step([g1, g2], [np.ones(2), np.array([1.0, np.nan])], cfg(), 0)
    np.testing.assert_array_equal(g1.values, 1.0)
    np.testing.assert_array_equal(g2.values, 1.0)


def test_schedules():
    c = optim.TrainConfig(base_lr=1.0, schedule="poly", poly_power=1.0,
                          total_iterations=100)
    assert optim.lr_schedule(c, 50) == 0.5
    c = optim.TrainConfig(base_lr=1.0, schedule="poly", poly_power=0.9,
                          total_iterations=100)
    assert optim.lr_schedule(c, 0) == 1.0
    c = optim.TrainConfig(base_lr=1.0, schedule="step", step_drops=(200000,),
                          total_iterations=400000)
    assert optim.lr_schedule(c, 199999) == 1.0
    assert optim.lr_schedule(c, 200000) == pytest.approx(0.1)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["poly", "step"]), st.integers(0, 1000), st.integers(0, 1000))
def test_schedule_nonincreasing(kind, a, b):
    c = optim.TrainConfig(base_lr=1.0, schedule=kind, poly_power=0.9,
                          step_drops=(100, 400, 800), total_iterations=1000)
    lo, hi = sorted((a, b))
    assert optim.lr_schedule(c, hi) <= optim.lr_schedule(c, lo) + 1e-15


def test_config_validation():
    with pytest.raises(ValueError):
        optim.TrainConfig(base_lr=0.0)
    with pytest.raises(ValueError):
        optim.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        optim.TrainConfig(weight_decay=-1.0)
