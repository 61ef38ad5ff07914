import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpvalue import dp


def test_clip_examples():
    g = np.array([2.0, 0.0])
    clipped = dp.clip_gradient(g, 1.0)
    assert np.allclose(clipped, [1.0, 0.0])
    assert np.linalg.norm(clipped) == pytest.approx(1.0)
    g2 = np.array([0.3, 0.4])
    assert np.array_equal(dp.clip_gradient(g2, 1.0), g2)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8),
    st.floats(1e-3, 1e3),
)
def test_clip_norm_property(vals, clip):
    g = np.array(vals)
    out = dp.clip_gradient(g, clip)
    assert abs(np.linalg.norm(out) - min(np.linalg.norm(g), clip)) < 1e-9 * max(1.0, clip)
    # direction preserved
    if np.linalg.norm(g) > 0:
        assert np.dot(out, g) >= 0


def test_clip_rejects_nonfinite():
    with pytest.raises(ValueError):
        dp.clip_gradient(np.array([1.0, np.nan]), 1.0)
    with pytest.raises(ValueError):
        dp.clip_gradient(np.array([1.0]), 0.0)


def test_sample_noise_zero_sigma():
    cfg = dp.NoiseConfig(1.0, 0.0, budget=10)
    assert np.array_equal(dp.sample_noise(5, cfg, np.random.default_rng(0)), np.zeros(5))


def test_sample_noise_variance():
    cfg = dp.NoiseConfig(1.0, 1.0, budget=1)
    draws = dp.sample_noise(1_000_000, cfg, np.random.default_rng(1))
    assert abs(draws.var() - 1.0) < 0.01


def test_sample_noise_budget_scaling():
    rng = np.random.default_rng(2)
    v1 = dp.sample_noise(1_000_000, dp.NoiseConfig(1.0, 1.0, budget=1), rng).var()
    v100 = dp.sample_noise(1_000_000, dp.NoiseConfig(1.0, 1.0, budget=100), rng).var()
    assert abs(v100 / v1 - 100.0) < 3.0


def test_calibrate_sigma_value():
    sigma = dp.calibrate_sigma(1.0, 5e-5)
    assert sigma == pytest.approx(math.sqrt(2.0 * math.log(25_000.0)))
    assert round(sigma, 2) == 4.50


def test_calibrate_sigma_scaling_and_limits():
    assert dp.calibrate_sigma(2.0, 5e-5) == pytest.approx(dp.calibrate_sigma(1.0, 5e-5) / 2)
    # monotone decreasing toward the delta boundary; the formula's zero sits at
    # delta = 1.25, outside the admissible range
    deltas = [1e-6, 1e-3, 0.5, 0.999999]
    sigmas = [dp.calibrate_sigma(1.0, d) for d in deltas]
    assert all(a > b for a, b in zip(sigmas, sigmas[1:]))
    assert math.sqrt(2.0 * math.log(1.25 / 1.2499999)) < 1e-3
    with pytest.raises(ValueError):
        dp.calibrate_sigma(0.0, 1e-5)
    with pytest.raises(ValueError):
        dp.calibrate_sigma(1.0, 1.0)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        dp.NoiseConfig(0.0, 1.0, budget=10)
    with pytest.raises(ValueError):
        dp.NoiseConfig(1.0, 1.0, budget=10, mode="corr_y", q=0.31)  # k*q not integral
    with pytest.raises(ValueError):
        dp.NoiseConfig(1.0, 1.0, budget=10, mode="corr_y")  # q missing
    with pytest.raises(ValueError):
        dp.NoiseConfig(1.0, 1.0, budget=10, mode="iid", q=0.5)
    cfg = dp.NoiseConfig(1.0, 1.0, budget=10, mode="corr_y", q=0.5)
    assert cfg.burn_in == 5


def test_combine_diag_prefix_mean():
    cfg = dp.NoiseConfig(1.0, 1.0, budget=8, mode="corr_x")
    assert dp.combine_diag("corr_x", 1, cfg) == 1.0
    assert dp.combine_diag("corr_x", 4, cfg) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        dp.combine_diag("corr_x", 0, cfg)
    with pytest.raises(ValueError):
        dp.combine_diag("corr_x", 9, cfg)


def test_combine_diag_variance_aware_reductions():
    # sigma_g^2 = 0 reduces to the prefix mean
    cfg0 = dp.NoiseConfig(1.0, 1.0, budget=10, mode="corr_x", sigma_g_sq=0.0)
    for t in range(1, 11):
        assert dp.combine_diag("corr_x", t, cfg0) == pytest.approx(1.0 / t)
    # huge budget pushes the variance-aware diagonal back to 1/t
    cfg = dp.NoiseConfig(1.0, 1.0, budget=10**9, mode="corr_x", sigma_g_sq=1.0)
    for t in (2, 5, 10):
        assert abs(dp.combine_diag("corr_x", t, cfg) - 1.0 / t) < 1e-6


def test_combine_diag_in_unit_interval():
    cfg = dp.NoiseConfig(1.0, 2.0, budget=50, mode="corr_x", sigma_g_sq=3.0)
    fl = dp.NoiseConfig(1.0, 2.0, budget=50, mode="fl_schedule")
    for t in range(1, 51):
        assert 0.0 < dp.combine_diag("corr_x", t, cfg) <= 1.0
        assert 0.0 < dp.combine_diag("fl_schedule", t, fl) <= 1.0


def test_fl_schedule_endpoints():
    cfg = dp.NoiseConfig(1.0, 1.0, budget=10, mode="fl_schedule")
    assert dp.combine_diag("fl_schedule", 10, cfg) == pytest.approx(0.05)
    assert dp.combine_diag("fl_schedule", 1, cfg) == pytest.approx(0.75 - 0.07)


def test_release_first_iteration_passthrough():
    state = dp.RollingGradientState.empty(3)
    g = np.array([1.0, -2.0, 0.5])
    released, state2 = dp.release_correlated(g, state, diag=1.0)
    assert np.array_equal(released, g)
    assert state2.count == 1
    assert np.array_equal(state2.g_roll, g)


def test_release_constant_gradients_stay_fixed():
    g = np.array([0.7, -0.1])
    state = dp.RollingGradientState.empty(2)
    for t in range(1, 8):
        released, state = dp.release_correlated(g, state, diag=1.0 / t)
        assert np.allclose(released, g)


def test_release_prefix_mean_unrolls():
    rng = np.random.default_rng(8)
    gs = rng.standard_normal((12, 4))
    state = dp.RollingGradientState.empty(4)
    for t in range(1, 13):
        released, state = dp.release_correlated(gs[t - 1], state, diag=1.0 / t)
        assert np.allclose(released, gs[:t].mean(axis=0), atol=1e-12)


def test_release_row_weights_sum_to_one():
    # feed basis vectors: the released vector exposes the implicit row weights
    for diag_fn in (lambda t: 1.0 / t, lambda t: 0.75 - 0.7 * t / 6):
        k = 6
        state = dp.RollingGradientState.empty(k)
        for t in range(1, k + 1):
            e = np.zeros(k)
            e[t - 1] = 1.0
            released, state = dp.release_correlated(e, state, diag=diag_fn(t))
            assert np.all(released >= -1e-12)
            assert released.sum() == pytest.approx(1.0, abs=1e-12)
            # lower triangular: no weight on future gradients
            assert np.all(released[t:] == 0.0)


def test_release_ignores_future_gradients():
    rng = np.random.default_rng(3)
    gs = rng.standard_normal((6, 3))
    def releases(stack):
        state = dp.RollingGradientState.empty(3)
        out = []
        for t in range(1, 5):
            rel, state = dp.release_correlated(stack[t - 1], state, diag=1.0 / t)
            out.append(rel)
        return np.array(out)
    base = releases(gs)
    perturbed = gs.copy()
    perturbed[5] += 100.0
    assert np.array_equal(base, releases(perturbed))


def test_release_depends_only_on_perturbed_sequence():
    # post-processing: identical perturbed gradients give identical releases,
    # whatever raw gradients produced them
    rng = np.random.default_rng(4)
    g_tilde = rng.standard_normal((5, 3))
    state_a = dp.RollingGradientState.empty(3)
    state_b = dp.RollingGradientState.empty(3)
    for t in range(1, 6):
        rel_a, state_a = dp.release_correlated(g_tilde[t - 1], state_a, diag=1.0 / t)
        rel_b, state_b = dp.release_correlated(g_tilde[t - 1].copy(), state_b, diag=1.0 / t)
        assert np.array_equal(rel_a, rel_b)


def test_effective_noise_variance():
    cfg = dp.NoiseConfig(2.0, 1.5, budget=100, mode="corr_x")
    base = 100 * (2.0 * 1.5) ** 2
    assert dp.effective_noise_variance("iid", 37, cfg) == pytest.approx(base)
    assert dp.effective_noise_variance("corr_x", 1, cfg) == pytest.approx(base)
    assert dp.effective_noise_variance("corr_x", 100, cfg) == pytest.approx((2.0 * 1.5) ** 2)
    with pytest.raises(ValueError):
        dp.effective_noise_variance("fl_schedule", 1, cfg)
    aware = dp.NoiseConfig(2.0, 1.5, budget=100, mode="corr_x", sigma_g_sq=1.0)
    with pytest.raises(ValueError):
        dp.effective_noise_variance("corr_x", 2, aware)


def test_released_noise_variance_monte_carlo():
    # prefix-mean releases of pure noise match k*(C*sigma)^2 / t per coordinate
    k, c, sigma = 16, 1.0, 1.0
    reps = 1_000_000
    rng = np.random.default_rng(11)
    z = math.sqrt(k) * c * sigma * rng.standard_normal((reps, 16))
    prefix = np.cumsum(z, axis=1) / np.arange(1, 17)
    for t in (1, 4, 16):
        target = k * (c * sigma) ** 2 / t
        assert abs(prefix[:, t - 1].var() / target - 1.0) < 0.03
