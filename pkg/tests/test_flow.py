import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from noisesearch.errors import DomainError, StateError
from noisesearch.flow import (
    ODE,
    FlowState,
    GmmTarget,
    Interpolant,
    SdeChurn,
    TimeGrid,
    component_marginal_std,
    drift_and_diffusion,
    integrate as flow_integrate,
    log_marginal,
    posterior_mean_x1,
    responsibilities,
    sample_prior,
    schedule,
    score,
    step,
    velocity,
)

LIN, VP = Interpolant.LINEAR, Interpolant.VP

THREE = GmmTarget.from_components([(0.2, (0, 0), 0.5), (0.5, (2, -1), 0.8), (0.3, (-1.5, 1), 0.3)])
TWO = GmmTarget.from_components([(0.4, (1, 1), 0.5), (0.6, (-1, 0.5), 0.7)])
FOUR = GmmTarget.from_components([(0.1, (3, 3), 0.4), (0.2, (-3, 3), 0.6), (0.3, (-3, -3), 0.5), (0.4, (3, -3), 0.3)])
STD_NORMAL = GmmTarget.from_components([(1.0, (0, 0), 1.0)])


def oracle_log_pt(target, interp, z, t):
    """log p_t(z) assembled from scipy's Gaussian densities."""
    a, b, _, _ = schedule(interp, t)
    terms = [
        math.log(w) + multivariate_normal(b * mu, (a * a + b * b * s * s) * np.eye(len(mu))).logpdf(z)
        for w, mu, s in zip(target.weights, target.means, target.stds)
    ]
    return logsumexp(terms)


def random_points(rng, n, t_lo, t_hi, scale=3.0):
    return rng.normal(scale=scale, size=(n, 2)), rng.uniform(t_lo, t_hi, size=n)


# --- schedule ---------------------------------------------------------------


def test_schedule_linear_endpoints_and_interior():
    assert schedule(LIN, 0.0) == (1.0, 0.0, -1.0, 1.0)
    assert schedule(LIN, 0.25) == (0.75, 0.25, -1.0, 1.0)
    assert schedule(LIN, 1.0) == (0.0, 1.0, -1.0, 1.0)


def test_schedule_vp_midpoint():
    a, b, da, db = schedule(VP, 0.5)
    h = math.pi / 2
    assert a == pytest.approx(math.cos(math.pi / 4), abs=1e-15)
    assert b == pytest.approx(math.sin(math.pi / 4), abs=1e-15)
    assert da == pytest.approx(-h * math.sin(math.pi / 4), abs=1e-15)
    assert db == pytest.approx(h * math.cos(math.pi / 4), abs=1e-15)
    assert (round(a, 5), round(b, 5), round(da, 5), round(db, 5)) == (0.70711, 0.70711, -1.11072, 1.11072)


@pytest.mark.parametrize("interp", [LIN, VP])
def test_schedule_endpoints_exact(interp):
    a0, b0, _, _ = schedule(interp, 0.0)
    a1, b1, _, _ = schedule(interp, 1.0)
    assert (a0, b0, a1, b1) == (1.0, 0.0, 0.0, 1.0)


@pytest.mark.parametrize("t", [-1e-9, 1.0000001, math.nan, 2.0])
def test_schedule_rejects_t_outside_unit_interval(t):
    with pytest.raises(DomainError):
        schedule(LIN, t)


def test_schedule_derivatives_match_finite_differences():
    for t in np.linspace(0.05, 0.95, 19):
        h = 1e-6
        lo, hi = schedule(VP, t - h), schedule(VP, t + h)
        _, _, da, db = schedule(VP, t)
        assert (hi[0] - lo[0]) / (2 * h) == pytest.approx(da, abs=1e-8)
        assert (hi[1] - lo[1]) / (2 * h) == pytest.approx(db, abs=1e-8)


# --- marginal std -----------------------------------------------------------


def test_component_marginal_std_examples():
    assert component_marginal_std(LIN, 0.0, 0.3) == 1.0
    assert component_marginal_std(LIN, 1.0, 0.3) == 0.3
    assert component_marginal_std(LIN, 0.5, 1.0) == pytest.approx(math.sqrt(0.5), abs=1e-15)
    with pytest.raises(DomainError):
        component_marginal_std(LIN, 0.5, 0.0)


@given(st.floats(0.001, 0.999), st.floats(0.01, 5.0), st.sampled_from([LIN, VP]))
def test_component_marginal_std_lower_bound(t, std, interp):
    a, b, _, _ = schedule(interp, t)
    assert component_marginal_std(interp, t, std) >= min(a, b * std) > 0


# --- responsibilities -------------------------------------------------------


def test_responsibilities_single_component_is_one():
    for t in (0.0, 0.3, 1.0):
        assert responsibilities(STD_NORMAL, LIN, np.array([0.7, -2.0]), t).tolist() == [1.0]


@pytest.mark.parametrize("t", [0.0, 0.2, 0.7, 1.0])
def test_responsibilities_symmetric_pair_at_origin(t):
    pair = GmmTarget.from_components([(0.5, (1.5, -0.5), 0.4), (0.5, (-1.5, 0.5), 0.4)])
    np.testing.assert_array_equal(responsibilities(pair, VP, np.zeros(2), t), [0.5, 0.5])


def mp_responsibilities(target, z, t):
    mp.mp.dps = 40
    t = mp.mpf(t)
    a, b = 1 - t, t
    dens = []
    for w, mu, s in zip(target.weights, target.means, target.stds):
        v = a ** 2 + b ** 2 * mp.mpf(s) ** 2
        q = sum((mp.mpf(zi) - b * mp.mpf(mi)) ** 2 for zi, mi in zip(z, mu))
        dens.append(mp.mpf(w) / (2 * mp.pi * v) * mp.exp(-q / (2 * v)))
    total = sum(dens)
    return [float(d / total) for d in dens]


def test_responsibilities_three_components_against_high_precision_densities():
    # 40-digit evaluation of the unnormalized densities, recorded once
    frozen = [0.051830838195964312296, 0.94816469308166424208, 4.4687223714456211506e-6]
    got = responsibilities(THREE, LIN, np.array([1.0, -0.5]), 0.6)
    np.testing.assert_allclose(mp_responsibilities(THREE, (1.0, -0.5), "0.6"), frozen, rtol=1e-14)
    np.testing.assert_allclose(got, frozen, rtol=1e-12)


def test_responsibilities_far_from_modes_do_not_underflow():
    g = responsibilities(FOUR, LIN, np.array([400.0, -350.0]), 0.9)
    assert np.all(np.isfinite(g))
    assert abs(g.sum() - 1.0) < 1e-12


def test_responsibilities_reject_non_finite_z():
    with pytest.raises(DomainError):
        responsibilities(FOUR, LIN, np.array([np.nan, 0.0]), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.permutations(range(4)), st.floats(0.0, 1.0), st.floats(-6, 6), st.floats(-6, 6))
def test_responsibilities_sum_to_one_and_permute_with_components(order, t, x, y):
    z = np.array([x, y])
    g = responsibilities(FOUR, VP, z, t)
    assert abs(g.sum() - 1.0) < 1e-12
    assert np.all(g >= 0)
    gp = responsibilities(FOUR.permuted(order), VP, z, t)
    np.testing.assert_allclose(gp, g[list(order)], rtol=1e-12, atol=1e-300)


# --- posterior mean ---------------------------------------------------------


@pytest.mark.parametrize("t", [0.0, 0.1, 0.5, 0.9, 0.99])
def test_tweedie_standard_normal_closed_form(t):
    z = np.array([0.8, -1.3])
    expected = t * z / ((1 - t) ** 2 + t ** 2)
    np.testing.assert_allclose(posterior_mean_x1(STD_NORMAL, LIN, z, t), expected, rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("target", [FOUR, THREE])
def test_tweedie_at_t1_returns_z_exactly(target):
    z = np.array([0.123456789, -9.87654321])
    np.testing.assert_array_equal(posterior_mean_x1(target, LIN, z, 1.0), z)
    np.testing.assert_array_equal(posterior_mean_x1(target, VP, z, 1.0), z)


def quadrature_posterior_mean(target, z, t):
    a, b = 1 - t, t

    def prior(x, y):
        return sum(w / (2 * np.pi * s * s) * np.exp(-((x - m[0]) ** 2 + (y - m[1]) ** 2) / (2 * s * s))
                   for w, m, s in zip(target.weights, target.means, target.stds))

    def lik(x, y):
        return np.exp(-((z[0] - b * x) ** 2 + (z[1] - b * y) ** 2) / (2 * a * a))

    opts = dict(epsabs=1e-13, epsrel=1e-12)
    norm = integrate.dblquad(lambda y, x: prior(x, y) * lik(x, y), -8, 8, -8, 8, **opts)[0]
    ex = integrate.dblquad(lambda y, x: x * prior(x, y) * lik(x, y), -8, 8, -8, 8, **opts)[0]
    ey = integrate.dblquad(lambda y, x: y * prior(x, y) * lik(x, y), -8, 8, -8, 8, **opts)[0]
    return np.array([ex / norm, ey / norm])


def test_tweedie_two_components_against_quadrature():
    # adaptive 2-D quadrature of the mixture posterior, recorded once
    frozen = np.array([0.16437931148591733, 0.8065815165313103])
    got = posterior_mean_x1(TWO, LIN, np.array([0.4, 0.4]), 0.3)
    np.testing.assert_allclose(got, frozen, rtol=1e-9)


@pytest.mark.slow
def test_tweedie_quadrature_oracle_reproduces_frozen_value():
    got = quadrature_posterior_mean(TWO, np.array([0.4, 0.4]), 0.3)
    np.testing.assert_allclose(got, [0.16437931148591733, 0.8065815165313103], rtol=1e-9)


def test_tweedie_score_identity_both_interpolants():
    rng = np.random.default_rng(11)
    for interp in (LIN, VP):
        z, ts = random_points(rng, 500, 0.0, 1.0)
        for zi, t in zip(z, ts):
            a, b, _, _ = schedule(interp, t)
            if b <= 0.1:
                continue
            lhs = posterior_mean_x1(FOUR, interp, zi, t)
            rhs = (zi + a * a * score(FOUR, interp, zi, t)) / b
            assert np.max(np.abs(lhs - rhs)) < 1e-8


# --- score ------------------------------------------------------------------


def test_score_standard_normal_at_t0():
    z = np.array([1.5, -0.25])
    np.testing.assert_allclose(score(STD_NORMAL, LIN, z, 0.0), -z, rtol=1e-15)


@pytest.mark.parametrize("t", [0.0, 0.35, 0.8, 1.0])
def test_score_single_component_closed_form(t):
    g = GmmTarget.from_components([(1.0, (2.0, -1.0), 0.4)])
    z = np.array([0.3, 0.9])
    for interp in (LIN, VP):
        a, b, _, _ = schedule(interp, t)
        s2 = a * a + b * b * 0.16
        np.testing.assert_allclose(score(g, interp, z, t), -(z - b * np.array([2.0, -1.0])) / s2, rtol=1e-13)


def test_score_matches_finite_differences_of_independent_log_density():
    rng = np.random.default_rng(5)
    h = 1e-4
    z, ts = random_points(rng, 200, 0.05, 0.95)
    for zi, t in zip(z, ts):
        fd = np.array([
            (oracle_log_pt(THREE, LIN, zi + h * e, t) - oracle_log_pt(THREE, LIN, zi - h * e, t)) / (2 * h)
            for e in np.eye(2)
        ])
        s = score(THREE, LIN, zi, t)
        assert np.linalg.norm(s - fd) / max(np.linalg.norm(s), 1e-3) < 1e-4


def test_log_marginal_agrees_with_scipy_density():
    rng = np.random.default_rng(2)
    z, ts = random_points(rng, 50, 0.0, 1.0)
    for zi, t in zip(z, ts):
        for interp in (LIN, VP):
            assert log_marginal(FOUR, interp, zi, t) == pytest.approx(oracle_log_pt(FOUR, interp, zi, t), rel=1e-11)


# --- velocity ---------------------------------------------------------------


def test_velocity_single_component_at_t0():
    g = GmmTarget.from_components([(1.0, (2.0, -1.0), 0.7)])
    z = np.array([0.5, 0.25])
    np.testing.assert_allclose(velocity(g, LIN, z, 0.0), np.array([2.0, -1.0]) - z, rtol=1e-15)


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.99, 1.0])
def test_velocity_vanishes_at_origin_for_centered_normal(t):
    np.testing.assert_array_equal(velocity(STD_NORMAL, LIN, np.zeros(2), t), np.zeros(2))


def test_velocity_single_component_closed_form_gaussian_field():
    # z_t ~ N(beta mu, s^2 I): v = beta_dot mu + (s_dot / s)(z - beta mu)
    mu, sd = np.array([1.0, -2.0]), 0.6
    g = GmmTarget.from_components([(1.0, mu, sd)])
    z = np.array([-0.4, 0.8])
    for interp in (LIN, VP):
        for t in (0.1, 0.5, 0.9):
            a, b, da, db = schedule(interp, t)
            s2 = a * a + b * b * sd * sd
            s_dot_over_s = (a * da + b * db * sd * sd) / s2
            expected = db * mu + s_dot_over_s * (z - b * mu)
            np.testing.assert_allclose(velocity(g, interp, z, t), expected, rtol=1e-12)


def test_velocity_algebraic_identity_on_mixture():
    rng = np.random.default_rng(8)
    for interp in (LIN, VP):
        z, ts = random_points(rng, 300, 0.0, 1.0)
        for zi, t in zip(z, ts):
            a, b, da, db = schedule(interp, t)
            if a <= 1e-6:
                continue
            x1 = posterior_mean_x1(FOUR, interp, zi, t)
            expected = da * (zi - b * x1) / a + db * x1
            assert np.max(np.abs(velocity(FOUR, interp, zi, t) - expected)) < 1e-10


# --- prior ------------------------------------------------------------------


def test_sample_prior_golden_value():
    # recorded once from numpy's default_rng (PCG64) with seed 2024
    got = sample_prior(3, np.random.default_rng(2024))
    np.testing.assert_allclose(got, [1.0288568739519013, 1.6419200406711503, 1.1467195295966137], rtol=1e-15)


def test_sample_prior_deterministic_per_seed():
    np.testing.assert_array_equal(sample_prior(5, np.random.default_rng(9)), sample_prior(5, np.random.default_rng(9)))


def test_sample_prior_moments():
    rng = np.random.default_rng(123)
    draws = np.stack([sample_prior(2, rng) for _ in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
    assert np.all(np.abs(draws.var(axis=0) - 1) < 0.03)


# --- step -------------------------------------------------------------------


def test_time_grid_validation():
    assert TimeGrid.uniform(10).steps == 10
    assert TimeGrid((0.0, 0.1, 0.5, 1.0)).steps == 3
    for bad in [(0.0, 0.5, 0.5, 1.0), (0.0, 0.6, 0.4, 1.0), (0.1, 1.0), (0.0, 0.9), (0.0,)]:
        with pytest.raises(DomainError):
            TimeGrid(bad)


def test_step_fixed_point_at_origin():
    grid = TimeGrid.uniform(10)
    s = step(FlowState.initial(np.zeros(2), grid), STD_NORMAL, LIN, grid, ODE, None)
    np.testing.assert_array_equal(s.z, np.zeros(2))
    assert (s.step, s.time) == (1, 0.1)


def test_euler_step_matches_hand_evaluation():
    # single component mu, std 1, linear: s^2 = (1-t)^2 + t^2
    mu = np.array([1.0, -0.5])
    g = GmmTarget.from_components([(1.0, mu, 1.0)])
    grid = TimeGrid((0.0, 0.2, 0.6, 1.0))
    z = np.array([0.3, 0.7])
    state = FlowState(z, 1, 0.2)
    t, dt = 0.2, 0.4
    s2 = (1 - t) ** 2 + t ** 2
    x1 = mu + (t / s2) * (z - t * mu)
    sc = -(z - t * mu) / s2
    v = (1 - t) * sc + x1
    out = step(state, g, LIN, grid, ODE, None)
    np.testing.assert_allclose(out.z, z + v * dt, rtol=1e-14)
    assert (out.step, out.time) == (2, 0.6)


def test_step_past_final_point_is_a_state_error():
    grid = TimeGrid.uniform(2)
    with pytest.raises(StateError):
        step(FlowState(np.zeros(2), 2, 1.0), STD_NORMAL, LIN, grid, ODE, None)


def test_churn_step_mean_matches_drift_corrected_destination():
    grid = TimeGrid.uniform(10)
    churn = SdeChurn(0.8)
    state = FlowState(np.array([0.9, -1.4]), 3, grid.times[3])
    n = 10_000
    rng = np.random.default_rng(77)
    outs = np.stack([step(state, FOUR, LIN, grid, churn, rng).z for _ in range(n)])
    # oracle: deterministic Euler destination plus the sigma^2/2 score correction
    t, dt = grid.times[3], grid.times[4] - grid.times[3]
    a = schedule(LIN, t)[0]
    sigma = 0.8 * a
    dest = state.z + (velocity(FOUR, LIN, state.z, t) + 0.5 * sigma ** 2 * score(FOUR, LIN, state.z, t)) * dt
    tol = 4 * sigma * math.sqrt(dt) / math.sqrt(n)
    assert np.all(np.abs(outs.mean(axis=0) - dest) < tol)
    assert np.all(np.abs(outs.std(axis=0) - sigma * math.sqrt(dt)) < 0.05 * sigma * math.sqrt(dt))


def test_zero_churn_is_bitwise_ode_and_leaves_rng_untouched():
    grid = TimeGrid.uniform(10)
    z0 = np.random.default_rng(3).standard_normal((64, 2))
    rng = np.random.default_rng(99)
    before = rng.bit_generator.state
    sde = flow_integrate(z0, FOUR, VP, grid, SdeChurn(0.0), rng)
    assert rng.bit_generator.state == before
    ode = flow_integrate(z0, FOUR, VP, grid, ODE, None)
    np.testing.assert_array_equal(sde, ode)


def test_diffusion_vanishes_at_t1():
    _, sigma = drift_and_diffusion(FOUR, LIN, np.zeros(2), 1.0, SdeChurn(0.5))
    assert sigma == 0.0


def test_single_step_grid_path_is_deterministic_given_seed():
    grid = TimeGrid.uniform(10)
    a = flow_integrate(np.ones(2), FOUR, LIN, grid, SdeChurn(0.5), np.random.default_rng(4))
    b = flow_integrate(np.ones(2), FOUR, LIN, grid, SdeChurn(0.5), np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("interp", [LIN, VP])
def test_ode_transport_reproduces_mode_weights(interp):
    grid = TimeGrid.uniform(200)
    z0 = np.random.default_rng(2025).standard_normal((10_000, 2))
    x = flow_integrate(z0, FOUR, interp, grid)
    d2 = ((x[:, None, :] - FOUR.means[None]) ** 2).sum(-1)
    freq = np.bincount(d2.argmin(axis=1), minlength=4) / len(x)
    assert np.all(np.abs(freq - FOUR.weights) < 0.03), freq
