import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import solve_banded

from wealthkin.core import (Distribution, ModelParams, VelocityField, XGrid, build_grid, even_polynomial,
                            lognormal_distribution, quadrature)
from wealthkin.equilibrium import (CostProfile, equilibrium_fixed_point, gibbs_measure,
                                   inverse_gamma_equilibrium, l1_distance, mean_wealth)
from wealthkin.errors import CFLError
from wealthkin.kinetic import (KineticField, bernoulli, collision_apply, collision_operator_from_xi,
                               explicit_dt_limit, linear_collision_apply, local_equilibrium_field,
                               moments_field, relax_homogeneous, run_inhomogeneous, step_homogeneous,
                               step_inhomogeneous, transport, _face_velocity)

import oracles


def mixture(grid, comps):
    y = grid.nodes
    v = np.zeros(grid.size)
    for w, m, s in comps:
        mu = math.log(m) - 0.5 * s * s
        v += w * np.exp(-(np.log(y) - mu) ** 2 / (2 * s * s)) / (y * s)
    return Distribution.from_values(grid, v)


def random_mixtures(grid, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = rng.integers(1, 4)
        out.append(mixture(grid, [(rng.uniform(0.2, 1), rng.uniform(0.5, 2), rng.uniform(0.2, 0.6))
                                  for _ in range(k)]))
    return out


def test_bernoulli_function():
    x = np.array([-800.0, -1.0, 0.0, 1e-12, 1.0, 800.0])
    b = bernoulli(x)
    assert b[2] == 1.0
    assert b[3] == pytest.approx(1.0)
    assert b[4] == pytest.approx(1 / math.expm1(1.0))
    assert b[0] == pytest.approx(800.0) and b[-1] == 0.0
    assert np.allclose(bernoulli(-x) - bernoulli(x), x)


@pytest.fixture(scope="module")
def deep_equilibrium():
    # wide enough that the wealth-anchoring multiplier is below round-off
    g = build_grid(1e-3, 1e6, 2048)
    p = ModelParams(2.0, 1.0)
    res = equilibrium_fixed_point(lognormal_distribution(g), p, tol=1e-13)
    assert abs(res.wealth_multiplier) < 1e-10
    return res, p


def test_collision_annihilates_converged_equilibrium(deep_equilibrium):
    res, p = deep_equilibrium
    g = res.nu_star.grid
    rate = collision_apply(res.nu_star, p)
    scale = np.max(np.abs(collision_operator_from_xi(res.xi_star.values, g, 1.0).diag
                          * res.nu_star.values))
    assert np.max(np.abs(rate)) < 1e-13 * scale


@pytest.mark.parametrize("face_mean", ["sg", "geometric"])
def test_linear_operator_is_exact_on_any_gibbs_measure(face_mean):
    g = build_grid(1e-2, 1e2, 400)
    y = g.nodes
    p = ModelParams(1.0, 0.7)
    xi = CostProfile(g, np.sin(3 * np.log(y)) + 2.5 * np.log(y) + 0.3 / y, "twisted")
    M, _ = gibbs_measure(xi, p)
    rate = linear_collision_apply(M, xi, p, face_mean)
    A = collision_operator_from_xi(xi.values, g, p.d, face_mean)
    assert np.max(np.abs(rate)) < 1e-12 * np.max(np.abs(A.diag * M.values))


@pytest.mark.parametrize("face_mean", ["sg", "geometric"])
def test_rate_has_zero_mass_moment(wide_grid, quad_params, face_mean):
    for nu in random_mixtures(wide_grid, 20, 11):
        rate = collision_apply(nu, quad_params, face_mean)
        assert abs(quadrature(rate, wide_grid)) < 1e-12 * quadrature(np.abs(rate), wide_grid)


def test_rate_wealth_moment_quadratic(wide_grid, quad_params):
    for nu in random_mixtures(wide_grid, 20, 12):
        rate = collision_apply(nu, quad_params)
        y = wide_grid.nodes
        assert abs(quadrature(y * rate, wide_grid)) < 1e-6 * quadrature(np.abs(y * rate), wide_grid)


@given(st.floats(0.5, 2.0), st.floats(0.2, 0.6))
def test_mass_moment_property(m, s):
    g = build_grid(1e-3, 1e3, 256)
    nu = mixture(g, [(1.0, m, s)])
    rate = collision_apply(nu, ModelParams(2.0, 1.0, phi=even_polynomial([0, 0.5, 0.05])))
    assert abs(quadrature(rate, g)) <= 1e-12 * quadrature(np.abs(rate), g)


def test_step_keeps_equilibrium(deep_equilibrium):
    res, p = deep_equilibrium
    new = step_homogeneous(res.nu_star, 0.01, p)
    assert np.max(np.abs(new.values - res.nu_star.values)) < 1e-12 * res.nu_star.values.max()


def test_mass_exact_over_many_steps(quad_params):
    g = build_grid(1e-2, 1e3, 128)
    nu = lognormal_distribution(g)
    final, snaps, _ = relax_homogeneous(nu, quad_params, 50.0, 0.005)
    assert abs(final.mass - 1.0) < 1e-12


def test_relaxation_to_inverse_gamma_small_grid(quad_params):
    g = build_grid(1e-3, 1e3, 256)
    final, _, _ = relax_homogeneous(lognormal_distribution(g), quad_params, 30.0, 0.02)
    ref, _ = inverse_gamma_equilibrium(mean_wealth(final), quad_params, g)
    assert l1_distance(final, ref) < 1e-2


def test_wealth_drift_rate(wide_grid, quad_params):
    nu = lognormal_distribution(wide_grid)
    dt, n = 0.01, 100
    final, _, _ = relax_homogeneous(nu, quad_params, n * dt, dt)
    drift = abs(mean_wealth(final) * final.mass - mean_wealth(nu)) / (n * dt)
    assert drift < 1e-6 * mean_wealth(nu)


def test_frozen_cost_weighted_norm_decreases():
    g = build_grid(1e-2, 1e3, 300)
    p = ModelParams(2.0, 1.0)
    M, _ = inverse_gamma_equilibrium(1.0, p, g)
    xi = -p.d * np.log(M.values)
    A = collision_operator_from_xi(xi, g, p.d)
    nu = mixture(g, [(1.0, 0.6, 0.3), (0.5, 3.0, 0.4)]).values
    prev = quadrature(nu ** 2 / M.values, g)
    for _ in range(50):
        nu = solve_banded((1, 1), A.banded(0.05), nu)
        cur = quadrature(nu ** 2 / M.values, g)
        assert cur <= prev * (1 + 1e-13)
        prev = cur


def test_first_order_in_time(quad_params):
    g = build_grid(1e-2, 1e3, 128)
    nu0 = lognormal_distribution(g, 1.0, 0.5)
    T = 1.0
    sols = [relax_homogeneous(nu0, quad_params, T, dt)[0].values for dt in (0.04, 0.02, 0.01)]
    e1 = quadrature(np.abs(sols[0] - sols[1]), g)
    e2 = quadrature(np.abs(sols[1] - sols[2]), g)
    assert math.log2(e1 / e2) >= 0.8


def test_explicit_scheme_cfl(quad_params):
    g = build_grid(1e-2, 1e2, 200)
    nu = lognormal_distribution(g)
    lim = explicit_dt_limit(nu, quad_params)
    step_homogeneous(nu, 0.5 * lim, quad_params, "explicit-euler")
    with pytest.raises(CFLError):
        step_homogeneous(nu, 50 * lim, quad_params, "explicit-euler")


# -- inhomogeneous ----------------------------------------------------------

def test_zero_velocity_reduces_to_homogeneous(quad_params):
    yg = build_grid(1e-2, 1e2, 128)
    xg = XGrid(0.0, 1.0, 5)
    rows = np.array([mixture(yg, [(1.0, 0.5 + 0.3 * k, 0.4)]).values * (1 + k) for k in range(5)])
    p = quad_params.with_(epsilon=0.5)
    f = step_inhomogeneous(KineticField(xg, yg, rows, 0.5), 0.01, p)
    for k in range(5):
        nu = Distribution(yg, rows[k])
        ref = step_homogeneous(nu, 0.02, p)
        assert np.max(np.abs(f.values[k] - ref.values)) < 1e-13 * ref.values.max()


def test_inhomogeneous_conserves_mass(quad_params):
    yg = build_grid(1e-3, 1e3, 96)
    xg = XGrid(0.0, 1.0, 40)
    p = quad_params.with_(velocity=VelocityField("linear"))
    rho = 1 + 0.3 * np.sin(2 * math.pi * xg.centers)
    f0 = local_equilibrium_field(xg, yg, rho, 1.0, p, epsilon=0.05)
    f, masses = run_inhomogeneous(f0, p, 0.05, 5e-4)
    assert np.max(np.abs(masses - masses[0])) < 1e-10 * masses[0]
    assert abs(f.total_wealth - f0.total_wealth) < 1e-4 * f0.total_wealth


def test_local_equilibria_track_hydro(quad_params):
    from wealthkin.hydro import hydro_state_from_moments, run_hydro
    yg = build_grid(1e-3, 1e3, 128)
    xg = XGrid(0.0, 1.0, 50)
    p = quad_params.with_(velocity=VelocityField("linear"))
    rho = 1 + 0.2 * np.sin(2 * math.pi * xg.centers)
    f0 = local_equilibrium_field(xg, yg, rho, 1.0, p, epsilon=0.01)
    f, _ = run_inhomogeneous(f0, p, 0.1, 5e-4)
    h, _ = run_hydro(hydro_state_from_moments(xg, rho, 1.0), p, 0.1, yg, dt_max=5e-4, flux="kinetic")
    m = moments_field(f)
    err = np.sum(np.abs(m.rho - h.rho)) * xg.dx
    assert err < 0.01 + xg.dx


def test_transport_cfl_guard():
    yg = build_grid(1.0, 2.0, 4)
    xg = XGrid(0.0, 1.0, 10)
    vf = _face_velocity(xg, yg, ModelParams(1.0, 1.0, velocity=VelocityField("linear")))
    f = np.ones((10, 4))
    with pytest.raises(CFLError):
        transport(f, 1.0, xg, vf, substeps=False)
    out = transport(f, 1.0, xg, vf, substeps=True)
    assert np.allclose(out, 1.0)


def test_upwind_transport_shifts_profile_exactly_at_unit_cfl():
    yg = build_grid(1.0, 2.0, 2)
    xg = XGrid(0.0, 1.0, 8)
    vf = _face_velocity(xg, yg, ModelParams(1.0, 1.0, velocity=VelocityField("constant", v0=0.9)))
    f = np.zeros((8, 2))
    f[2] = 1.0
    out = transport(f, xg.dx, xg, vf, substeps=True)
    assert out[2, 0] == pytest.approx(0.1) and out[3, 0] == pytest.approx(0.9)


# -- moments ----------------------------------------------------------------

def test_moments_of_uniform_equilibrium(quad_params):
    yg = build_grid(1e-3, 1e6, 2048)
    xg = XGrid(0.0, 1.0, 6)
    M, _ = inverse_gamma_equilibrium(1.0, quad_params, yg)
    f = KineticField(xg, yg, np.tile(2.5 * M.values, (6, 1)), 1.0)
    m = moments_field(f)
    assert np.allclose(m.rho, 2.5, rtol=1e-13)
    assert np.max(np.abs(m.upsilon - 1.0)) < 1e-6


def test_moments_of_zero_field():
    yg = build_grid(1e-2, 1e2, 16)
    m = moments_field(KineticField(XGrid(0, 1, 4), yg, np.zeros((4, 16)), 1.0))
    assert not np.any(m.rho) and not np.any(m.defined) and np.all(np.isnan(m.upsilon))


def test_moments_match_brute_force_two_bumps():
    yg = build_grid(1e-2, 1e2, 64)
    xg = XGrid(0.0, 1.0, 20)
    x = xg.centers[:, None]
    y = yg.nodes[None, :]
    f = (np.exp(-((x - 0.3) / 0.05) ** 2) * np.exp(-np.log(y) ** 2)
         + 0.5 * np.exp(-((x - 0.7) / 0.08) ** 2) * np.exp(-np.log(y / 3) ** 2))
    m = moments_field(KineticField(xg, yg, f, 1.0))
    rho, w = oracles.brute_cell_moments(f, yg.nodes)
    assert np.allclose(m.rho, rho, rtol=1e-13, atol=0)
    ok = m.defined
    assert np.allclose(m.upsilon[ok], (w / rho)[ok], rtol=1e-12)
