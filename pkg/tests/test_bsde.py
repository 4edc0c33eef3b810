"""Regression solver for the backward representation.

Oracles: the same quadrature eigenexpansion as the FD tests for the
unit problem (boundary pay 1, no driver), and plain linearity for
constant drivers (adding f = c shifts u by c T exactly). Monte Carlo
tolerances here are deliberately loose smoke bounds; the calibrated
comparisons against the FD oracle live in test_acceptance.
"""

import math

import numpy as np
import pytest

from neumannlab.bsde import (NeumannProblem, SolverConfig, direct_estimator,
                             evaluate_u, solve_finite_horizon,
                             solve_horizon_pair)
from neumannlab.errors import PreconditionError
from neumannlab.fields import Driver, driver, scalar_field
from neumannlab.geometry import IntervalDomain
from neumannlab.sde import SdeCoefficients


def unit_problem(drv="zero", g="constant:1", terminal="zero"):
    return NeumannProblem(
        coeffs=SdeCoefficients(None, 1.0, IntervalDomain()),
        driver=driver(drv),
        boundary_g=scalar_field(g),
        terminal_h=scalar_field(terminal),
    )


def series_u(t, x, n_terms=60):
    xs = np.linspace(-1.0, 1.0, 4001)
    w0 = 1.0 / 6.0 - xs ** 2 / 2.0
    val = t / 2.0 + x ** 2 / 2.0 - 1.0 / 6.0
    for n in range(1, n_terms + 1):
        psi = np.cos(n * np.pi * (xs + 1.0) / 2.0)
        a_n = np.trapezoid(w0 * psi, xs)
        mu_n = (n * np.pi / 2.0) ** 2 / 2.0
        val += a_n * math.cos(n * math.pi * (x + 1.0) / 2.0) * math.exp(-mu_n * t)
    return val


def series_heat(t, x, h_vals, xs):
    """E h(X_t^x) for reflected Brownian motion by eigenexpansion."""
    val = np.trapezoid(h_vals, xs) / 2.0
    for n in range(1, 60):
        psi = np.cos(n * np.pi * (xs + 1.0) / 2.0)
        b_n = np.trapezoid(h_vals * psi, xs)
        mu_n = (n * np.pi / 2.0) ** 2 / 2.0
        val += b_n * math.cos(n * math.pi * (x + 1.0) / 2.0) * math.exp(-mu_n * t)
    return val


def test_pointwise_y0_near_series_value():
    sol = solve_finite_horizon(unit_problem(), 1.0, x0=0.0,
                               config=SolverConfig(n_paths=2000, substeps=50,
                                                   seed=0))
    assert abs(sol.y0 - series_u(1.0, 0.0)) < 0.05
    assert sol.flags.get("y0_bound_violated") is None


def test_direct_estimator_matches_series():
    est = direct_estimator(unit_problem(), 1.0, 0.0, n_paths=4000,
                           n_steps=2500, seed=1)
    assert abs(est.value - series_u(1.0, 0.0)) < 3 * est.se + 0.012
    assert est.mean_local_time > 0


def test_terminal_payoff_only():
    # no boundary pay: u is the reflected heat semigroup applied to h
    xs = np.linspace(-1.0, 1.0, 4001)
    exact = series_heat(0.5, 0.0, xs ** 2, xs)
    est = direct_estimator(unit_problem(g="zero", terminal="poly:0,0,1"),
                           0.5, 0.0, n_paths=4000, seed=2)
    assert abs(est.value - exact) < 3 * est.se + 5e-3


def test_constant_driver_shifts_linearly():
    base = direct_estimator(unit_problem(), 0.75, 0.25, n_paths=3000, seed=3)
    shifted = direct_estimator(unit_problem(drv="constant:2"), 0.75, 0.25,
                               n_paths=3000, seed=3)
    # same seed, same paths: the shift is exactly c T
    assert shifted.value - base.value == pytest.approx(2.0 * 0.75, abs=1e-12)


def test_discount_reduces_terminal_value():
    prob = unit_problem(g="zero", terminal="poly:0,0,1")
    alpha = 0.5
    plain = solve_finite_horizon(prob, 0.5, x0=0.0,
                                 config=SolverConfig(n_paths=3000, seed=4))
    disc = solve_finite_horizon(prob, 0.5, x0=0.0, discount_alpha=alpha,
                                config=SolverConfig(n_paths=3000, seed=4))
    assert disc.y0 == pytest.approx(math.exp(-alpha * 0.5) * plain.y0,
                                    rel=0.02)


def test_surface_mode_tracks_series_profile():
    sol = solve_finite_horizon(unit_problem(), 0.5, surface=True,
                               config=SolverConfig(n_paths=4000, seed=5))
    grid = np.array([-0.6, -0.2, 0.0, 0.4, 0.8])
    vals, ses = evaluate_u(sol, grid[:, None], IntervalDomain())
    exact = np.array([series_u(0.5, xq) for xq in grid])
    assert np.abs(vals - exact).max() < 0.06


def test_pointwise_start_degrades_basis_at_step_zero():
    # all paths share x0, so the step-0 regression cannot support a
    # degree-4 basis; the solver must fall back instead of failing
    sol = solve_finite_horizon(unit_problem(), 0.2, x0=0.0,
                               config=SolverConfig(n_paths=500, seed=6))
    assert sol.flags.get("basis_degraded_steps", 0) >= 1


def test_z_cap_flag_fires_with_tiny_cap():
    with pytest.warns(UserWarning, match="cap"):
        sol = solve_finite_horizon(unit_problem(drv="abs_z"), 0.3, x0=0.0,
                                   config=SolverConfig(n_paths=800, seed=7,
                                                       z_cap=1e-6))
    assert sol.flags.get("z_cap_exceeded", 0) > 1e-6


def test_direct_estimator_rejects_z_drivers():
    with pytest.raises(PreconditionError):
        direct_estimator(unit_problem(drv="abs_z"), 0.5, 0.0, n_paths=10)


def test_problem_validation():
    coeffs = SdeCoefficients(None, 1.0, IntervalDomain())
    bad = Driver("wild", lambda x, z: z[:, 0], math.inf, True)
    with pytest.raises(PreconditionError):
        NeumannProblem(coeffs, bad, scalar_field("one"), scalar_field("zero"))
    free = SdeCoefficients(None, 1.0, None)
    with pytest.raises(PreconditionError):
        NeumannProblem(free, driver("zero"), scalar_field("one"),
                       scalar_field("zero"))


def test_pointwise_needs_x0_inside():
    with pytest.raises(PreconditionError):
        solve_finite_horizon(unit_problem(), 0.5, x0=None)
    with pytest.raises(PreconditionError):
        solve_finite_horizon(unit_problem(), 0.5, x0=1.5)


def test_evaluate_u_projects_outliers_with_warning():
    sol = solve_finite_horizon(unit_problem(), 0.3, surface=True,
                               config=SolverConfig(n_paths=1000, seed=8))
    with pytest.warns(UserWarning, match="project"):
        vals, _ = evaluate_u(sol, np.array([[1.7]]), IntervalDomain())
    inside, _ = evaluate_u(sol, np.array([[1.0]]), IntervalDomain())
    assert vals[0] == pytest.approx(inside[0])


def test_horizon_pair_shares_one_cloud():
    cfg = SolverConfig(n_paths=800, substeps=50, seed=2)
    s1, s2 = solve_horizon_pair(unit_problem(), 1.0, 2.0, x0=0.0, config=cfg)
    # one forward simulation: same noise key, nested time grids
    assert s1.diagnostics["seed_key"] == s2.diagnostics["seed_key"]
    assert len(s1.t) == 51 and len(s2.t) == 101
    assert np.allclose(s1.t, s2.t[:51])
    # the coupled difference estimates lambda (T2 - T1) despite the
    # small cloud, because the [0, T1] path noise cancels
    assert (s2.y0 - s1.y0) == pytest.approx(0.5, abs=0.08)

    with pytest.raises(PreconditionError, match="grid"):
        solve_horizon_pair(unit_problem(), 1.37, 2.6, x0=0.0, config=cfg)
    with pytest.raises(PreconditionError, match="0 < T1 < T2"):
        solve_horizon_pair(unit_problem(), 2.0, 1.0, x0=0.0, config=cfg)


def test_basis_degree_reaches_fit_through_z_only():
    # with a z-dependent driver the regression quality enters through
    # f(x, Z); richer bases move the estimate
    cfg = dict(n_paths=1500, substeps=20, seed=3)
    low = solve_finite_horizon(unit_problem(drv="neg_abs_z"), 0.5, x0=0.0,
                               config=SolverConfig(basis_degree=2, **cfg))
    high = solve_finite_horizon(unit_problem(drv="neg_abs_z"), 0.5, x0=0.0,
                                config=SolverConfig(basis_degree=5, **cfg))
    assert low.diagnostics["basis_size"] == 3
    assert high.diagnostics["basis_size"] == 6
    assert abs(high.y0 - low.y0) > 1e-3

    # for z-independent drivers every least-squares step keeps the
    # sample mean of its target, and a pointwise start collapses the
    # step-0 fit to that mean, so the estimate is basis-free
    flat4 = solve_finite_horizon(unit_problem(), 0.5, x0=0.0,
                                 config=SolverConfig(basis_degree=4, **cfg))
    flat6 = solve_finite_horizon(unit_problem(), 0.5, x0=0.0,
                                 config=SolverConfig(basis_degree=6, **cfg))
    assert flat4.y0 == pytest.approx(flat6.y0, abs=1e-10)
