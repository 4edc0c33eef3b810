"""Ergodic pair (lambda, v) via discounted extrapolation and horizon
differencing, plus the boundary lift that removes the dK integrand.

The discounted route has a closed form on the unit problem: the
alpha-discounted value at the origin satisfies
alpha Y^alpha(0) = sqrt(alpha/2) / sinh(sqrt(2 alpha)), which tends to
lambda = 1/2 as alpha -> 0. The lift itself solves v'' = alpha_h v with
Neumann flux data; for alpha_h = 1, g = 1 it is cosh(x)/sinh(1).
"""

import math

import numpy as np
import pytest

from neumannlab.bsde import NeumannProblem, SolverConfig
from neumannlab.ebsde import (ErgodicSolution, consistency_flag,
                              ergodic_pde_residual, helmholtz_lift,
                              solve_discounted, solve_ergodic)
from neumannlab.errors import PreconditionError
from neumannlab.fields import driver, scalar_field
from neumannlab.geometry import BallDomain, IntervalDomain
from neumannlab.pde_oracle import solve_ergodic_fd
from neumannlab.sde import SdeCoefficients


def unit_problem():
    return NeumannProblem(
        coeffs=SdeCoefficients(None, 1.0, IntervalDomain()),
        driver=driver("zero"),
        boundary_g=scalar_field("constant:1"),
        terminal_h=scalar_field("zero"),
    )


def exact_discounted_at_origin(alpha):
    return math.sqrt(alpha / 2.0) / math.sinh(math.sqrt(2.0 * alpha)) / alpha


def test_helmholtz_lift_closed_form():
    lift = helmholtz_lift(IntervalDomain(), scalar_field("constant:1"), 1.0)
    x = np.linspace(-1.0, 1.0, 21)
    assert np.allclose(lift(x), np.cosh(x) / np.sinh(1.0), atol=1e-12)
    assert lift.derivative(np.array([1.0]))[0] == pytest.approx(1.0)
    assert lift.derivative(np.array([-1.0]))[0] == pytest.approx(-1.0)


def test_helmholtz_lift_solves_the_ode():
    g = scalar_field("poly:0.3,1.2")  # asymmetric flux data
    for alpha_h in (0.5, 2.0, 7.0):
        lift = helmholtz_lift(IntervalDomain(), g, alpha_h)
        x = np.linspace(-1.0, 1.0, 401)
        resid = lift.second_derivative(x) - alpha_h * lift(x)
        assert np.abs(resid).max() < 1e-9
        assert lift.derivative(np.array([1.0]))[0] == pytest.approx(
            g(np.array([[1.0]]))[0])
        assert lift.derivative(np.array([-1.0]))[0] == pytest.approx(
            -g(np.array([[-1.0]]))[0])


def test_helmholtz_lift_preconditions():
    with pytest.raises(PreconditionError):
        helmholtz_lift(BallDomain(radius=1.0, dim=2),
                       scalar_field("one"), 1.0)
    with pytest.raises(PreconditionError):
        helmholtz_lift(IntervalDomain(), scalar_field("one"), 0.0)


def test_discounted_value_matches_closed_form():
    field = solve_discounted(unit_problem(), 0.5, 12.0,
                             config=SolverConfig(n_paths=1000, seed=0))
    assert field.lifted
    assert field.value_at_0 == pytest.approx(exact_discounted_at_origin(0.5),
                                             abs=5e-3)


def test_lift_and_plain_routes_agree():
    plain = solve_discounted(unit_problem(), 0.5, 12.0, lift=False,
                             config=SolverConfig(n_paths=1500, seed=1))
    lifted = solve_discounted(unit_problem(), 0.5, 12.0, lift=True,
                              config=SolverConfig(n_paths=1500, seed=1))
    assert not plain.lifted and lifted.lifted
    assert abs(plain.value_at_0 - lifted.value_at_0) < 0.08


def test_discounted_rejects_short_truncation():
    with pytest.raises(PreconditionError):
        solve_discounted(unit_problem(), 0.5, 3.0)


def test_differencing_route_smoke():
    sol = solve_ergodic(unit_problem(), method="differencing",
                        T_pair=(1.0, 2.0), replicates=2,
                        config=SolverConfig(n_paths=800, seed=2))
    assert sol.method == "differencing"
    assert abs(sol.lambda_ - 0.5) < 0.05
    # v should be roughly x^2/2 up to MC noise
    assert np.abs(sol.v - sol.x ** 2 / 2.0).max() < 0.1
    assert sol.lambda_se > 0
    assert sol.diagnostics["replicates"] == 2


def test_ergodic_solution_contract():
    x = np.linspace(-1.0, 1.0, 5)
    sol = ErgodicSolution(0.5, 0.01, x, x ** 2 / 2 + 3.0, "test", {})
    assert sol.v[2] == 0.0  # renormalized at the origin
    assert sol.v_at(0.5) == pytest.approx(0.125, abs=0.2)
    assert sol.lipschitz_probe == pytest.approx(0.75)
    with pytest.raises(PreconditionError):
        ErgodicSolution(0.5, 0.0, np.array([0.25, 0.75]), np.zeros(2), "t", {})


def test_consistency_flag_thresholds():
    x = np.linspace(-1.0, 1.0, 5)
    a = ErgodicSolution(0.500, 0.0, x, np.zeros(5), "fd", {})
    b = ErgodicSolution(0.504, 0.0, x, np.zeros(5), "mc", {})
    assert consistency_flag(a, b)["consistent"]  # 0.004 < 5 * sqrt(2) * 1e-3
    c = ErgodicSolution(0.530, 0.0, x, np.zeros(5), "mc", {})
    with pytest.warns(UserWarning, match="disagree"):
        out = consistency_flag(a, c)
    assert not out["consistent"]


def test_fd_pair_has_tiny_pde_residual():
    prob = unit_problem()
    erg = solve_ergodic_fd(prob)
    sol = ErgodicSolution(erg.lambda_, 0.0, np.asarray(erg.v.x),
                          np.asarray(erg.v.values), "fd", {})
    resid = ergodic_pde_residual(prob, sol)
    assert np.abs(resid).max() < 1e-6
