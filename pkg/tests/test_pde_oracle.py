"""Crank-Nicolson oracle against closed forms.

The reference solution for the flat-drift unit problem (g = 1, f = 0,
sigma = 1 on [-1, 1], zero terminal data) comes from the Neumann
eigenfunction expansion computed independently here by quadrature:

    u(t, x) = t/2 + x^2/2 - 1/6 + sum_n a_n psi_n(x) exp(-mu_n t),
    psi_n(x) = cos(n pi (x + 1) / 2),  mu_n = (n pi / 2)^2 / 2,

with a_n the expansion coefficients of 1/6 - x^2/2. The ergodic pair of
the same problem is lambda = 1/2, v = x^2/2 exactly, and the optimal
bang-bang problem (driver -|z|) has lambda = e^{-2} / (1 - e^{-2}) from
its invariant density ~ exp(-2|x|).
"""

import math

import numpy as np
import pytest

from neumannlab.bsde import NeumannProblem
from neumannlab.errors import PreconditionError
from neumannlab.fields import driver, scalar_field
from neumannlab.geometry import IntervalDomain
from neumannlab.pde_oracle import (flow_composition_check, solve_ergodic_fd,
                                   solve_parabolic_fd)
from neumannlab.sde import SdeCoefficients


def unit_problem(drv="zero", terminal="zero"):
    return NeumannProblem(
        coeffs=SdeCoefficients(None, 1.0, IntervalDomain()),
        driver=driver(drv),
        boundary_g=scalar_field("constant:1"),
        terminal_h=scalar_field(terminal),
    )


def series_u(t, x, n_terms=60):
    """Eigenexpansion evaluation; coefficients by quadrature."""
    xs = np.linspace(-1.0, 1.0, 4001)
    w0 = 1.0 / 6.0 - xs ** 2 / 2.0
    val = t / 2.0 + x ** 2 / 2.0 - 1.0 / 6.0
    for n in range(1, n_terms + 1):
        psi = np.cos(n * np.pi * (xs + 1.0) / 2.0)
        a_n = np.trapezoid(w0 * psi, xs)  # ||psi_n||^2 = 1 on [-1, 1]
        mu_n = (n * np.pi / 2.0) ** 2 / 2.0
        val += a_n * math.cos(n * math.pi * (x + 1.0) / 2.0) * math.exp(-mu_n * t)
    return val


@pytest.mark.parametrize("t,x", [(0.5, 0.0), (1.0, 0.0), (1.0, 0.5),
                                 (2.0, 0.0), (2.0, -0.5)])
def test_parabolic_fd_matches_eigen_series(t, x):
    sol = solve_parabolic_fd(unit_problem(), t)
    assert sol.value(t, x) == pytest.approx(series_u(t, x), abs=2e-5)


def test_snapshots_interpolate_the_march():
    sol = solve_parabolic_fd(unit_problem(), 1.0, snapshot_times=[0.25, 0.5, 1.0])
    assert sol.value(0.5, 0.0) == pytest.approx(series_u(0.5, 0.0), abs=2e-5)
    with pytest.raises(PreconditionError):
        sol.field(0.3)  # not a stored snapshot


def test_ergodic_fd_closed_form():
    erg = solve_ergodic_fd(unit_problem())
    assert erg.lambda_ == pytest.approx(0.5, abs=1e-6)
    v_exact = np.asarray(erg.v.x) ** 2 / 2.0
    assert np.abs(np.asarray(erg.v.values) - v_exact).max() < 1e-8
    assert erg.probe_spread < 1e-8


def test_ergodic_fd_bang_bang_invariant_density():
    erg = solve_ergodic_fd(unit_problem(drv="neg_abs_z"))
    lam_exact = math.exp(-2.0) / (1.0 - math.exp(-2.0))
    assert erg.lambda_ == pytest.approx(lam_exact, abs=1e-4)


def test_ergodic_fd_with_drift():
    # b = -x adds 1d OU confinement; lambda drops below the flat case
    # and v stays symmetric. Reference from the stationary density
    # ~ exp(-x^2): lambda = phi(1) / Phi_trunc with the Gaussian kernel,
    # computed here by quadrature of the explicit formula
    # lambda = (1/2) [p(1) + p(-1)] for p the normalized density.
    xs = np.linspace(-1.0, 1.0, 20001)
    p = np.exp(-xs ** 2)
    p /= np.trapezoid(p, xs)
    lam_exact = p[-1]  # (p(1) + p(-1)) / 2 by symmetry
    prob = NeumannProblem(
        coeffs=SdeCoefficients(lambda x: -x, 1.0, IntervalDomain()),
        driver=driver("zero"),
        boundary_g=scalar_field("constant:1"),
        terminal_h=scalar_field("zero"),
    )
    erg = solve_ergodic_fd(prob)
    assert erg.lambda_ == pytest.approx(lam_exact, abs=1e-5)


def test_flow_composition_residual_shrinks_with_dt():
    prob = unit_problem()
    r1 = flow_composition_check(prob, 1.0, 0.5, dt=2e-3)
    r2 = flow_composition_check(prob, 1.0, 0.5, dt=1e-3)
    assert r1 < 5e-4
    assert r1 / r2 > 3.0  # second-order in time: ratio ~ 4


def test_flow_check_rejects_degenerate_legs():
    with pytest.raises(PreconditionError):
        flow_composition_check(unit_problem(), 0.0, 1.0)


def test_u_x_field_boundary_values_honor_flux():
    sol = solve_parabolic_fd(unit_problem(), 1.0)
    ux = sol.u_x_field(1.0)
    assert ux(np.array(1.0)) == pytest.approx(1.0)
    assert ux(np.array(-1.0)) == pytest.approx(-1.0)
