"""Finite control sets: Hamiltonian by enumeration, feedback policies,
and forward cost estimation (controlled dynamics and Girsanov
reweighting).

The bang-bang problem (controls -1/+1 shifting the drift, no running
cost) has Hamiltonian -|z|, so its value function is the solution of
the corresponding half-line-driver problem and the optimal feedback is
a = -sign(u_x).
"""

import numpy as np
import pytest

from neumannlab.bsde import direct_estimator
from neumannlab.control import (ConstantPolicy, ControlProblem,
                                GradientFeedbackPolicy, argmin_selector,
                                finite_cost, hamiltonian,
                                hamiltonian_problem)
from neumannlab.errors import PreconditionError
from neumannlab.fields import scalar_field
from neumannlab.geometry import IntervalDomain
from neumannlab.pde_oracle import solve_parabolic_fd
from neumannlab.sde import SdeCoefficients


def coeffs():
    return SdeCoefficients(None, 1.0, IntervalDomain())


def bang_bang():
    return ControlProblem(
        coeffs=coeffs(), labels=(-1.0, 1.0),
        R=np.array([[-1.0], [1.0]]),
        costs=(scalar_field("zero"), scalar_field("zero")),
        boundary_g=scalar_field("constant:1"),
        terminal_h0=scalar_field("zero"),
    )


def singleton():
    return ControlProblem(
        coeffs=coeffs(), labels=("hold",),
        R=np.zeros((1, 1)),
        costs=(scalar_field("zero"),),
        boundary_g=scalar_field("constant:1"),
        terminal_h0=scalar_field("zero"),
    )


def test_hamiltonian_is_the_manual_enumeration_min():
    run_costs = (scalar_field("constant:0.3"), scalar_field("zero"),
                 scalar_field("constant:0.1"))
    cp = ControlProblem(
        coeffs=coeffs(), labels=(-1.0, 0.0, 1.0),
        R=np.array([[-1.0], [0.0], [1.0]]),
        costs=run_costs,
        boundary_g=scalar_field("constant:1"),
        terminal_h0=scalar_field("zero"),
    )
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, size=(40, 1))
    z = rng.normal(size=(40, 1))
    consts = np.array([0.3, 0.0, 0.1])
    manual = np.min(consts[None, :] + z * np.array([-1.0, 0.0, 1.0]), axis=1)
    assert np.allclose(hamiltonian(cp, x, z), manual)


def test_bang_bang_hamiltonian_is_neg_abs_z():
    cp = bang_bang()
    prob = hamiltonian_problem(cp)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(25, 1))
    z = rng.normal(size=(25, 1))
    assert np.allclose(prob.driver(x, z), -np.abs(z[:, 0]))
    assert prob.driver.depends_on_z
    assert prob.driver.lipschitz_z == pytest.approx(1.0)


def test_selector_breaks_ties_toward_lowest_index():
    cp = bang_bang()
    x = np.zeros((3, 1))
    z = np.zeros((3, 1))
    assert np.all(argmin_selector(cp, x, z) == 0)
    # away from the tie the selector is -sign(z)
    z = np.array([[0.4], [-0.4], [2.0]])
    assert list(argmin_selector(cp, x, z)) == [0, 1, 0]


def test_singleton_cost_matches_direct_mc():
    cp = singleton()
    est = finite_cost(cp, ConstantPolicy(0), 1.0, 0.0,
                      n_paths=1500, n_steps=1000, seed=3)
    ref = direct_estimator(hamiltonian_problem(cp), 1.0, 0.0,
                           n_paths=1500, n_steps=1000, seed=3)
    tol = 3.0 * float(np.hypot(est.se, ref.se)) + 0.01
    assert abs(est.value - ref.value) < tol
    assert est.mean_local_time > 0
    assert est.mode == "controlled"


def test_girsanov_route_agrees_with_controlled():
    cp = bang_bang()
    ctrl = finite_cost(cp, ConstantPolicy(1), 0.5, 0.0,
                       n_paths=2000, n_steps=500, seed=4, mode="controlled")
    girs = finite_cost(cp, ConstantPolicy(1), 0.5, 0.0,
                       n_paths=2000, n_steps=500, seed=4, mode="girsanov")
    tol = 3.0 * float(np.hypot(ctrl.se, girs.se)) + 0.015
    assert abs(ctrl.value - girs.value) < tol
    assert 0.8 < girs.diagnostics["weight_mean"] < 1.2
    assert girs.mode == "girsanov"


def test_optimal_feedback_beats_constant_policies():
    cp = bang_bang()
    sol = solve_parabolic_fd(hamiltonian_problem(cp), 1.0,
                             snapshot_times=np.linspace(0.0, 1.0, 11))
    opt = GradientFeedbackPolicy.from_parabolic(cp, sol, horizon=1.0)
    j_opt = finite_cost(cp, opt, 1.0, 0.0,
                        n_paths=1500, n_steps=1000, seed=5)
    j_const = finite_cost(cp, ConstantPolicy(0), 1.0, 0.0,
                          n_paths=1500, n_steps=1000, seed=5)
    # FD value of the Hamiltonian problem at (T=1, x=0) is 0.1079
    assert j_opt.value == pytest.approx(0.1079, abs=0.03)
    assert j_const.value > j_opt.value + 3.0 * np.hypot(j_opt.se, j_const.se)


def test_anti_gradient_policy_is_suboptimal():
    cp = bang_bang()
    x_nodes = np.linspace(-1.0, 1.0, 41)
    good = GradientFeedbackPolicy.stationary(cp, x_nodes, x_nodes ** 2 / 2.0)
    bad = GradientFeedbackPolicy.stationary(cp, x_nodes, x_nodes ** 2 / 2.0,
                                            sign=-1.0)
    x = np.array([[0.5], [-0.5]])
    assert list(good(0.0, x)) == [0, 1]   # push toward the origin
    assert list(bad(0.0, x)) == [1, 0]    # push outward
    j_good = finite_cost(cp, good, 1.0, 0.0,
                         n_paths=1200, n_steps=800, seed=6)
    j_bad = finite_cost(cp, bad, 1.0, 0.0,
                        n_paths=1200, n_steps=800, seed=6)
    assert j_bad.value > j_good.value


def test_control_problem_validation():
    with pytest.raises(PreconditionError, match="non-empty"):
        ControlProblem(coeffs(), (), np.zeros((0, 1)), (),
                       scalar_field("one"), scalar_field("zero"))
    with pytest.raises(PreconditionError, match="d-vector"):
        ControlProblem(coeffs(), (-1.0, 1.0), np.zeros((3, 1)),
                       (scalar_field("zero"), scalar_field("zero")),
                       scalar_field("one"), scalar_field("zero"))
    with pytest.raises(PreconditionError, match="finite"):
        ControlProblem(coeffs(), (0.0,), np.array([[np.inf]]),
                       (scalar_field("zero"),),
                       scalar_field("one"), scalar_field("zero"))
    with pytest.raises(PreconditionError, match="bound"):
        ControlProblem(coeffs(), (0.0,), np.zeros((1, 1)),
                       (scalar_field("identity"),),
                       scalar_field("one"), scalar_field("zero"))


def test_gradient_policy_table_validation():
    cp = bang_bang()
    with pytest.raises(PreconditionError, match="ux_rows"):
        GradientFeedbackPolicy(cp, [0.0, 1.0], np.linspace(-1, 1, 5),
                               np.zeros((3, 5)))


def test_finite_cost_input_checks():
    cp = bang_bang()
    with pytest.raises(PreconditionError, match="closure"):
        finite_cost(cp, ConstantPolicy(0), 1.0, 2.0, n_paths=10, n_steps=10)
    with pytest.raises(PreconditionError, match="mode"):
        finite_cost(cp, ConstantPolicy(0), 1.0, 0.0, n_paths=10, n_steps=10,
                    mode="sideways")
