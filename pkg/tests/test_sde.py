"""Forward schemes: reflection, penalization, free dynamics, diagnostics.

Oracle values used here:
  - OU from 0: E X_t^2 = (1 - e^{-2t}) / 2.
  - synchronous-coupling indicator gap for OU started at +-1:
    gap(t) = Phi(m/s) - Phi(-m/s) with m = e^{-t}, s^2 = (1-e^{-2t})/2.
"""

import math

import numpy as np
import pytest
from scipy.special import ndtr

from neumannlab.errors import PreconditionError
from neumannlab.fields import ScalarField
from neumannlab.geometry import BallDomain, IntervalDomain
from neumannlab.sde import (SdeCoefficients, coupling_gap, moment_estimate,
                            simulate_free, simulate_penalized,
                            simulate_reflected)


def interval_coeffs(drift=None, sigma=1.0):
    return SdeCoefficients(drift, sigma, IntervalDomain())


def test_reflected_paths_stay_in_closure():
    bundle = simulate_reflected(interval_coeffs(), 0.0, 1.0,
                                n_paths=200, seed=1)
    assert np.all(np.abs(bundle.states) <= 1.0 + 1e-12)
    assert bundle.states.shape == (200, 1001, 1)


def test_local_time_nondecreasing_and_flat_inside():
    bundle = simulate_reflected(interval_coeffs(), 0.0, 1.0,
                                n_paths=100, seed=2)
    dk = np.diff(bundle.local_time, axis=1)
    assert np.all(dk >= 0)
    # increments only on steps that land on the boundary
    on_boundary = np.abs(np.abs(bundle.states[:, 1:, 0]) - 1.0) < 1e-12
    assert np.all(dk[~on_boundary] == 0)
    grew = bundle.local_time[:, -1] > 0
    assert grew.mean() > 0.5  # plenty of paths reach the wall by T = 1


def test_same_seed_reproduces_bundle():
    a = simulate_reflected(interval_coeffs(), 0.2, 0.5, n_paths=50, seed=9)
    b = simulate_reflected(interval_coeffs(), 0.2, 0.5, n_paths=50, seed=9)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.local_time, b.local_time)


def test_free_ou_matches_exact_second_moment():
    bundle = simulate_free(lambda x: -x, 1.0, 0.0, 1.0,
                           n_paths=20000, seed=3)
    est = moment_estimate(bundle, 2, stride=100)
    exact = (1.0 - math.exp(-2.0)) / 2.0
    final = est.table[-1]
    assert final[0] == pytest.approx(1.0)
    assert abs(final[1] - exact) < 3 * final[2] + 2e-3


def test_reflected_moments_capped_by_diameter():
    for dom in (IntervalDomain(), BallDomain(radius=1.0, dim=2)):
        coeffs = SdeCoefficients(None, 1.0, dom)
        x0 = np.zeros(dom.dim)
        bundle = simulate_reflected(coeffs, x0, 2.0, n_paths=300, seed=4)
        est = moment_estimate(bundle, 2, stride=50)
        assert est.value <= dom.diameter() ** 2


def test_moment_estimate_rejects_odd_powers():
    bundle = simulate_free(None, 1.0, 0.0, 0.1, n_paths=10, seed=0)
    with pytest.raises(PreconditionError):
        moment_estimate(bundle, 3)
    with pytest.raises(PreconditionError):
        moment_estimate(bundle, 0)


def test_penalized_approaches_reflected_under_crn():
    """E sup_t |X^n - X|^2 falls as the penalty stiffens (same noise)."""
    coeffs = interval_coeffs()
    ref = simulate_reflected(coeffs, 0.0, 1.0, n_paths=400, seed=5)
    gaps = []
    for n_pen in (8, 32, 128):
        pen = simulate_penalized(coeffs, n_pen, 0.0, 1.0, n_paths=400, seed=5)
        sup2 = ((pen.states - ref.states) ** 2).sum(axis=2).max(axis=1)
        gaps.append(sup2.mean())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-2


def test_penalized_paths_can_overshoot_but_not_far():
    pen = simulate_penalized(interval_coeffs(), 16, 0.9, 1.0,
                             n_paths=200, seed=6)
    excess = np.abs(pen.states[:, :, 0]) - 1.0
    assert excess.max() > 0  # the penalized process does leave the domain
    assert excess.max() < 1.0  # ... but the force keeps excursions bounded


def test_stiff_penalization_switches_scheme():
    with pytest.warns(UserWarning, match="stiff"):
        pen = simulate_penalized(interval_coeffs(), 600, 0.0, 0.05,
                                 n_paths=20, seed=7)
    assert pen.seed_info["scheme"] == "semi_implicit"
    assert np.all(np.isfinite(pen.states))


def exact_indicator_gap(t):
    m = math.exp(-t)
    s = math.sqrt((1.0 - math.exp(-2.0 * t)) / 2.0)
    return ndtr(m / s) - ndtr(-m / s)


def test_coupling_gap_ou_matches_gaussian_oracle():
    phi = ScalarField("indicator", lambda x: (x[:, 0] > 0).astype(float),
                      bound=1.0)
    rep = coupling_gap(lambda x: -x, 1.0, 1.0, -1.0, phi,
                       t_grid=[0.5, 1.0, 1.5, 2.0], n_paths=8000, seed=8)
    for t, gap, se in zip(rep.t_grid, rep.gaps, rep.ses):
        assert abs(gap - exact_indicator_gap(t)) < 3 * se + 5e-3
    assert 0.7 < rep.rate < 1.3  # OU contraction rate is 1


def test_coupling_gap_requires_bounded_test_function():
    phi = ScalarField("linear", lambda x: x[:, 0], bound=None)
    with pytest.raises(PreconditionError):
        coupling_gap(lambda x: -x, 1.0, 1.0, -1.0, phi, t_grid=[1.0],
                     n_paths=10, seed=0)
