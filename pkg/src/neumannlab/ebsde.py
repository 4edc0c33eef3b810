"""Ergodic BSDE solvers: the ergodic constant lambda and the function v
(normalized v(0) = 0), by two routes.

discounted   solve the alpha-discounted equation (driver f - alpha y,
             truncated at T_h) for a decreasing alpha sweep and Richardson-
             extrapolate alpha Y^alpha(0) -> lambda, Y^alpha(x) - Y^alpha(0)
             -> v(x), linearly in alpha.
differencing u(T, x) grows like lambda T + v(x) + const for large T, so
             lambda = (u(T2, x_ref) - u(T1, x_ref)) / (T2 - T1) and
             v(x) = u(T, x) - u(T, 0) at the largest horizon.

On a 1-d interval the discounted route can subtract a closed-form lift
v1 (a Helmholtz solution matching the boundary flux) before regressing:
the remaining unknown Y^alpha - v1(X) satisfies a BSDE with no boundary
local-time integral, removing both the dominant Monte Carlo noise and
the local-time discretization bias. Enabled by default there.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import (NeumannProblem, SolverConfig, evaluate_u,
                   solve_finite_horizon, solve_horizon_pair)
from .errors import PreconditionError
from .fields import Driver, ScalarField
from .geometry import IntervalDomain
from .rng import derive_key

__all__ = [
    "HelmholtzLift",
    "helmholtz_lift",
    "ErgodicSolution",
    "DiscountedField",
    "solve_discounted",
    "solve_ergodic",
    "ergodic_pde_residual",
]


@dataclass(frozen=True)
class HelmholtzLift:
    """Closed-form v1(x) = A cosh(sqrt(a) x) + B sinh(sqrt(a) x) solving
    v1'' = alpha_h v1 with v1'(1) = g(1), v1'(-1) = -g(-1)."""

    alpha_h: float
    A: float
    B: float

    def __call__(self, x):
        r = np.sqrt(self.alpha_h)
        x = np.asarray(x, dtype=float)
        return self.A * np.cosh(r * x) + self.B * np.sinh(r * x)

    def derivative(self, x):
        r = np.sqrt(self.alpha_h)
        x = np.asarray(x, dtype=float)
        return r * (self.A * np.sinh(r * x) + self.B * np.cosh(r * x))

    def second_derivative(self, x):
        return self.alpha_h * self(x)


def helmholtz_lift(domain, boundary_g: ScalarField,
                   alpha_h: float) -> HelmholtzLift:
    """Solve the 2x2 boundary system for the lift on [-1, 1].

    The flux conditions are v1'(1) = g(1) and v1'(-1) = -g(-1), the same
    outward-flux arrangement the rest of the package uses.
    """
    if not isinstance(domain, IntervalDomain):
        raise PreconditionError("helmholtz lift is defined on the interval "
                                "domain only")
    if alpha_h <= 0:
        raise PreconditionError("alpha_h must be positive")
    r = np.sqrt(alpha_h)
    g1 = float(boundary_g(np.array([[1.0]]))[0])
    gm1 = float(boundary_g(np.array([[-1.0]]))[0])
    # v1'(x) = r (A sinh(rx) + B cosh(rx))
    m = np.array([[r * np.sinh(r), r * np.cosh(r)],
                  [-r * np.sinh(r), r * np.cosh(r)]])
    rhs = np.array([g1, -gm1])
    A, B = np.linalg.solve(m, rhs)
    return HelmholtzLift(alpha_h, float(A), float(B))


def _lifted_problem(problem: NeumannProblem, alpha: float):
    """(problem with the boundary term removed, lift) for the discounted
    equation: Y^alpha = Y2 + v1(X) where v1'' = (2 alpha / sigma^2) v1
    matches the flux, and Y2 carries driver f2(x, z) =
    f(x, z + v1'(x) sigma) + b(x) v1'(x), zero boundary term, terminal
    -v1 (the truncated equation has terminal 0)."""
    coeffs = problem.coeffs
    sigma = float(coeffs.sigma[0, 0])
    lift = helmholtz_lift(coeffs.domain, problem.boundary_g,
                          2.0 * alpha / sigma ** 2)
    f = problem.driver
    drift = coeffs.drift

    def f2(x, z):
        shift = lift.derivative(x[:, 0]) * sigma
        val = f(x, z + shift[:, None])
        if drift is not None:
            val = val + drift(x)[:, 0] * lift.derivative(x[:, 0])
        return val

    lift_sup = float(np.abs(lift(np.linspace(-1, 1, 101))).max())
    lifted = problem.with_(
        driver=Driver("lifted:" + f.name, f2, f.lipschitz_z, True),
        boundary_g=ScalarField("zero", lambda x: np.zeros(x.shape[0]), 0.0),
        terminal_h=ScalarField("neg_lift", lambda x: -lift(x[:, 0]), lift_sup),
    )
    return lifted, lift


@dataclass
class DiscountedField:
    """Y^alpha sampled on a grid, with the pointwise value at 0."""

    alpha: float
    x: np.ndarray
    values: np.ndarray
    ses: np.ndarray
    value_at_0: float
    lifted: bool
    solution_flags: dict

    def __call__(self, xq):
        return np.interp(np.asarray(xq, dtype=float), self.x, self.values)


def solve_discounted(problem: NeumannProblem, alpha: float, T_h: float,
                     config: Optional[SolverConfig] = None,
                     x_grid=None, lift: Optional[bool] = None,
                     label: str = "discounted") -> DiscountedField:
    """Solve the alpha-discounted equation truncated at T_h and return
    Y^alpha on a spatial grid.

    lift=None enables the Helmholtz subtraction automatically on 1-d
    interval domains (where it is exact); pass False to force the plain
    g dK formulation.
    """
    if not (0.0 < alpha <= 1.0):
        raise PreconditionError("alpha must lie in (0, 1]")
    if T_h < 5.0 / alpha:
        raise PreconditionError(
            f"truncation horizon too small: need T_h >= 5/alpha = {5.0/alpha:g} "
            f"so that e^(-alpha T_h) <= e^-5")
    config = config or SolverConfig()
    dom = problem.coeffs.domain
    if lift is None:
        lift = isinstance(dom, IntervalDomain)
    if x_grid is None:
        if dom.dim != 1:
            raise PreconditionError("pass x_grid explicitly for d > 1")
        lo, hi = dom.bounding_box()
        x_grid = np.linspace(lo[0], hi[0], 41)
    x_grid = np.asarray(x_grid, dtype=float)

    to_solve, lift_fn = (_lifted_problem(problem, alpha) if lift
                         else (problem, None))
    sol = solve_finite_horizon(to_solve, T=T_h, config=config, surface=True,
                               discount_alpha=alpha, label=label)
    values, ses = evaluate_u(sol, x_grid, dom)
    v0, _ = evaluate_u(sol, np.zeros((1, dom.dim)), dom)
    v0 = float(v0[0])
    if lift_fn is not None:
        values = values + lift_fn(x_grid)
        v0 += float(lift_fn(0.0))
    return DiscountedField(alpha, x_grid, values, ses, v0, bool(lift),
                           sol.flags)


@dataclass
class ErgodicSolution:
    """lambda and v(x) on a grid, v(0) = 0 exactly."""

    lambda_: float
    lambda_se: float
    x: np.ndarray
    v: np.ndarray
    method: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        i0 = int(np.argmin(np.abs(self.x)))
        if abs(self.x[i0]) > 1e-12:
            raise PreconditionError("the v grid must contain the origin "
                                    "(normalization point)")
        self.v = self.v - self.v[i0]

    def v_at(self, xq):
        return np.interp(np.asarray(xq, dtype=float), self.x, self.v)

    @property
    def lipschitz_probe(self) -> float:
        dv = np.diff(self.v)
        dx = np.diff(self.x)
        return float(np.abs(dv / dx).max())


def _linear_fit(a: np.ndarray, y: np.ndarray):
    """OLS y = intercept + slope a; returns (intercept, slope, se_intercept)."""
    A = np.column_stack([np.ones_like(a), a])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    dof = max(1, len(a) - 2)
    s2 = float(res[0]) / dof if res.size else 0.0
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(coef[1]), float(np.sqrt(max(cov[0, 0], 0.0)))


def solve_ergodic(problem: NeumannProblem, method: str = "differencing",
                  alphas: Sequence[float] = (0.5, 0.35, 0.2),
                  T_pair: Sequence[float] = (2.0, 4.0),
                  config: Optional[SolverConfig] = None,
                  replicates: int = 1, x_grid=None,
                  lift: Optional[bool] = None,
                  seed: Optional[int] = None,
                  profile_config: Optional[SolverConfig] = None,
                  label: str = "ergodic") -> ErgodicSolution:
    """Estimate (lambda, v) by the requested method.

    discounted: alphas must decrease; each Y^alpha comes from
    solve_discounted at T_h = 6/alpha; lambda and v(x) are the linear-
    in-alpha extrapolations to alpha = 0.

    differencing: T_pair = (T1, T2) with T2 - T1 >= 1; each replicate
    couples u(T1, 0) and u(T2, 0) on one forward cloud, so the path
    noise of [0, T1] cancels in the difference and lambda carries only
    the noise of the (T1, T2] increment. replicates independent repeats
    give the standard error; v comes from the step-0 surface of a solve
    at T2. profile_config, when given, configures that surface solve
    alone -- the profile wants a large path count (its error is
    dominated by regression-coefficient noise), while lambda
    differencing is cheap.
    """
    config = config or SolverConfig()
    if seed is not None:
        config = SolverConfig(**{**config.__dict__, "seed": seed})
    dom = problem.coeffs.domain
    if x_grid is None:
        if dom.dim != 1:
            raise PreconditionError("pass x_grid explicitly for d > 1")
        x_grid = np.linspace(-1.0, 1.0, 41)
    x_grid = np.asarray(x_grid, dtype=float)

    if method == "discounted":
        alphas = list(alphas)
        if len(alphas) < 2 or any(a2 >= a1 for a1, a2 in zip(alphas, alphas[1:])):
            raise PreconditionError("discounted method needs a decreasing "
                                    "alpha sweep of length >= 2")
        fields = [solve_discounted(problem, a, T_h=6.0 / a, config=config,
                                   x_grid=x_grid, lift=lift,
                                   label=f"{label}/alpha={a:g}")
                  for a in alphas]
        a_arr = np.array(alphas)
        ay0 = np.array([f.alpha * f.value_at_0 for f in fields])
        lam, slope, lam_se = _linear_fit(a_arr, ay0)
        prof = np.array([f.values - f.value_at_0 for f in fields])
        v = np.empty(len(x_grid))
        for i in range(len(x_grid)):
            v[i], _, _ = _linear_fit(a_arr, prof[:, i])
        diag = {"alphas": a_arr, "alpha_y0": ay0, "richardson_slope": slope,
                "lifted": fields[0].lifted}
        return ErgodicSolution(lam, lam_se, x_grid, v, "discounted", diag)

    if method == "differencing":
        T1, T2 = float(T_pair[0]), float(T_pair[1])
        if T2 - T1 < 1.0:
            raise PreconditionError("differencing needs T2 - T1 >= 1")
        x_ref = np.zeros(dom.dim)

        u1s, u2s = np.empty(replicates), np.empty(replicates)
        for r in range(replicates):
            cfg = SolverConfig(**{**config.__dict__,
                                  "seed": derive_key(config.seed,
                                                     f"{label}/pair/{r}")})
            s1, s2 = solve_horizon_pair(problem, T1, T2, x0=x_ref, config=cfg,
                                        label=f"{label}/pair")
            u1s[r], u2s[r] = s1.y0, s2.y0

        def _mean_se(vals):
            se = (vals.std(ddof=1) / np.sqrt(replicates) if replicates > 1
                  else 0.0)
            return float(vals.mean()), float(se)

        u1, se1 = _mean_se(u1s)
        u2, se2 = _mean_se(u2s)
        lam, lam_se = _mean_se((u2s - u1s) / (T2 - T1))

        surf = solve_finite_horizon(problem, T=T2,
                                    config=profile_config or config,
                                    surface=True, label=f"{label}/profile")
        vals, _ = evaluate_u(surf, x_grid, dom)
        v0, _ = evaluate_u(surf, np.zeros((1, dom.dim)), dom)
        v = vals - float(v0[0])
        diag = {"T_pair": (T1, T2), "u_values": (u1, u2), "u_ses": (se1, se2),
                "replicates": replicates}
        return ErgodicSolution(lam, lam_se, x_grid, v, "differencing", diag)

    raise PreconditionError(f"unknown method {method!r}; use 'discounted' "
                            f"or 'differencing'")


def consistency_flag(a: ErgodicSolution, b: ErgodicSolution) -> dict:
    """Cross-method agreement check: flags lambda estimates differing by
    more than 5 combined standard errors (floored at 1e-3 each to avoid
    zero-se division on deterministic runs)."""
    se = float(np.hypot(max(a.lambda_se, 1e-3), max(b.lambda_se, 1e-3)))
    gap = abs(a.lambda_ - b.lambda_)
    out = {"lambda_gap": gap, "combined_se": se, "consistent": gap <= 5 * se}
    if not out["consistent"]:
        warnings.warn(f"ergodic lambda estimates disagree: {a.lambda_:.5g} "
                      f"({a.method}) vs {b.lambda_:.5g} ({b.method}), "
                      f"gap {gap:.3g} > 5 x {se:.3g}")
    return out


def ergodic_pde_residual(problem: NeumannProblem, sol: ErgodicSolution) -> np.ndarray:
    """Interior residual of (sigma^2/2) v'' + b v' + f(x, v' sigma) - lambda
    on the solution's own grid (second-order stencils; endpoints excluded)."""
    if problem.dim != 1:
        raise PreconditionError("residual stencil is 1-d only")
    x, v = sol.x, sol.v
    dx = x[1] - x[0]
    vx = np.gradient(v, dx)
    vxx = np.empty_like(v)
    vxx[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx ** 2
    vxx[0] = vxx[1]
    vxx[-1] = vxx[-2]
    sigma = float(problem.coeffs.sigma[0, 0])
    res = 0.5 * sigma ** 2 * vxx + problem.driver(x[:, None],
                                                  (vx * sigma)[:, None])
    if problem.coeffs.drift is not None:
        res = res + problem.coeffs.drift(x[:, None])[:, 0] * vx
    return (res - sol.lambda_)[1:-1]
