"""Large-time study: growth rate lambda with its 1/T error decay, the
renormalized profile w_T(x) = u(T, x) - lambda T - v(x), and the fit of
its limit L and exponential rate eta.

u(T, x) can come from the finite-difference oracle (quiet, the default)
or from the regression Monte Carlo solver (pointwise, with replicate
standard errors; common random numbers across horizons keep w_T
differences low-variance).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import NeumannProblem, SolverConfig, solve_finite_horizon
from .ebsde import ErgodicSolution
from .errors import PreconditionError
from .pde_oracle import solve_parabolic_fd
from .rng import derive_key

__all__ = [
    "LambdaSweep",
    "lambda_sweep",
    "AsymptoticsReport",
    "renormalized_profile",
    "fit_limit_and_rate",
]


def _u_table(problem, T_grid, x_grid, source, config, replicates, label,
             oracle_nodes, oracle_dt):
    """(u, se) arrays of shape (nT, nx) from the chosen source."""
    T_grid = np.asarray(T_grid, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    if source == "fd":
        sol = solve_parabolic_fd(problem, T=float(T_grid.max()),
                                 n_nodes=oracle_nodes, dt=oracle_dt,
                                 snapshot_times=T_grid)
        u = np.array([sol.value(T, x_grid) for T in T_grid])
        return u, np.zeros_like(u)
    if source == "bsde":
        config = config or SolverConfig()
        u = np.empty((len(T_grid), len(x_grid)))
        se = np.empty_like(u)
        for j, x0 in enumerate(x_grid):
            # one label per starting point: the same Brownian prefixes
            # then drive every horizon (common random numbers in T)
            for i, T in enumerate(T_grid):
                vals = []
                for r in range(replicates):
                    cfg = SolverConfig(**{**config.__dict__,
                                          "seed": derive_key(config.seed,
                                                             f"{label}/x{j}/r{r}")})
                    s = solve_finite_horizon(problem, T=float(T), x0=x0,
                                             config=cfg, label=f"{label}/x{j}")
                    vals.append(s.y0)
                u[i, j] = np.mean(vals)
                se[i, j] = (np.std(vals, ddof=1) / np.sqrt(replicates)
                            if replicates > 1 else 0.0)
        return u, se
    raise PreconditionError(f"unknown source {source!r}; use 'fd' or 'bsde'")


@dataclass
class LambdaSweep:
    T_grid: np.ndarray
    u_over_T: np.ndarray
    errors: np.ndarray          # u(T,x)/T - lambda_ref
    ses: np.ndarray
    lambda_ref: float
    slope: float                # log-log decay of |errors| vs T
    slope_window: tuple
    truncated: bool
    source: str


def lambda_sweep(problem: NeumannProblem, T_grid: Sequence[float], x,
                 lambda_ref: float, source: str = "fd",
                 config: Optional[SolverConfig] = None, replicates: int = 1,
                 oracle_nodes: int = 400, oracle_dt: float = 1e-3,
                 label: str = "lambda_sweep") -> LambdaSweep:
    """Tabulate u(T, x)/T against the reference lambda and fit the
    log-log decay of the error (the 1/T law shows as slope -1).

    Points whose |error| falls under 3 standard errors are excluded from
    the fit (noise floor); the sweep is marked truncated when that
    happens.
    """
    T_grid = np.asarray(sorted(T_grid), dtype=float)
    if T_grid.max() / T_grid.min() < 8.0:
        raise PreconditionError("T_grid should span at least a factor 8 "
                                "(max/min >= 8) for a meaningful rate fit")
    u, se = _u_table(problem, T_grid, np.array([float(x)]), source, config,
                     replicates, label, oracle_nodes, oracle_dt)
    u_over_T = u[:, 0] / T_grid
    errors = u_over_T - lambda_ref
    ses = se[:, 0] / T_grid

    usable = np.abs(errors) > 3.0 * ses
    truncated = bool(~usable.all())
    idx = np.where(usable)[0]
    if len(idx) < 2:
        slope, window = float("nan"), (None, None)
    else:
        logT = np.log(T_grid[idx])
        logE = np.log(np.abs(errors[idx]))
        slope = float(np.polyfit(logT, logE, 1)[0])
        window = (float(T_grid[idx[0]]), float(T_grid[idx[-1]]))
    return LambdaSweep(T_grid, u_over_T, errors, ses, lambda_ref,
                       slope, window, truncated, source)


@dataclass
class AsymptoticsReport:
    """w_T table plus (after fit_limit_and_rate) the fitted limit and
    rate. w = u - lambda_hat T - v_hat(x) with the lambda_hat and v_hat
    recorded here, so the table is self-contained."""

    T_grid: np.ndarray
    x_grid: np.ndarray
    u: np.ndarray               # (nT, nx)
    u_se: np.ndarray
    w: np.ndarray               # (nT, nx)
    lambda_hat: float
    v_hat: np.ndarray           # v at x_grid
    spreads: np.ndarray         # sup_x w - inf_x w per T
    source: str
    bounded: bool
    L_hat: Optional[float] = None
    eta_hat: Optional[float] = None
    fit: dict = field(default_factory=dict)


def renormalized_profile(problem: NeumannProblem, T_grid: Sequence[float],
                         x_grid: Sequence[float], ergodic: ErgodicSolution,
                         source: str = "fd",
                         config: Optional[SolverConfig] = None,
                         replicates: int = 1, bound_guard: float = 10.0,
                         oracle_nodes: int = 400, oracle_dt: float = 1e-3,
                         label: str = "profile") -> AsymptoticsReport:
    """w_T(x) = u(T, x) - lambda_hat T - v_hat(x) per horizon, with the
    per-T spatial spread (it should flatten as T grows). A run whose
    |w| exceeds bound_guard * (|w at T_min| + 1) is flagged unbounded
    (the expansion says w stays bounded)."""
    T_grid = np.asarray(sorted(T_grid), dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    u, u_se = _u_table(problem, T_grid, x_grid, source, config, replicates,
                       label, oracle_nodes, oracle_dt)
    v = ergodic.v_at(x_grid) if x_grid.size else np.empty(0)
    w = u - ergodic.lambda_ * T_grid[:, None] - v[None, :]
    spreads = w.max(axis=1) - w.min(axis=1)
    cap = bound_guard * (np.abs(w[0]).max() + 1.0)
    bounded = bool(np.abs(w).max() <= cap)
    if not bounded:
        warnings.warn(f"renormalized profile exceeded the boundedness guard "
                      f"({np.abs(w).max():.3g} > {cap:.3g}); lambda or v "
                      f"estimates are probably off")
    return AsymptoticsReport(T_grid, x_grid, u, u_se, w,
                             ergodic.lambda_, v, spreads, source, bounded)


def _geometric_correction(w_mean, T_grid, eta):
    """L estimate from the last two horizons assuming w = L + C e^(-eta T)."""
    if not np.isfinite(eta) or eta <= 0:
        return float(w_mean[-1])
    r = np.exp(-eta * (T_grid[-1] - T_grid[-2]))
    d = w_mean[-1] - w_mean[-2]
    return float(w_mean[-1] + d * r / (1.0 - r))


def fit_limit_and_rate(report: AsymptoticsReport, burn_in: float = 0.5,
                       noise_floor: Optional[float] = None) -> AsymptoticsReport:
    """Fit L and eta to the profile table, in place.

    L_hat starts as the x-average of w at the largest horizon and is
    refined once by geometric extrapolation with the fitted rate.
    eta_hat is the least-squares slope of log d_T vs T over the window
    [burn_in, last T above the noise floor], where d_T = sup_x |w_T -
    L_hat|. A flat table (all d_T below floor) gives the +inf sentinel.
    A non-monotone d_T tail marks eta_hat a lower bound only.
    """
    T, w = report.T_grid, report.w
    if len(T) < 5:
        raise PreconditionError("need at least 5 horizons to fit a rate")
    if noise_floor is None:
        noise_floor = 5e-6 if report.source == "fd" else \
            max(1e-4, 3.0 * float(report.u_se.max()))

    L_hat = float(w[-1].mean())
    eta_hat = float("inf")
    window = (None, None)
    r2 = float("nan")
    lower_bound_only = False
    for _ in range(2):
        d = np.abs(w - L_hat).max(axis=1)
        usable = (T >= burn_in) & (d > noise_floor)
        idx = np.where(usable)[0]
        if len(idx) < 2:
            eta_hat = float("inf")
            break
        tail = d[idx]
        if np.any(np.diff(tail) > 0):
            # noise-dominated wobble: trim everything after the first rise
            rise = int(np.argmax(np.diff(tail) > 0))
            lower_bound_only = rise + 1 < len(idx)
            idx = idx[:rise + 1] if rise + 1 >= 2 else idx
        logd = np.log(d[idx])
        coef = np.polyfit(T[idx], logd, 1)
        eta_hat = float(-coef[0])
        fitted = np.polyval(coef, T[idx])
        ss_res = float(((logd - fitted) ** 2).sum())
        ss_tot = float(((logd - logd.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
        window = (float(T[idx[0]]), float(T[idx[-1]]))
        L_hat = _geometric_correction(w.mean(axis=1), T, eta_hat)
    report.L_hat = L_hat
    report.eta_hat = eta_hat
    report.fit = {"window": window, "r2": r2, "noise_floor": noise_floor,
                  "burn_in": burn_in, "lower_bound_only": lower_bound_only}
    return report
