"""Ergodic and finite-horizon control over a finite control set.

The Hamiltonian f0(x, z) = min_a { L(x, a) + z sigma^{-1} R(a) } is an
exact enumeration over the controls, and the minimizing index (lowest
index on ties) is the feedback selector. Feeding f0 to the BSDE / PDE
machinery gives the value function u and the ergodic pair (lambda, v);
the optimal finite-horizon feedback uses the value-to-go gradient,
a(t, x) = selector(x, u_x(T - t, x) sigma).

Costs are estimated on the controlled reflected dynamics directly
(drift b + R(a)), with a Girsanov-reweighting mode (uncontrolled paths
times the density of the drift change) as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import NeumannProblem
from .errors import PreconditionError
from .fields import Driver, ScalarField
from .geometry import as_points
from .rng import NoiseSource, derive_key
from .sde import DEFAULT_STEP, SdeCoefficients, _block_size

__all__ = [
    "ControlProblem",
    "hamiltonian",
    "argmin_selector",
    "hamiltonian_problem",
    "ConstantPolicy",
    "GradientFeedbackPolicy",
    "CostEstimate",
    "finite_cost",
    "ergodic_cost",
    "verify_expansion",
]


@dataclass(frozen=True)
class ControlProblem:
    """Finite control set: labels[i], drift perturbation R[i] (a d-
    vector), running cost costs[i] (a scalar field of x). The underlying
    uncontrolled dynamics, boundary cost g and terminal cost h0 complete
    the data."""

    coeffs: SdeCoefficients
    labels: tuple
    R: np.ndarray               # (nU, d)
    costs: tuple                # nU scalar fields
    boundary_g: ScalarField
    terminal_h0: ScalarField

    def __post_init__(self):
        if len(self.labels) == 0:
            raise PreconditionError("control set must be non-empty")
        R = np.asarray(self.R, dtype=float)
        if R.shape != (len(self.labels), self.coeffs.dim):
            raise PreconditionError("R must be one d-vector per control")
        if not np.all(np.isfinite(R)):
            raise PreconditionError("R must be bounded (finite entries)")
        if len(self.costs) != len(self.labels):
            raise PreconditionError("one running cost per control")
        for c in self.costs:
            if c.bound is None or not np.isfinite(c.bound):
                raise PreconditionError(
                    f"running cost {c.name!r} needs a finite bound")
        object.__setattr__(self, "R", R)

    @property
    def n_controls(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.coeffs.dim

    def sigma_inv_R(self) -> np.ndarray:
        return self.R @ self.coeffs.sigma_inv().T

    def domain(self):
        return self.coeffs.domain


def _control_values(cp: ControlProblem, x: np.ndarray,
                    z: np.ndarray) -> np.ndarray:
    """(nU, n) matrix of L(x, a) + z sigma^{-1} R(a)."""
    x = as_points(x, cp.dim)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, cp.dim)
    sr = cp.sigma_inv_R()                       # (nU, d)
    pairing = z @ sr.T                          # (n, nU)
    vals = np.empty((cp.n_controls, x.shape[0]))
    for i in range(cp.n_controls):
        vals[i] = cp.costs[i](x) + pairing[:, i]
    return vals


def hamiltonian(cp: ControlProblem, x, z) -> np.ndarray:
    """f0(x, z): exact minimum over the control set."""
    return _control_values(cp, x, z).min(axis=0)


def argmin_selector(cp: ControlProblem, x, z) -> np.ndarray:
    """Index of the minimizing control; np.argmin takes the lowest index
    on ties, which makes the selector deterministic."""
    return _control_values(cp, x, z).argmin(axis=0)


def hamiltonian_problem(cp: ControlProblem) -> NeumannProblem:
    """The Neumann problem whose driver is the Hamiltonian: its solution
    is the value function of the control problem."""
    lip = float(np.abs(cp.sigma_inv_R()).sum(axis=1).max())
    depends = bool(np.any(cp.R != 0.0))

    def f0(x, z):
        return hamiltonian(cp, x, z)

    return NeumannProblem(
        coeffs=cp.coeffs,
        driver=Driver("hamiltonian", f0, lip, depends),
        boundary_g=cp.boundary_g,
        terminal_h=cp.terminal_h0,
    )


class ConstantPolicy:
    """Always the same control index."""

    def __init__(self, index: int):
        self.index = int(index)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[0], self.index, dtype=np.int64)


class GradientFeedbackPolicy:
    """Feedback a(t, x) = selector(x, grad u(T - t, x) sigma) built from
    a table of u_x rows on (times, x nodes); linear interpolation in
    both variables. Stationary mode (ergodic feedback through grad v)
    uses a single row and ignores t. sign=-1 flips the gradient and
    gives a deliberately bad policy for the suboptimality checks."""

    def __init__(self, cp: ControlProblem, times, x_nodes, ux_rows,
                 horizon: Optional[float] = None, sign: float = 1.0):
        self.cp = cp
        self.times = np.asarray(times, dtype=float)
        self.x_nodes = np.asarray(x_nodes, dtype=float)
        self.ux = np.atleast_2d(np.asarray(ux_rows, dtype=float))
        if self.ux.shape != (len(self.times), len(self.x_nodes)):
            raise PreconditionError("ux_rows must be (n_times, n_nodes)")
        self.horizon = horizon
        self.sign = float(sign)
        self.sigma = float(cp.coeffs.sigma[0, 0])
        if cp.dim != 1:
            raise PreconditionError("gradient feedback tables are 1-d")

    @classmethod
    def from_parabolic(cls, cp: ControlProblem, solution, horizon: float,
                       sign: float = 1.0):
        """Build from a pde_oracle.ParabolicSolution holding snapshots
        of the value function on [0, horizon]."""
        rows = np.array([solution._stepper.u_x(row) for row in solution.u])
        return cls(cp, solution.times, solution.x, rows, horizon, sign)

    @classmethod
    def stationary(cls, cp: ControlProblem, x_nodes, v_values,
                   sign: float = 1.0):
        x_nodes = np.asarray(x_nodes, dtype=float)
        vx = np.gradient(np.asarray(v_values, dtype=float), x_nodes)
        return cls(cp, [0.0], x_nodes, vx[None, :], None, sign)

    def _ux_at(self, t: float, xq: np.ndarray) -> np.ndarray:
        tt = self.times
        if self.horizon is not None:
            t = self.horizon - t          # value-to-go time
        if len(tt) == 1:
            row = self.ux[0]
        else:
            t = min(max(t, tt[0]), tt[-1])
            i = int(np.searchsorted(tt, t, side="right") - 1)
            i = min(i, len(tt) - 2)
            lam = (t - tt[i]) / (tt[i + 1] - tt[i])
            row = (1 - lam) * self.ux[i] + lam * self.ux[i + 1]
        return np.interp(xq, self.x_nodes, row)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        z = (self.sign * self._ux_at(t, x[:, 0]) * self.sigma)[:, None]
        return argmin_selector(self.cp, x, z)


@dataclass
class CostEstimate:
    value: float
    se: float
    n_paths: int
    mean_local_time: float
    mode: str
    tail_average: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)


def _simulate_cost(cp: ControlProblem, policy, T: float, x0, n_paths: int,
                   n_steps: Optional[int], seed: int, label: str,
                   controlled: bool, with_terminal: bool,
                   half_time_mark: bool = False):
    """Streaming fine-grid loop shared by the cost estimators.

    controlled=True: drift b + R(a); weights stay 1.
    controlled=False (Girsanov mode): drift b; the running log-density
    of the drift change accumulates and reweights the final payoff.
    """
    coeffs = cp.coeffs
    dom = coeffs.domain
    d = cp.dim
    if n_steps is None:
        n_steps = max(1, round(T / DEFAULT_STEP))
    h = T / n_steps
    x = np.repeat(as_points(x0, d), n_paths, axis=0)
    if np.any(dom.phi(x) < -1e-12):
        raise PreconditionError("x0 outside closure of the domain")

    key = derive_key(seed, label)
    noise = NoiseSource(key, n_paths, d)
    sig_t = coeffs.sigma.T
    sqrt_h = math.sqrt(h)
    total = np.zeros(n_paths)
    ktot = np.zeros(n_paths)
    log_rho = np.zeros(n_paths) if not controlled else None
    half_total = None
    sr = cp.sigma_inv_R()
    half_step = max(1, n_steps // 2)

    cost_table = np.empty((cp.n_controls, n_paths))
    block = _block_size(n_paths, d, n_steps)
    k = 0
    while k < n_steps:
        m = min(block, n_steps - k)
        dwb = noise.normals(m) * sqrt_h
        for j in range(m):
            a = policy(k * h, x)
            for i in range(cp.n_controls):
                sel = a == i
                if np.any(sel):
                    total[sel] += cp.costs[i](x[sel]) * h
            dw = dwb[:, j, :]
            drift = coeffs.drift_at(x)
            if controlled:
                drift = drift + cp.R[a]
            else:
                u = sr[a]                      # (n, d) sigma^{-1} R(a)
                log_rho += (u * dw).sum(axis=1) - 0.5 * (u * u).sum(axis=1) * h
            proposal = x + drift * h + dw @ sig_t
            x = dom.project(proposal)
            dk = np.linalg.norm(proposal - x, axis=1)
            hit = dk > 0
            if np.any(hit):
                total[hit] += cp.boundary_g(x[hit]) * dk[hit]
            ktot += dk
            k += 1
            if half_time_mark and k == half_step:
                half_total = total.copy()
    if with_terminal:
        total += cp.terminal_h0(x)
    if not controlled:
        w = np.exp(log_rho)
        payoff = w * total
        return payoff, ktot, x, half_total, w
    return total, ktot, x, half_total, None


def finite_cost(cp: ControlProblem, policy, T: float, x0,
                n_paths: int = 4000, n_steps: Optional[int] = None,
                seed: int = 0, mode: str = "controlled",
                label: str = "cost") -> CostEstimate:
    """J^T(x0, policy) = E[ int L dt + int g dK + h0(X_T) ].

    mode="controlled" simulates the controlled reflected dynamics;
    mode="girsanov" reweights uncontrolled paths by the change-of-drift
    density (a variance-expensive cross-check; its weights degenerate
    on long horizons)."""
    if mode not in ("controlled", "girsanov"):
        raise PreconditionError(f"unknown mode {mode!r}")
    payoff, ktot, _, _, w = _simulate_cost(
        cp, policy, T, x0, n_paths, n_steps, seed, f"{label}/{mode}",
        controlled=(mode == "controlled"), with_terminal=True)
    value = float(payoff.mean())
    se = float(payoff.std(ddof=1) / math.sqrt(n_paths))
    diag = {}
    if w is not None:
        diag["weight_mean"] = float(w.mean())
        diag["weight_max"] = float(w.max())
    return CostEstimate(value, se, n_paths, float(ktot.mean()), mode,
                        diagnostics=diag)


def ergodic_cost(cp: ControlProblem, policy, T_max: float, x0,
                 n_paths: int = 4000, n_steps: Optional[int] = None,
                 seed: int = 0, label: str = "ergodic_cost") -> CostEstimate:
    """Time-averaged cost (no terminal term) at T_max, with the average
    over the second half [T_max/2, T_max] as a tail-stability
    diagnostic: the two agree when the average has converged."""
    payoff, ktot, _, half, _ = _simulate_cost(
        cp, policy, T_max, x0, n_paths, n_steps, seed, label,
        controlled=True, with_terminal=False, half_time_mark=True)
    avg = payoff / T_max
    value = float(avg.mean())
    se = float(avg.std(ddof=1) / math.sqrt(n_paths))
    if n_steps is None:
        n_steps = max(1, round(T_max / DEFAULT_STEP))
    t_half = max(1, n_steps // 2) * (T_max / n_steps)
    if T_max - t_half > 0:
        tail = float(((payoff - half) / (T_max - t_half)).mean())
    else:
        tail = value
    return CostEstimate(value, se, n_paths, float(ktot.mean()), "controlled",
                        tail_average=tail,
                        diagnostics={"tail_gap": abs(tail - value)})


def verify_expansion(cp: ControlProblem, T_grid: Sequence[float], x0,
                     lambda_hat: float, v_at_x0: float, L_hat: float,
                     policies_by_T: dict, n_paths: int = 4000,
                     n_steps_per_T: Optional[dict] = None, seed: int = 0,
                     suboptimal: Sequence = (),
                     label: str = "expansion") -> dict:
    """Tabulate J^T(x0, optimal policy) - lambda T - v(x0) against L_hat
    over the horizon grid, and (optionally) check liminf J^T / T >=
    lambda on a sweep of suboptimal policies at the largest horizon."""
    rows = []
    for T in T_grid:
        pol = policies_by_T[T]
        n_steps = (n_steps_per_T or {}).get(T)
        est = finite_cost(cp, pol, T, x0, n_paths, n_steps,
                          seed=seed, label=f"{label}/T={T:g}")
        gap = est.value - lambda_hat * T - v_at_x0 - L_hat
        rows.append({"T": T, "J": est.value, "se": est.se,
                     "centered": est.value - lambda_hat * T - v_at_x0,
                     "gap_to_L": gap})
    sub = []
    if suboptimal:
        T = max(T_grid)
        n_steps = (n_steps_per_T or {}).get(T)
        for i, pol in enumerate(suboptimal):
            est = finite_cost(cp, pol, T, x0, n_paths, n_steps,
                              seed=seed, label=f"{label}/sub{i}")
            sub.append({"policy": i, "T": T, "J_over_T": est.value / T,
                        "se": est.se / T,
                        "above_lambda": est.value / T >= lambda_hat
                        - 3 * est.se / T})
    return {"rows": rows, "L_hat": L_hat, "lambda_hat": lambda_hat,
            "suboptimal": sub}
