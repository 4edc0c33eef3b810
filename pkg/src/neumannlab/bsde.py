"""Regression Monte Carlo for BSDEs with a boundary local-time term.

The backward scheme runs on a coarse time grid tau_0 < ... < tau_J:

    Y_J  = h(X_J)
    Z_j  = E[ Y_{j+1} dW_j^T | X_j ] / delta
    Y_j  = E[ Y_{j+1} + f(X_j, Z_j) delta + dG_j | X_j ] ,

with conditional expectations replaced by least-squares projection onto
a polynomial basis (Chebyshev by default, affinely rescaled to
[-1, 1]^d). Between regression times the reflected cloud advances by
fine Euler-with-projection substeps; dW_j aggregates the Brownian
increments of the interval and dG_j aggregates g(projected state) dK
over its substeps, g evaluated where the local time acts. The split
matters: local-time accuracy wants a fine simulation step, while the
variance of the Z regression scales like 1/sqrt(n_paths * delta) and
wants a coarse one. An optional discount term -alpha y is resolved by
Picard iteration of the implicit step.

y0 estimates u(T, x0) of the Neumann problem in terminal-value form at
time 0; time reversal turns that into the Cauchy-form solution.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import PreconditionError
from .fields import Driver, ScalarField
from .geometry import as_points
from .rng import NoiseSource, derive_key, make_generator
from .sde import DEFAULT_STEP, SdeCoefficients, _block_size

__all__ = [
    "NeumannProblem",
    "SolverConfig",
    "PolynomialBasis",
    "BsdeSolution",
    "solve_finite_horizon",
    "solve_horizon_pair",
    "evaluate_u",
    "DirectEstimate",
    "direct_estimator",
]

DEFAULT_BACKWARD_STEP = 0.02


@dataclass(frozen=True)
class NeumannProblem:
    """Coefficients of one boundary-value problem: reflected dynamics
    (drift, sigma, domain), driver f(x, z), boundary flux g, terminal h."""

    coeffs: SdeCoefficients
    driver: Driver
    boundary_g: ScalarField
    terminal_h: ScalarField

    def __post_init__(self):
        if self.coeffs.domain is None:
            raise PreconditionError("NeumannProblem needs a reflecting domain")
        if not np.isfinite(self.driver.lipschitz_z):
            raise PreconditionError("driver must have a finite z-Lipschitz constant")

    @property
    def dim(self) -> int:
        return self.coeffs.dim

    def with_(self, **changes) -> "NeumannProblem":
        return replace(self, **changes)


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the regression solver; mirrors the config-file keys.

    n_steps is the number of regression (backward) steps; substeps is
    the number of fine forward substeps per regression step. The
    defaults aim at a regression step of 0.02 and a fine step of 1e-3.
    """

    n_paths: int = 4000
    n_steps: Optional[int] = None
    substeps: Optional[int] = None
    basis_family: str = "chebyshev"
    basis_degree: Optional[int] = None  # None: 4 in 1-d, 2 per axis otherwise
    picard_iters: int = 1
    z_cap: float = 25.0
    seed: int = 0

    def degree_for(self, dim: int) -> int:
        if self.basis_degree is not None:
            return self.basis_degree
        return 4 if dim == 1 else 2

    def grids_for(self, T: float) -> tuple:
        """(n_backward, n_sub, delta, h_fine) for horizon T."""
        n_back = self.n_steps or max(1, round(T / DEFAULT_BACKWARD_STEP))
        delta = T / n_back
        n_sub = self.substeps or max(1, round(delta / DEFAULT_STEP))
        return n_back, n_sub, delta, delta / n_sub


class PolynomialBasis:
    """Tensor polynomial basis on an axis-aligned box, rescaled so each
    coordinate lives on [-1, 1]. family: "chebyshev" or "monomial"."""

    def __init__(self, family: str, degree: int, lo, hi):
        if family not in ("chebyshev", "monomial"):
            raise PreconditionError(f"unknown basis family {family!r}")
        if degree < 0:
            raise PreconditionError("basis degree must be >= 0")
        self.family = family
        self.degree = int(degree)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.dim = len(self.lo)
        self.powers = list(itertools.product(range(self.degree + 1), repeat=self.dim))

    @property
    def size(self) -> int:
        return len(self.powers)

    def _rescale(self, x: np.ndarray) -> np.ndarray:
        return (2.0 * x - (self.lo + self.hi)) / (self.hi - self.lo)

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self._rescale(x)
        if self.family == "chebyshev":
            vanders = [np.polynomial.chebyshev.chebvander(u[:, j], self.degree)
                       for j in range(self.dim)]
        else:
            vanders = [np.vander(u[:, j], self.degree + 1, increasing=True)
                       for j in range(self.dim)]
        out = np.empty((x.shape[0], self.size))
        for i, pw in enumerate(self.powers):
            col = vanders[0][:, pw[0]].copy()
            for j in range(1, self.dim):
                col *= vanders[j][:, pw[j]]
            out[:, i] = col
        return out

    def shrunk(self) -> "PolynomialBasis":
        return PolynomialBasis(self.family, self.degree - 1, self.lo, self.hi)


class _Regressor:
    """Per-step least squares with automatic degree degradation when the
    normal matrix is numerically singular (degenerate clouds)."""

    def __init__(self, basis: PolynomialBasis):
        self.basis = basis
        self.degraded_steps = 0

    def fit(self, x: np.ndarray, targets: np.ndarray):
        """targets: (N, m). Returns (coeffs (B, m), fitted (N, m),
        chol factor, used_basis)."""
        basis = self.basis
        while True:
            design = basis.design(x)
            gram = design.T @ design
            try:
                cho = scipy.linalg.cho_factor(gram, check_finite=False)
                coef = scipy.linalg.cho_solve(cho, design.T @ targets,
                                              check_finite=False)
                break
            except scipy.linalg.LinAlgError:
                if basis.degree == 0:
                    raise
                basis = basis.shrunk()
                self.degraded_steps += 1
        fitted = design @ coef
        return coef, fitted, cho, basis


def _pad_coeffs(coef: np.ndarray, used: "PolynomialBasis",
                full: "PolynomialBasis") -> np.ndarray:
    """Embed coefficients of a degraded basis into the full layout."""
    if used.size == full.size:
        return coef
    out = np.zeros((full.size,) + coef.shape[1:])
    index = {pw: i for i, pw in enumerate(full.powers)}
    for j, pw in enumerate(used.powers):
        out[index[pw]] = coef[j]
    return out


@dataclass
class BsdeSolution:
    """Output of the backward solve. y_coeffs[j] / z_coeffs[j] hold the
    regression coefficients of Y_j and Z_j, j = 0..J-1, on the full
    basis layout (degraded steps are zero-padded)."""

    t: np.ndarray             # (J+1,) regression times
    y0: float
    y0_se: float
    z0: np.ndarray            # (d,)
    basis: PolynomialBasis
    y_coeffs: np.ndarray      # (J, B)
    z_coeffs: np.ndarray      # (J, B, d)
    x_ref: np.ndarray         # point where y0 / z0 are reported, (1, d)
    surface: bool
    y0_cov: np.ndarray        # (B, B) covariance of the step-0 coefficients
    flags: dict
    config: SolverConfig
    diagnostics: dict = field(default_factory=dict)


def _forward_cloud(problem: NeumannProblem, x0, T: float, config: SolverConfig,
                   surface: bool, label: str):
    """Advance the reflected cloud on the fine grid, recording at the
    regression times the state, the aggregated Brownian increment dW_j
    and the aggregated boundary term dG_j = sum g(X) dK, plus dK_j."""
    coeffs = problem.coeffs
    dom = coeffs.domain
    d = dom.dim
    n_back, n_sub, delta, h = config.grids_for(T)
    n_paths = config.n_paths

    key = derive_key(config.seed, label)
    if surface:
        init_rng = make_generator(derive_key(config.seed, label + "/init"))
        x = dom.sample_interior(n_paths, init_rng)
    else:
        if x0 is None:
            raise PreconditionError("pointwise solve needs x0")
        x = np.repeat(as_points(x0, d), n_paths, axis=0)
        if np.any(dom.phi(x) < -1e-12):
            raise PreconditionError("x0 outside closure of the domain")

    states = np.empty((n_paths, n_back + 1, d))
    dw_coarse = np.zeros((n_paths, n_back, d))
    dg_coarse = np.zeros((n_paths, n_back))
    dk_coarse = np.zeros((n_paths, n_back))
    states[:, 0] = x

    g = problem.boundary_g
    noise = NoiseSource(key, n_paths, d)
    sig_t = coeffs.sigma.T
    sqrt_h = np.sqrt(h)
    n_fine = n_back * n_sub
    block = max(n_sub, (_block_size(n_paths, d, n_fine) // n_sub) * n_sub)
    k = 0
    while k < n_fine:
        m = min(block, n_fine - k)
        dwb = noise.normals(m) * sqrt_h
        for i in range(m):
            j = k // n_sub
            dw = dwb[:, i, :]
            proposal = x + coeffs.drift_at(x) * h + dw @ sig_t
            x = dom.project(proposal)
            dk = np.linalg.norm(proposal - x, axis=1)
            dw_coarse[:, j] += dw
            dk_coarse[:, j] += dk
            hit = dk > 0
            if np.any(hit):
                dg_coarse[hit, j] += g(x[hit]) * dk[hit]
            k += 1
            if k % n_sub == 0:
                states[:, k // n_sub] = x
    t = np.linspace(0.0, T, n_back + 1)
    return t, delta, states, dw_coarse, dg_coarse, dk_coarse, key


def _backward_sweep(problem: NeumannProblem, basis: PolynomialBasis,
                    delta: float, states, dws, dgs, picard_factor: float):
    """One least-squares backward pass over a recorded cloud segment.

    The terminal condition is h evaluated at the last recorded state, so
    passing sliced arrays solves the problem over the initial segment.
    Returns the per-step coefficient tables, the step-0 coefficient
    covariance and the sweep statistics that feed the quality flags.
    """
    n_paths, n_back = dws.shape[0], dws.shape[1]
    d = states.shape[2]
    reg = _Regressor(basis)

    f = problem.driver
    y = problem.terminal_h(states[:, -1])
    y_coeffs = np.zeros((n_back, basis.size))
    z_coeffs = np.zeros((n_back, basis.size, d))
    zmax = 0.0
    fmax = 0.0
    y0_cov = np.zeros((basis.size, basis.size))

    need_z = f.depends_on_z
    z_dummy = np.zeros((n_paths, d))
    for j in range(n_back - 1, -1, -1):
        xj = states[:, j]
        if need_z:
            coef_z, z_fit, _cho, used_z = reg.fit(xj, y[:, None] * dws[:, j] / delta)
            zmax = max(zmax, float(np.linalg.norm(z_fit, axis=1).max()))
            z_coeffs[j] = _pad_coeffs(coef_z, used_z, basis)
        else:
            z_fit = z_dummy

        fv = f(xj, z_fit)
        fmax = max(fmax, float(np.abs(fv).max()))
        target = y + fv * delta + dgs[:, j]
        coef_y, y_fit, cho, used_y = reg.fit(xj, target[:, None])
        y = y_fit[:, 0] * picard_factor

        y_coeffs[j] = _pad_coeffs(coef_y[:, 0] * picard_factor, used_y, basis)

        if j == 0:
            resid = target * picard_factor - y
            dof = max(1, n_paths - used_y.size)
            sigma2 = float(resid @ resid) / dof
            gram_inv = scipy.linalg.cho_solve(cho, np.eye(used_y.size),
                                              check_finite=False)
            cov_small = sigma2 * gram_inv
            y0_cov = _pad_coeffs(_pad_coeffs(cov_small, used_y, basis).T,
                                 used_y, basis).T

    return y_coeffs, z_coeffs, y0_cov, zmax, fmax, reg.degraded_steps


def _finish_solution(problem: NeumannProblem, T: float, config: SolverConfig,
                     basis: PolynomialBasis, t, delta: float, states, dks,
                     key, surface: bool, discount_alpha: float, x0,
                     n_sub: int, h_fine: float, sweep) -> BsdeSolution:
    """Evaluate a sweep at the reference point and attach flags and
    diagnostics for the horizon it covers."""
    y_coeffs, z_coeffs, y0_cov, zmax, fmax, degraded = sweep
    dom = problem.coeffs.domain
    d = dom.dim

    x_ref = np.zeros((1, d)) if surface else as_points(x0, d)
    phi_ref = basis.design(x_ref)
    y0 = (phi_ref @ y_coeffs[0]).item()
    z0 = (phi_ref @ z_coeffs[0].reshape(basis.size, d)).ravel()
    y0_se = float(np.sqrt(max(0.0, (phi_ref @ y0_cov @ phi_ref.T).item())))

    flags: dict = {}
    if degraded:
        flags["basis_degraded_steps"] = degraded
    if zmax > config.z_cap:
        flags["z_cap_exceeded"] = zmax
        warnings.warn(f"regression Z estimates reached {zmax:.3g}, above the "
                      f"cap {config.z_cap:g}; run flagged")

    mean_k = float(dks.sum(axis=1).mean())
    h_sup = problem.terminal_h.bound
    if h_sup is None:
        h_sup = float(np.abs(problem.terminal_h(states[:, -1])).max())
    g_sup = problem.boundary_g.bound
    if g_sup is None:
        g_sup = 0.0 if not np.any(dks > 0) else float(
            np.abs(problem.boundary_g(dom.project(states[:, -1]))).max())
    crude = h_sup + T * fmax + g_sup * mean_k
    if abs(y0) > crude + 1.0 + 0.1 * abs(crude):
        flags["y0_bound_violated"] = (y0, crude)
        warnings.warn(f"y0 = {y0:.4g} violates the crude a priori bound "
                      f"{crude:.4g}; run flagged")

    return BsdeSolution(
        t=t, y0=y0, y0_se=y0_se, z0=z0, basis=basis, y_coeffs=y_coeffs,
        z_coeffs=z_coeffs, x_ref=x_ref, surface=surface, y0_cov=y0_cov,
        flags=flags, config=config,
        diagnostics={"mean_total_local_time": mean_k, "z_max": zmax,
                     "seed_key": key, "delta": delta, "h_fine": h_fine,
                     "substeps": n_sub, "basis_size": basis.size,
                     "discount_alpha": discount_alpha},
    )


def solve_finite_horizon(problem: NeumannProblem, T: float, x0=None,
                         config: Optional[SolverConfig] = None,
                         surface: bool = False, discount_alpha: float = 0.0,
                         label: str = "bsde") -> BsdeSolution:
    """Backward regression solve over horizon T.

    Pointwise mode starts every path at x0 and reports y0 ~ u(T, x0)
    with its regression standard error. Surface mode starts the cloud
    uniformly over closure(G); the step-0 regression then approximates
    u(T, .) globally and is queried through evaluate_u.
    """
    config = config or SolverConfig()
    if discount_alpha < 0:
        raise PreconditionError("discount_alpha must be >= 0")
    dom = problem.coeffs.domain
    d = dom.dim
    t, delta, states, dws, dgs, dks, key = _forward_cloud(
        problem, x0, T, config, surface, label)

    lo, hi = dom.bounding_box()
    basis = PolynomialBasis(config.basis_family, config.degree_for(d), lo, hi)

    # Picard resolution of Y = E[target] - alpha delta Y: the iterates
    # stay in the regression span, so they collapse to a scalar factor
    # (geometric partial sum).
    picard_factor = 1.0
    if discount_alpha > 0.0:
        ad = discount_alpha * delta
        picard_factor = float(sum((-ad) ** i for i in range(config.picard_iters + 1)))

    sweep = _backward_sweep(problem, basis, delta, states, dws, dgs,
                            picard_factor)
    n_back_, n_sub, _, h_fine = config.grids_for(T)
    return _finish_solution(problem, T, config, basis, t, delta, states, dks,
                            key, surface, discount_alpha, x0, n_sub, h_fine,
                            sweep)


def solve_horizon_pair(problem: NeumannProblem, T1: float, T2: float, x0,
                       config: Optional[SolverConfig] = None,
                       label: str = "pair") -> tuple:
    """Pointwise solves at two horizons sharing one forward cloud.

    The cloud advances to T2 and the shorter solve runs its backward
    pass on the initial segment, so the two estimates are coupled
    pathwise: in y0(T2) - y0(T1) the contribution of [0, T1] cancels
    path by path and only the (T1, T2] increment carries noise. That
    makes the pair the right primitive for horizon differencing, whose
    naive form (independent clouds per horizon) pays the full variance
    of both solves. T1 must sit on the coarse grid of the T2 solve.
    Returns (solution_T1, solution_T2).
    """
    config = config or SolverConfig()
    if not 0.0 < T1 < T2:
        raise PreconditionError("horizon pair needs 0 < T1 < T2")
    n_back, n_sub, delta, h_fine = config.grids_for(T2)
    n1 = round(T1 / delta)
    if n1 < 1 or abs(n1 * delta - T1) > 1e-9 * max(1.0, T2):
        raise PreconditionError("T1 must sit on the coarse time grid of the "
                                "T2 solve; adjust n_steps or the pair")
    dom = problem.coeffs.domain
    t, delta, states, dws, dgs, dks, key = _forward_cloud(
        problem, x0, T2, config, False, label)

    lo, hi = dom.bounding_box()
    basis = PolynomialBasis(config.basis_family, config.degree_for(dom.dim),
                            lo, hi)
    solutions = []
    for n_use, T_use in ((n1, T1), (n_back, T2)):
        sweep = _backward_sweep(problem, basis, delta, states[:, :n_use + 1],
                                dws[:, :n_use], dgs[:, :n_use], 1.0)
        solutions.append(_finish_solution(
            problem, T_use, config, basis, t[:n_use + 1], delta,
            states[:, :n_use + 1], dks[:, :n_use], key, False, 0.0, x0,
            n_sub, h_fine, sweep))
    return tuple(solutions)


def evaluate_u(solution: BsdeSolution, x_grid, domain) -> tuple:
    """Evaluate the step-0 regression surface at points of closure(G).

    Points outside are projected first (with a warning). Returns
    (values, standard errors) from the step-0 coefficient covariance.
    Empty input gives empty output.
    """
    x = np.asarray(x_grid, dtype=float)
    if x.size == 0:
        return np.empty(0), np.empty(0)
    pts = as_points(x, solution.basis.dim)
    if np.any(domain.phi(pts) < -1e-12):
        warnings.warn("evaluate_u: points outside closure(G) were projected")
        pts = domain.project(pts)
    design = solution.basis.design(pts)
    values = design @ solution.y_coeffs[0]
    ses = np.sqrt(np.maximum(0.0, np.einsum("ij,jk,ik->i", design,
                                            solution.y0_cov, design)))
    return values, ses


@dataclass
class DirectEstimate:
    value: float
    se: float
    n_paths: int
    mean_local_time: float


def direct_estimator(problem: NeumannProblem, T: float, x0,
                     n_paths: int = 10000, n_steps: Optional[int] = None,
                     seed: int = 0, label: str = "direct") -> DirectEstimate:
    """Plain Monte Carlo for z-independent drivers:

        E[ h(X_T) + sum f(X_k) h + sum g(X_{k+1}) dK_k ]

    on the fine grid (default step 1e-3). Streams over steps, so long
    horizons and large clouds stay cheap. Rejects z-dependent drivers.
    """
    if problem.driver.depends_on_z:
        raise PreconditionError("direct estimator requires a z-independent driver")
    coeffs = problem.coeffs
    dom = coeffs.domain
    d = dom.dim
    if n_steps is None:
        n_steps = max(1, round(T / DEFAULT_STEP))
    h = T / n_steps

    x = np.repeat(as_points(x0, d), n_paths, axis=0)
    if np.any(dom.phi(x) < -1e-12):
        raise PreconditionError("x0 outside closure of the domain")

    key = derive_key(seed, label)
    noise = NoiseSource(key, n_paths, d)
    sig_t = coeffs.sigma.T
    sqrt_h = np.sqrt(h)
    total = np.zeros(n_paths)
    ktot = np.zeros(n_paths)
    zdummy = np.zeros((n_paths, d))
    f, g = problem.driver, problem.boundary_g

    block = _block_size(n_paths, d, n_steps)
    k = 0
    while k < n_steps:
        m = min(block, n_steps - k)
        dwb = noise.normals(m) * sqrt_h
        for j in range(m):
            total += f(x, zdummy) * h
            proposal = x + coeffs.drift_at(x) * h + dwb[:, j, :] @ sig_t
            x = dom.project(proposal)
            dk = np.linalg.norm(proposal - x, axis=1)
            hit = dk > 0
            if np.any(hit):
                total[hit] += g(x[hit]) * dk[hit]
            ktot += dk
            k += 1
    total += problem.terminal_h(x)
    return DirectEstimate(float(total.mean()),
                          float(total.std(ddof=1) / np.sqrt(n_paths)),
                          n_paths, float(ktot.mean()))
