"""Path simulation: reflected, penalized, and free Euler schemes.

The reflected scheme is Euler with projection: the raw Euler proposal is
projected back onto closure(G) and the distance pushed is accumulated as
the boundary local time K. The penalized scheme replaces reflection with
the restoring force F_n(x) = -2n(x - project(x)) added to the
weak-dissipative drift extension; when the explicit step would be stiff
(2 n h >= 1) it switches to a semi-implicit resolvent step that is exact
for the penalty term. The free scheme has no boundary at all and backs
the mixing diagnostics for the unconstrained dissipative dynamics.

Noise comes from per-path counter-based streams (see rng.py), drawn in
bounded blocks so long horizons do not hold the full increment array.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import PreconditionError
from .fields import ScalarField
from .geometry import ConvexDomain, DriftExtension, as_points
from .rng import NoiseSource, derive_key

__all__ = [
    "SdeCoefficients",
    "PathBundle",
    "simulate_reflected",
    "simulate_penalized",
    "simulate_free",
    "MomentEstimate",
    "moment_estimate",
    "CouplingReport",
    "coupling_gap",
]

DEFAULT_STEP = 1e-3
_BLOCK_VALUES = 12_000_000  # max floats per noise block (~96 MB)
_COND_CAP = 1e8


def _as_sigma(sigma, dim: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        s = s * np.eye(dim)
    if s.shape != (dim, dim):
        raise PreconditionError(f"sigma must be a constant {dim}x{dim} matrix")
    if not np.all(np.isfinite(s)) or np.linalg.cond(s) > _COND_CAP:
        raise PreconditionError("sigma must be finite and invertible")
    return s


@dataclass(frozen=True)
class SdeCoefficients:
    """Drift b, constant invertible sigma, and the reflecting domain.

    domain may be None for free (unconstrained) dynamics; the reflected
    and penalized simulators require it.
    """

    drift: Optional[Callable]  # (N, d) -> (N, d); None means 0
    sigma: np.ndarray
    domain: Optional[ConvexDomain]
    dim: int = 1

    def __post_init__(self):
        d = self.domain.dim if self.domain is not None else self.dim
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "sigma", _as_sigma(self.sigma, d))

    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    def drift_at(self, x: np.ndarray) -> np.ndarray:
        if self.drift is None:
            return np.zeros_like(x)
        return np.asarray(self.drift(x), dtype=float).reshape(x.shape)


@dataclass
class PathBundle:
    """Simulated paths on a uniform grid.

    states has shape (n_paths, n_steps + 1, d); local_time is the
    cumulative K with K[:, 0] = 0, nondecreasing, flat while the raw
    proposal stays inside the domain.
    """

    t: np.ndarray
    states: np.ndarray
    local_time: np.ndarray
    scheme: str
    seed_info: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def _resolve_grid(T: float, n_steps: Optional[int]) -> tuple[int, float]:
    if T <= 0:
        raise PreconditionError("horizon must be positive")
    if n_steps is None:
        n_steps = max(1, round(T / DEFAULT_STEP))
    if n_steps < 1:
        raise PreconditionError("need at least one step")
    return int(n_steps), T / int(n_steps)


def _initial_cloud(x0, n_paths: int, dim: int) -> np.ndarray:
    x = as_points(x0, dim)
    if x.shape[0] == 1:
        x = np.repeat(x, n_paths, axis=0)
    if x.shape[0] != n_paths:
        raise PreconditionError("initial cloud size does not match n_paths")
    return x.copy()


def _block_size(n_paths: int, dim: int, n_steps: int) -> int:
    return max(1, min(n_steps, _BLOCK_VALUES // max(1, n_paths * dim)))


def iter_euler_steps(step_fn, x: np.ndarray, h: float, n_steps: int,
                     noise: NoiseSource):
    """Drive step_fn(x, dw) -> (x_next, dk) over the grid, yielding
    (k, x_next, dw, dk) with x updated in place between yields."""
    n_paths, dim = x.shape
    block = _block_size(n_paths, dim, n_steps)
    sqrt_h = np.sqrt(h)
    k = 0
    while k < n_steps:
        m = min(block, n_steps - k)
        dws = noise.normals(m) * sqrt_h
        for j in range(m):
            dw = dws[:, j, :]
            x, dk = step_fn(x, dw)
            yield k, x, dw, dk
            k += 1


def simulate_reflected(coeffs: SdeCoefficients, x0, T: float,
                       n_steps: Optional[int] = None, n_paths: int = 1000,
                       seed: int = 0, label: str = "reflected",
                       ) -> PathBundle:
    """Euler-with-projection scheme for the reflected SDE.

    dK at each step is the Euclidean distance the raw proposal was
    pushed, so K increases only when the proposal exits the domain.
    """
    if coeffs.domain is None:
        raise PreconditionError("reflected simulation needs a domain")
    dom = coeffs.domain
    n_steps, h = _resolve_grid(T, n_steps)
    x = _initial_cloud(x0, n_paths, dom.dim)
    if np.any(dom.phi(x) < -1e-12):
        raise PreconditionError("initial state outside closure of the domain")

    key = derive_key(seed, label)
    noise = NoiseSource(key, n_paths, dom.dim)
    sig_t = coeffs.sigma.T

    states = np.empty((n_paths, n_steps + 1, dom.dim))
    local_time = np.zeros((n_paths, n_steps + 1))
    states[:, 0] = x

    def step_fn(x, dw):
        proposal = x + coeffs.drift_at(x) * h + dw @ sig_t
        projected = dom.project(proposal)
        dk = np.linalg.norm(proposal - projected, axis=1)
        return projected, dk

    for k, x_next, _dw, dk in iter_euler_steps(step_fn, x, h, n_steps, noise):
        states[:, k + 1] = x_next
        local_time[:, k + 1] = local_time[:, k] + dk

    t = np.linspace(0.0, T, n_steps + 1)
    return PathBundle(t, states, local_time, "projected",
                      {"seed": seed, "label": label, "key": key})


def simulate_penalized(coeffs: SdeCoefficients, n_pen: int, x0, T: float,
                       n_steps: Optional[int] = None, n_paths: int = 1000,
                       seed: int = 0, label: str = "reflected",
                       scheme: str = "auto") -> PathBundle:
    """Penalized SDE with the weak-dissipative drift extension.

    The local time proxy accumulates |F_n| h = 2 n dist(X, G) h at the
    state where the force acts. scheme: "explicit", "semi_implicit", or
    "auto" (explicit unless 2 n h >= 1, which would be stiff).

    The default label matches simulate_reflected on purpose: with the
    same seed both schemes consume identical per-path noise, which is
    what the penalization convergence diagnostic requires.
    """
    if coeffs.domain is None:
        raise PreconditionError("penalized simulation needs a domain")
    if n_pen <= 0:
        raise PreconditionError("penalization index must be positive")
    dom = coeffs.domain
    n_steps, h = _resolve_grid(T, n_steps)
    x = _initial_cloud(x0, n_paths, dom.dim)

    stiff = 2.0 * n_pen * h >= 1.0
    if scheme == "auto":
        scheme = "semi_implicit" if stiff else "explicit"
        if stiff:
            warnings.warn(
                f"penalized step is stiff (2nh = {2 * n_pen * h:.3g} >= 1); "
                "switching to the semi-implicit resolvent step")
    elif scheme == "explicit" and stiff:
        warnings.warn(f"explicit penalized step with 2nh = {2 * n_pen * h:.3g} >= 1 "
                      "may be unstable")
    if scheme not in ("explicit", "semi_implicit"):
        raise PreconditionError(f"unknown scheme {scheme!r}")

    extension = DriftExtension(dom, coeffs.drift)
    key = derive_key(seed, label)
    noise = NoiseSource(key, n_paths, dom.dim)
    sig_t = coeffs.sigma.T

    states = np.empty((n_paths, n_steps + 1, dom.dim))
    local_time = np.zeros((n_paths, n_steps + 1))
    states[:, 0] = x

    if scheme == "explicit":
        def step_fn(x, dw):
            pi = dom.project(x)
            force = -2.0 * n_pen * (x - pi)
            dk = 2.0 * n_pen * np.linalg.norm(x - pi, axis=1) * h
            x_next = x + (extension(x) + force) * h + dw @ sig_t
            return x_next, dk
    else:
        # solve w = x_next + 2nh (x_next - project(x_next)); for convex G
        # the solution lies on the normal segment of w, in closed form.
        shrink = 1.0 / (1.0 + 2.0 * n_pen * h)

        def step_fn(x, dw):
            w = x + extension(x) * h + dw @ sig_t
            pi = dom.project(w)
            x_next = pi + (w - pi) * shrink
            dk = 2.0 * n_pen * np.linalg.norm(x_next - pi, axis=1) * h
            return x_next, dk

    for k, x_next, _dw, dk in iter_euler_steps(step_fn, x, h, n_steps, noise):
        states[:, k + 1] = x_next
        local_time[:, k + 1] = local_time[:, k] + dk

    t = np.linspace(0.0, T, n_steps + 1)
    return PathBundle(t, states, local_time, "penalized",
                      {"seed": seed, "label": label, "key": key, "n_pen": n_pen,
                       "scheme": scheme})


def simulate_free(drift: Optional[Callable], sigma, x0, T: float, dim: int = 1,
                  n_steps: Optional[int] = None, n_paths: int = 1000,
                  seed: int = 0, label: str = "free") -> PathBundle:
    """Unconstrained Euler scheme (no boundary, K identically 0)."""
    n_steps, h = _resolve_grid(T, n_steps)
    sig = _as_sigma(sigma, dim)
    x = _initial_cloud(x0, n_paths, dim)
    key = derive_key(seed, label)
    noise = NoiseSource(key, n_paths, dim)
    sig_t = sig.T

    states = np.empty((n_paths, n_steps + 1, dim))
    states[:, 0] = x

    def step_fn(x, dw):
        b = np.zeros_like(x) if drift is None else np.asarray(drift(x)).reshape(x.shape)
        return x + b * h + dw @ sig_t, 0.0

    for k, x_next, _dw, _dk in iter_euler_steps(step_fn, x, h, n_steps, noise):
        states[:, k + 1] = x_next

    t = np.linspace(0.0, T, n_steps + 1)
    return PathBundle(t, states, np.zeros((n_paths, n_steps + 1)), "free",
                      {"seed": seed, "label": label, "key": key})


# ----------------------------------------------------------------------
# diagnostics


@dataclass
class MomentEstimate:
    value: float       # max over grid times of the empirical p-moment
    se: float          # standard error at the maximizing time
    t_at_max: float
    p: int
    table: np.ndarray  # columns (t, moment, se)


def moment_estimate(bundle: PathBundle, p: int, stride: int = 1) -> MomentEstimate:
    """Empirical sup over grid times of E |X_t|^p with standard errors.

    p must be a positive even integer (odd moments of |X| are not what
    the dissipativity bound controls and are rejected).
    """
    if p <= 0 or p % 2 != 0:
        raise PreconditionError("p must be a positive even integer")
    idx = np.arange(0, len(bundle.t), stride)
    if idx[-1] != len(bundle.t) - 1:
        idx = np.append(idx, len(bundle.t) - 1)
    norms_p = np.linalg.norm(bundle.states[:, idx, :], axis=2) ** p
    means = norms_p.mean(axis=0)
    ses = norms_p.std(axis=0, ddof=1) / np.sqrt(bundle.n_paths)
    j = int(np.argmax(means))
    table = np.column_stack([bundle.t[idx], means, ses])
    return MomentEstimate(float(means[j]), float(ses[j]), float(bundle.t[idx][j]),
                          p, table)


@dataclass
class CouplingReport:
    """Semigroup gap |P_t f(x) - P_t f(y)| on a time grid, with the
    least-squares decay rate over the usable window."""

    t_grid: np.ndarray
    gaps: np.ndarray
    ses: np.ndarray
    rate: float
    rate_window: tuple
    x: np.ndarray
    y: np.ndarray
    test_bound: float


def coupling_gap(drift: Optional[Callable], sigma, x, y, phi_test: ScalarField,
                 t_grid, dim: int = 1, n_paths: int = 20000, seed: int = 0,
                 n_steps_per_unit: int = 1000,
                 label: str = "coupling") -> CouplingReport:
    """Estimate the semigroup contraction gap for the free dynamics.

    Runs two clouds from x and y with common per-path noise (synchronous
    coupling) and records mean phi_test differences at the grid times.
    phi_test must carry a finite sup bound; unbounded test functions are
    rejected because the estimate is only meaningful on bounded ones.
    """
    if phi_test.bound is None or not np.isfinite(phi_test.bound):
        raise PreconditionError("coupling_gap needs a bounded test function")
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    if t_grid[0] <= 0:
        raise PreconditionError("grid times must be positive")
    T = float(t_grid[-1])
    n_steps = max(1, round(T * n_steps_per_unit))
    h = T / n_steps
    grid_idx = np.rint(t_grid / h).astype(int)
    if np.any(np.abs(grid_idx * h - t_grid) > 1e-9):
        raise PreconditionError("t_grid must align with the step grid")

    sig = _as_sigma(sigma, dim)
    sig_t = sig.T
    xs = _initial_cloud(x, n_paths, dim)
    ys = _initial_cloud(y, n_paths, dim)
    key = derive_key(seed, label)
    noise = NoiseSource(key, n_paths, dim)

    def b(v):
        return np.zeros_like(v) if drift is None else np.asarray(drift(v)).reshape(v.shape)

    gaps = np.empty(len(t_grid))
    ses = np.empty(len(t_grid))
    block = _block_size(n_paths, dim, n_steps)
    sqrt_h = np.sqrt(h)
    k = 0
    pos = 0
    lookup = {int(g): i for i, g in enumerate(grid_idx)}
    while k < n_steps:
        m = min(block, n_steps - k)
        dws = noise.normals(m) * sqrt_h
        for j in range(m):
            dw = dws[:, j, :]
            xs = xs + b(xs) * h + dw @ sig_t
            ys = ys + b(ys) * h + dw @ sig_t
            k += 1
            if k in lookup:
                i = lookup[k]
                diffs = phi_test(xs) - phi_test(ys)
                gaps[i] = abs(float(diffs.mean()))
                ses[i] = float(diffs.std(ddof=1) / np.sqrt(n_paths))
                pos += 1
    assert pos == len(t_grid)

    rate, window = _fit_decay_rate(t_grid, gaps, ses)
    return CouplingReport(t_grid, gaps, ses, rate, window, xs[:1].copy(),
                          ys[:1].copy(), float(phi_test.bound))


def _fit_decay_rate(t, gaps, ses):
    """Slope of log(gap) vs t over the points where the signal beats
    3 standard errors of noise. Returns (rate, (t_lo, t_hi)); rate is
    nan when fewer than two usable points remain."""
    usable = gaps > 3.0 * ses
    usable &= gaps > 0
    if usable.sum() < 2:
        return float("nan"), (float("nan"), float("nan"))
    tt = t[usable]
    yy = np.log(gaps[usable])
    slope = np.polyfit(tt, yy, 1)[0]
    return float(-slope), (float(tt[0]), float(tt[-1]))
