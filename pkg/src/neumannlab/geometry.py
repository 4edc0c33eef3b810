"""Convex domains with smooth defining functions and exact projections.

A domain is G = {phi > 0} with phi = 0 on the boundary, phi < 0 outside,
and |grad phi| = 1 at every boundary point; grad phi on the boundary is
the unit *inward* normal. Shipped shapes: the interval [-1, 1], centered
balls, and axis-aligned ellipsoids. Boxes are deliberately absent: their
corners break the C^2 requirement on phi.

All point arguments are arrays of shape (N, d); scalar fields come back
as (N,), vector fields as (N, d). `as_points` normalizes looser inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import PreconditionError

__all__ = [
    "ConvexDomain",
    "IntervalDomain",
    "BallDomain",
    "EllipsoidDomain",
    "DriftExtension",
    "as_points",
    "penalization_force",
    "make_domain",
]

_NEWTON_TOL = 1e-12
_NEWTON_MAX_ITER = 100


def as_points(x, dim: int) -> np.ndarray:
    """Coerce scalars / flat vectors / (N, d) arrays to shape (N, d)."""
    a = np.atleast_1d(np.asarray(x, dtype=float))
    if a.ndim == 1:
        if dim == 1:
            a = a[:, None]
        elif a.shape[0] == dim:
            a = a[None, :]
        else:
            raise PreconditionError(f"cannot view shape {a.shape} as points in R^{dim}")
    if a.ndim != 2 or a.shape[1] != dim:
        raise PreconditionError(f"expected points of shape (N, {dim}), got {a.shape}")
    return a


class ConvexDomain:
    """Base class; subclasses fill in phi, grad_phi and project."""

    dim: int

    def phi(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_phi(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project(self, x: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the closure of G."""
        raise NotImplementedError

    # ------------------------------------------------------------------
    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.phi(as_points(x, self.dim)) >= -tol

    def distance(self, x: np.ndarray) -> np.ndarray:
        """Euclidean distance to the closure of G (0 inside)."""
        p = as_points(x, self.dim)
        return np.linalg.norm(p - self.project(p), axis=1)

    def diameter(self) -> float:
        raise NotImplementedError

    def bounding_box(self) -> tuple:
        """(lo, hi) arrays of shape (d,) enclosing the closure of G."""
        raise NotImplementedError

    def sample_interior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draws over the closure of G."""
        raise NotImplementedError

    def sample_boundary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class IntervalDomain(ConvexDomain):
    """[-1, 1] with phi(x) = (1 - x^2)/2, so grad phi(+-1) = -+1."""

    dim: int = field(default=1, init=False)

    def phi(self, x):
        p = as_points(x, 1)
        return (1.0 - p[:, 0] ** 2) / 2.0

    def grad_phi(self, x):
        return -as_points(x, 1)

    def project(self, x):
        return np.clip(as_points(x, 1), -1.0, 1.0)

    def diameter(self):
        return 2.0

    def bounding_box(self):
        return np.array([-1.0]), np.array([1.0])

    def sample_interior(self, n, rng):
        return rng.uniform(-1.0, 1.0, size=(n, 1))

    def sample_boundary(self, n, rng):
        return rng.choice([-1.0, 1.0], size=(n, 1))


@dataclass(frozen=True)
class BallDomain(ConvexDomain):
    """Centered ball of radius r with phi(x) = (r^2 - |x|^2) / (2r)."""

    radius: float
    dim: int = 1

    def __post_init__(self):
        if self.radius <= 0:
            raise PreconditionError("ball radius must be positive")
        if self.dim < 1:
            raise PreconditionError("dimension must be >= 1")

    def phi(self, x):
        p = as_points(x, self.dim)
        return (self.radius**2 - np.sum(p * p, axis=1)) / (2.0 * self.radius)

    def grad_phi(self, x):
        return -as_points(x, self.dim) / self.radius

    def project(self, x):
        p = as_points(x, self.dim)
        r = np.linalg.norm(p, axis=1)
        scale = np.ones_like(r)
        out = r > self.radius
        scale[out] = self.radius / r[out]
        return p * scale[:, None]

    def diameter(self):
        return 2.0 * self.radius

    def bounding_box(self):
        r = self.radius
        return np.full(self.dim, -r), np.full(self.dim, r)

    def sample_interior(self, n, rng):
        # polar: uniform direction, radius ~ r * U^(1/d)
        z = rng.standard_normal((n, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        u = rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return self.radius * z * u

    def sample_boundary(self, n, rng):
        z = rng.standard_normal((n, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return self.radius * z


@dataclass(frozen=True)
class EllipsoidDomain(ConvexDomain):
    """Axis-aligned ellipsoid sum (x_i / a_i)^2 < 1.

    phi(x) = (1 - q(x)) / s(x) with q the quadratic form and
    s(x) = 2 sqrt(sum x_i^2/a_i^4 + c (1-q)^2), c = 1/min(a)^2. The
    radicand never vanishes, so phi is smooth everywhere, and on the
    boundary s equals |grad q| exactly, giving |grad phi| = 1 there.
    """

    semi_axes: tuple

    def __post_init__(self):
        axes = tuple(float(a) for a in self.semi_axes)
        if len(axes) < 1 or any(a <= 0 for a in axes):
            raise PreconditionError("semi-axes must be positive")
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "_a", np.asarray(axes))
        object.__setattr__(self, "_c", 1.0 / min(axes) ** 2)

    @property
    def dim(self) -> int:  # type: ignore[override]
        return len(self.semi_axes)

    def _q(self, p):
        return np.sum((p / self._a) ** 2, axis=1)

    def phi(self, x):
        p = as_points(x, self.dim)
        q = self._q(p)
        m = np.sum(p**2 / self._a**4, axis=1) + self._c * (1.0 - q) ** 2
        return (1.0 - q) / (2.0 * np.sqrt(m))

    def grad_phi(self, x):
        p = as_points(x, self.dim)
        q = self._q(p)
        m = np.sum(p**2 / self._a**4, axis=1) + self._c * (1.0 - q) ** 2
        s = 2.0 * np.sqrt(m)
        gq = 2.0 * p / self._a**2
        gm = 2.0 * p / self._a**4 - (2.0 * self._c * (1.0 - q))[:, None] * gq
        gs = gm / np.sqrt(m)[:, None]
        return (-gq * s[:, None] - (1.0 - q)[:, None] * gs) / (s**2)[:, None]

    def project(self, x):
        p = as_points(x, self.dim)
        q = self._q(p)
        out = q > 1.0
        result = p.copy()
        if not np.any(out):
            return result
        xo = p[out]
        a2 = self._a**2
        # Lagrange system y_i = x_i a_i^2/(a_i^2 + t); solve
        # F(t) = sum x_i^2 a_i^2 / (a_i^2 + t)^2 - 1 = 0 for t > 0.
        # F is decreasing and convex, so Newton from t = 0 converges
        # monotonically from the left.
        t = np.zeros(len(xo))
        for _ in range(_NEWTON_MAX_ITER):
            denom = a2[None, :] + t[:, None]
            terms = xo**2 * a2[None, :] / denom**2
            f = terms.sum(axis=1) - 1.0
            fp = -2.0 * (terms / denom).sum(axis=1)
            step = f / fp
            t = t - step
            if np.max(np.abs(step)) < _NEWTON_TOL:
                break
        result[out] = xo * a2[None, :] / (a2[None, :] + t[:, None])
        return result

    def diameter(self):
        return 2.0 * max(self.semi_axes)

    def bounding_box(self):
        return -self._a.copy(), self._a.copy()

    def sample_interior(self, n, rng):
        # uniform in the unit ball, stretched by the semi-axes
        z = rng.standard_normal((n, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        u = rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return z * u * self._a[None, :]

    def sample_boundary(self, n, rng):
        z = rng.standard_normal((n, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y = z * self._a[None, :]
        # rescale onto the boundary along the ray from the origin
        return y / np.sqrt(self._q(y))[:, None]


def penalization_force(domain: ConvexDomain, x: np.ndarray, n_pen: int) -> np.ndarray:
    """F_n(x) = -2 n (x - project(x)); zero on the closure of G."""
    if n_pen <= 0:
        raise PreconditionError("penalization index must be positive")
    p = as_points(x, domain.dim)
    return -2.0 * n_pen * (p - domain.project(p))


@dataclass(frozen=True)
class DriftExtension:
    """Weak-dissipative extension of a drift defined on closure(G).

    extended(x) = d(x) + p(x) with d(x) = -x strictly dissipative
    (constant eta = 1) and p(x) = b(project(x)) + project(x) bounded.
    On the closure of G this reduces to b itself.
    """

    domain: ConvexDomain
    base_drift: Optional[Callable] = None  # (N, d) -> (N, d); None means 0

    dissipativity_constant: float = field(default=1.0, init=False)

    def dissipative_part(self, x: np.ndarray) -> np.ndarray:
        return -as_points(x, self.domain.dim)

    def bounded_part(self, x: np.ndarray) -> np.ndarray:
        pi = self.domain.project(as_points(x, self.domain.dim))
        if self.base_drift is None:
            return pi
        return np.asarray(self.base_drift(pi)) + pi

    def __call__(self, x: np.ndarray) -> np.ndarray:
        p = as_points(x, self.domain.dim)
        return self.dissipative_part(p) + self.bounded_part(p)


def make_domain(kind: str, **params) -> ConvexDomain:
    """Construct a shipped domain by name (used by the config layer)."""
    kind = kind.lower()
    if kind == "interval":
        return IntervalDomain()
    if kind == "ball":
        return BallDomain(radius=float(params.get("radius", 1.0)),
                          dim=int(params.get("dim", 1)))
    if kind == "ellipsoid":
        axes = params.get("semi_axes")
        if axes is None:
            raise PreconditionError("ellipsoid domain needs semi_axes")
        return EllipsoidDomain(semi_axes=tuple(float(a) for a in axes))
    raise PreconditionError(f"unknown domain kind {kind!r}")
