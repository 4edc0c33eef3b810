"""Named scalar fields, BSDE drivers, and a small polynomial grammar.

Config files refer to functions by name; code can wrap any callable.
Vectorization contract: scalar fields map (N, d) -> (N,); drivers map
(x: (N, d), z: (N, d)) -> (N,). The polynomial grammar covers 1-d
expressions in the variables it is compiled with (e.g. "x" and "a" for
running costs), with +, -, *, integer ^ and parentheses.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import PreconditionError

__all__ = [
    "ScalarField",
    "Driver",
    "scalar_field",
    "driver",
    "drift_field",
    "compile_poly",
]


@dataclass(frozen=True)
class ScalarField:
    """A named function of the state, with an optional sup bound."""

    name: str
    fn: Callable  # (N, d) -> (N,)
    bound: Optional[float] = None  # sup norm over the relevant set, if known

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(x), dtype=float)


@dataclass(frozen=True)
class Driver:
    """BSDE driver f(x, z) with its z-Lipschitz constant."""

    name: str
    fn: Callable  # (x: (N, d), z: (N, d)) -> (N,)
    lipschitz_z: float
    depends_on_z: bool

    def __call__(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(x, z), dtype=float)


# ----------------------------------------------------------------------
# polynomial expression grammar

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*|\.\d+|\d+)|([A-Za-z_]\w*)|(\*\*|[-+*^()]))")


def _tokenize(expr: str):
    pos, out = 0, []
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if not m or m.end() == pos:
            raise PreconditionError(f"bad token in expression at {expr[pos:]!r}")
        num, name, op = m.groups()
        if num is not None:
            out.append(("num", float(num)))
        elif name is not None:
            out.append(("var", name))
        else:
            out.append(("op", "^" if op == "**" else op))
        pos = m.end()
    out.append(("end", None))
    return out


class _PolyParser:
    """Recursive descent for: expr := term (('+'|'-') term)*;
    term := factor ('*' factor)*; factor := atom ('^' int)?;
    atom := number | variable | '-' factor | '(' expr ')'."""

    def __init__(self, tokens, variables):
        self.toks = tokens
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise PreconditionError(f"trailing input in expression: {self.peek()!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            op = self.take()[1]
            rhs = self.term()
            node = (op, node, rhs)
        return node

    def term(self):
        node = self.factor()
        while self.peek() == ("op", "*"):
            self.take()
            node = ("*", node, self.factor())
        return node

    def factor(self):
        node = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            kind, val = self.take()
            if kind != "num" or val != int(val) or val < 0:
                raise PreconditionError("exponent must be a nonnegative integer")
            node = ("^", node, int(val))
        return node

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return ("num", val)
        if kind == "var":
            if val not in self.variables:
                raise PreconditionError(f"unknown variable {val!r}")
            return ("var", val)
        if (kind, val) == ("op", "-"):
            return ("neg", self.factor())
        if (kind, val) == ("op", "("):
            node = self.expr()
            if self.take() != ("op", ")"):
                raise PreconditionError("unbalanced parentheses")
            return node
        raise PreconditionError(f"unexpected token {val!r}")


def _eval_node(node, env):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        return env[node[1]]
    if tag == "neg":
        return -_eval_node(node[1], env)
    if tag == "+":
        return _eval_node(node[1], env) + _eval_node(node[2], env)
    if tag == "-":
        return _eval_node(node[1], env) - _eval_node(node[2], env)
    if tag == "*":
        return _eval_node(node[1], env) * _eval_node(node[2], env)
    if tag == "^":
        return _eval_node(node[1], env) ** node[2]
    raise AssertionError(node)


def compile_poly(expr: str, variables: Sequence[str] = ("x",)) -> Callable:
    """Compile a polynomial expression to fn(**variables) -> array."""
    tree = _PolyParser(_tokenize(expr), tuple(variables)).parse()

    def fn(**env):
        return _eval_node(tree, env)

    fn.expression = expr  # type: ignore[attr-defined]
    return fn


# ----------------------------------------------------------------------
# named builders

def _parse_params(spec: str):
    if ":" not in spec:
        return spec, []
    head, tail = spec.split(":", 1)
    return head, [float(v) for v in tail.split(",") if v.strip() != ""]


def scalar_field(spec: str) -> ScalarField:
    """Built-in scalar fields: zero, one, constant:c, identity,
    indicator_pos (1 where x_1 > 0), poly:c0,c1,... (1-d polynomial
    sum c_k x^k)."""
    head, params = _parse_params(spec)
    if head == "zero":
        return ScalarField("zero", lambda x: np.zeros(len(x)), bound=0.0)
    if head == "one":
        return ScalarField("one", lambda x: np.ones(len(x)), bound=1.0)
    if head == "indicator_pos":
        return ScalarField(
            "indicator_pos",
            lambda x: (np.asarray(x)[:, 0] > 0).astype(float), bound=1.0)
    if head == "constant":
        if len(params) != 1:
            raise PreconditionError("constant:c needs one parameter")
        c = params[0]
        return ScalarField(spec, lambda x, c=c: np.full(len(x), c), bound=abs(c))
    if head == "identity":
        return ScalarField("identity", lambda x: np.asarray(x)[:, 0], bound=None)
    if head == "poly":
        if not params:
            raise PreconditionError("poly needs coefficients c0,c1,...")
        coeffs = np.asarray(params)
        return ScalarField(
            spec,
            lambda x, c=coeffs: np.polynomial.polynomial.polyval(np.asarray(x)[:, 0], c),
            bound=None,
        )
    raise PreconditionError(f"unknown scalar field {spec!r}")


def driver(spec: str) -> Driver:
    """Built-in drivers: zero, constant:c, abs_z (= |z|),
    neg_abs_z (= -|z|), poly:c0,c1,... (x-only)."""
    head, params = _parse_params(spec)
    if head == "zero":
        return Driver("zero", lambda x, z: np.zeros(len(x)), 0.0, False)
    if head == "constant":
        if len(params) != 1:
            raise PreconditionError("constant:c needs one parameter")
        c = params[0]
        return Driver(spec, lambda x, z, c=c: np.full(len(x), c), 0.0, False)
    if head == "abs_z":
        return Driver("abs_z", lambda x, z: np.linalg.norm(z, axis=1), 1.0, True)
    if head == "neg_abs_z":
        return Driver("neg_abs_z", lambda x, z: -np.linalg.norm(z, axis=1), 1.0, True)
    if head == "poly":
        if not params:
            raise PreconditionError("poly needs coefficients c0,c1,...")
        coeffs = np.asarray(params)
        return Driver(
            spec,
            lambda x, z, c=coeffs: np.polynomial.polynomial.polyval(np.asarray(x)[:, 0], c),
            0.0,
            False,
        )
    raise PreconditionError(f"unknown driver {spec!r}")


def drift_field(spec: str) -> Optional[Callable]:
    """Built-in drifts b: (N, d) -> (N, d): zero, ou (b = -x),
    poly:c0,c1,... (1-d, applied coordinatewise on x_1)."""
    head, params = _parse_params(spec)
    if head == "zero":
        return None
    if head == "ou":
        return lambda x: -np.asarray(x, dtype=float)
    if head == "poly":
        if not params:
            raise PreconditionError("poly needs coefficients c0,c1,...")
        coeffs = np.asarray(params)

        def fn(x, c=coeffs):
            p = np.asarray(x, dtype=float)
            if p.shape[1] != 1:
                raise PreconditionError("poly drift is 1-d only")
            return np.polynomial.polynomial.polyval(p[:, 0], c)[:, None]

        return fn
    raise PreconditionError(f"unknown drift {spec!r}")
