"""Experiment configuration: a restricted TOML schema and its loader.

A config is four sections (top-level scalars, [domain], [problem],
[params]) holding only strings, booleans, integers, floats, and flat
lists of those. That restriction is what makes dump/load lossless:
floats are emitted with repr, so a round trip reproduces the exact
parsed values, and dumps are canonical (fixed section order, sorted
keys) so equal configs serialize to equal bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from .bsde import NeumannProblem
from .errors import PreconditionError
from .fields import drift_field, driver, scalar_field
from .geometry import make_domain
from .sde import SdeCoefficients

__all__ = ["RunConfig", "load_config", "parse_config", "dump_config",
           "build_domain", "build_coeffs", "build_problem", "KINDS"]

KINDS = ("simulate", "bsde", "ergodic", "asymptotics", "control",
         "oracle", "coupling", "penalization")


@dataclass
class RunConfig:
    kind: str
    name: str
    seed: int = 0
    domain: dict = field(default_factory=dict)
    problem: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PreconditionError(
                f"unknown experiment kind {self.kind!r}; expected one of "
                + ", ".join(KINDS))
        if not self.name:
            raise PreconditionError("config needs a non-empty name")
        self.seed = int(self.seed)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "seed": self.seed,
                "domain": dict(self.domain), "problem": dict(self.problem),
                "params": dict(self.params)}


_SCALARS = (str, bool, int, float)


def _check_values(section: str, data: dict) -> dict:
    out = {}
    for k, v in data.items():
        if isinstance(v, _SCALARS):
            out[k] = v
        elif isinstance(v, list) and all(isinstance(e, _SCALARS) for e in v):
            out[k] = list(v)
        else:
            raise PreconditionError(
                f"config [{section}] {k}: only scalars and flat lists "
                f"are allowed, got {type(v).__name__}")
    return out


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise PreconditionError(f"config is not valid TOML: {exc}") from exc
    for key in ("kind", "name"):
        if key not in raw:
            raise PreconditionError(f"config is missing the {key!r} key")
    known = {"kind", "name", "seed", "domain", "problem", "params"}
    extra = set(raw) - known
    if extra:
        raise PreconditionError(f"unknown config keys: {sorted(extra)}")
    return RunConfig(
        kind=str(raw["kind"]),
        name=str(raw["name"]),
        seed=raw.get("seed", 0),
        domain=_check_values("domain", raw.get("domain", {})),
        problem=_check_values("problem", raw.get("problem", {})),
        params=_check_values("params", raw.get("params", {})),
    )


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config(Path(path).read_text())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(e) for e in v) + "]"
    raise PreconditionError(f"cannot serialize {type(v).__name__}")


def dump_config(cfg: RunConfig) -> str:
    """Canonical TOML text: top-level scalars, then the three sections
    with sorted keys. parse_config(dump_config(c)) reproduces c."""
    lines = [f"kind = {_toml_value(cfg.kind)}",
             f"name = {_toml_value(cfg.name)}",
             f"seed = {_toml_value(cfg.seed)}"]
    for section in ("domain", "problem", "params"):
        data = getattr(cfg, section)
        if not data:
            continue
        lines.append("")
        lines.append(f"[{section}]")
        for k in sorted(data):
            lines.append(f"{k} = {_toml_value(data[k])}")
    return "\n".join(lines) + "\n"


def build_domain(cfg: RunConfig):
    spec = dict(cfg.domain)
    kind = spec.pop("type", "interval")
    return make_domain(kind, **spec)


def build_coeffs(cfg: RunConfig) -> SdeCoefficients:
    dom = build_domain(cfg) if cfg.domain.get("type", "interval") != "none" \
        else None
    p = cfg.problem
    drift = drift_field(str(p.get("drift", "zero")))
    sigma = p.get("sigma", 1.0)
    dim = dom.dim if dom is not None else int(p.get("dim", 1))
    return SdeCoefficients(drift, sigma, dom, dim)


def build_problem(cfg: RunConfig) -> NeumannProblem:
    coeffs = build_coeffs(cfg)
    if coeffs.domain is None:
        raise PreconditionError("this experiment needs a bounded domain")
    p = cfg.problem
    return NeumannProblem(
        coeffs=coeffs,
        driver=driver(str(p.get("driver", "zero"))),
        boundary_g=scalar_field(str(p.get("boundary_g", "constant:1"))),
        terminal_h=scalar_field(str(p.get("terminal_h", "zero"))),
    )
