"""Batch experiment runner: dispatch a RunConfig, write CSV artifacts,
a flat summary.json, and a manifest with artifact hashes.

Determinism contract: every float lands in a CSV via repr, summaries
are JSON with sorted keys, no timestamps or machine identifiers are
recorded, and all randomness flows through the config seed. Rerunning
the same config therefore reproduces every artifact byte for byte.

Configs may declare expectations in [params]: a pair expect_<key> /
tol_<key> turns into a pass/fail check against the summary value of
<key>. Kind-specific boolean diagnostics are appended as checks too.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import asymptotics, control, ebsde, pde_oracle, sde
from .bsde import SolverConfig, direct_estimator, solve_finite_horizon
from .config import (RunConfig, build_coeffs, build_problem, dump_config,
                     load_config)
from .errors import NumericalFailure, PreconditionError
from .fields import scalar_field
from .geometry import as_points

__all__ = ["RunResult", "run_experiment", "emit_report",
           "default_output_root", "OUTPUT_ROOT_ENV"]

OUTPUT_ROOT_ENV = "LAB_OUTPUT_ROOT"


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "lab_runs"))


@dataclass
class RunResult:
    status: int                # 0 ok, 3 numerical failure
    out_dir: Path
    summary: dict
    artifacts: dict            # name -> sha256 hex


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _jsonable(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(e) for e in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(e) for e in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(e) for k, e in v.items()}
    if isinstance(v, str) or v is None:
        return v
    return repr(v)


def _floats(params: dict, key: str, default=None):
    if key not in params:
        return default
    return [float(v) for v in params[key]]


def _solver_config(params: dict, seed: int) -> SolverConfig:
    kw = {"seed": seed}
    for k, cast in (("n_paths", int), ("n_steps", int), ("substeps", int),
                    ("basis_degree", int), ("picard_iters", int),
                    ("z_cap", float), ("basis_family", str)):
        if k in params:
            kw[k] = cast(params[k])
    return SolverConfig(**kw)


# ----------------------------------------------------------------------
# per-kind dispatchers: each returns (tables, summary, status)
# tables: {filename: (header, rows)}


def _run_simulate(cfg: RunConfig):
    p = cfg.params
    coeffs = build_coeffs(cfg)
    T = float(p.get("T", 1.0))
    n_paths = int(p.get("n_paths", 2000))
    n_steps = int(p["n_steps"]) if "n_steps" in p else None
    x0 = float(p.get("x0", 0.0))
    scheme = str(p.get("scheme", "reflected"))
    pmom = int(p.get("moment_p", 2))
    if scheme == "reflected":
        bundle = sde.simulate_reflected(coeffs, x0, T, n_steps=n_steps,
                                        n_paths=n_paths, seed=cfg.seed)
    elif scheme == "penalized":
        bundle = sde.simulate_penalized(coeffs, int(p.get("n_pen", 32)), x0,
                                        T, n_steps=n_steps, n_paths=n_paths,
                                        seed=cfg.seed)
    elif scheme == "free":
        bundle = sde.simulate_free(coeffs.drift, coeffs.sigma, x0, T,
                                   dim=coeffs.dim, n_steps=n_steps,
                                   n_paths=n_paths, seed=cfg.seed)
    else:
        raise PreconditionError(f"unknown scheme {scheme!r}")
    est = sde.moment_estimate(bundle, pmom, stride=int(p.get("stride", 10)))
    rows = [tuple(r) for r in est.table]
    summary = {"scheme": scheme, "moment_p": pmom, "moment_max": est.value,
               "moment_max_se": est.se, "moment_t_at_max": est.t_at_max,
               "moment_final": float(est.table[-1, 1]),
               "moment_final_se": float(est.table[-1, 2]),
               "mean_local_time": float(bundle.local_time[:, -1].mean())}
    checks = []
    if coeffs.domain is not None and scheme != "free":
        cap = coeffs.domain.diameter() ** pmom
        checks.append({"name": "moment_within_diameter",
                       "value": est.value, "target": cap, "tol": 0.0,
                       "pass": bool(est.value <= cap)})
    return {"moments.csv": (("t", "moment", "se"), rows)}, summary, checks, 0


def _run_bsde(cfg: RunConfig):
    p = cfg.params
    problem = build_problem(cfg)
    T = float(p.get("T", 1.0))
    surface = bool(p.get("surface", False))
    conf = _solver_config(p, cfg.seed)
    x0 = None if surface else float(p.get("x0", 0.0))
    sol = solve_finite_horizon(problem, T, x0=x0, config=conf,
                               surface=surface,
                               discount_alpha=float(p.get("discount_alpha", 0.0)))
    summary = {"T": T, "y0": sol.y0, "y0_se": sol.y0_se,
               "surface": surface, "flags": _jsonable(sol.flags),
               "mean_local_time": sol.diagnostics["mean_total_local_time"]}
    tables = {}
    grid = _floats(p, "x_grid")
    if grid is not None:
        from .bsde import evaluate_u
        vals, ses = evaluate_u(sol, np.asarray(grid)[:, None],
                               problem.coeffs.domain)
        tables["solution.csv"] = (("x", "u", "se"),
                                  list(zip(grid, vals, ses)))
    if bool(p.get("with_direct", False)) and not problem.driver.depends_on_z:
        de = direct_estimator(problem, T, float(p.get("x0", 0.0)),
                              n_paths=conf.n_paths,
                              seed=cfg.seed + 1)
        summary["direct_value"] = de.value
        summary["direct_se"] = de.se
    status = 3 if (sol.flags.get("y0_bound_violated")
                   or sol.flags.get("z_cap_exceeded")) else 0
    return tables, summary, [], status


def _run_oracle(cfg: RunConfig):
    p = cfg.params
    problem = build_problem(cfg)
    T = float(p.get("T", 2.0))
    nodes = int(p.get("n_nodes", pde_oracle.DEFAULT_NODES))
    dt = float(p.get("dt", pde_oracle.DEFAULT_DT))
    sol = pde_oracle.solve_parabolic_fd(problem, T, n_nodes=nodes, dt=dt)
    rows = list(zip(sol.x, sol.u[-1]))
    tables = {"u_field.csv": (("x", "u"), rows)}
    summary = {"T": T, "dt_used": sol.dt_used, "halvings": sol.halvings}
    probes = _floats(p, "probe_x", [0.0])
    for j, xq in enumerate(probes):
        summary[f"u_x{j}"] = sol.value(T, xq)
    if bool(p.get("ergodic", False)):
        erg = pde_oracle.solve_ergodic_fd(problem, n_nodes=nodes, dt=dt,
                                          t_max=float(p.get("t_max", 60.0)))
        summary["lambda"] = erg.lambda_
        summary["probe_spread"] = erg.probe_spread
        summary["t_reached"] = erg.t_reached
        tables["v_profile.csv"] = (("x", "v"),
                                   list(zip(erg.v.x, erg.v.values)))
    return tables, summary, [], 0


def _run_ergodic(cfg: RunConfig):
    p = cfg.params
    problem = build_problem(cfg)
    conf = _solver_config(p, cfg.seed)
    kwargs = {}
    if "alphas" in p:
        kwargs["alphas"] = tuple(_floats(p, "alphas"))
    if "T_pair" in p:
        kwargs["T_pair"] = tuple(_floats(p, "T_pair"))
    if "profile_n_paths" in p:
        kwargs["profile_config"] = dataclasses.replace(
            conf, n_paths=int(p["profile_n_paths"]))
    sol = ebsde.solve_ergodic(problem, method=str(p.get("method", "differencing")),
                              config=conf,
                              replicates=int(p.get("replicates", 1)),
                              **kwargs)
    tables = {"v_profile.csv": (("x", "v"), list(zip(sol.x, sol.v)))}
    summary = {"lambda": sol.lambda_, "lambda_se": sol.lambda_se,
               "method": sol.method,
               "lipschitz_probe": sol.lipschitz_probe}
    return tables, summary, [], 0


def _ergodic_reference(problem, p):
    erg = pde_oracle.solve_ergodic_fd(problem,
                                      n_nodes=int(p.get("n_nodes", 400)),
                                      dt=float(p.get("dt", 1e-3)))
    x = np.asarray(erg.v.x)
    v = np.asarray(erg.v.values)
    return ebsde.ErgodicSolution(erg.lambda_, 0.0, x, v, "fd", {})


def _run_asymptotics(cfg: RunConfig):
    p = cfg.params
    problem = build_problem(cfg)
    T_grid = _floats(p, "T_grid", [0.5, 1.0, 1.5, 2.0, 2.5])
    x_grid = _floats(p, "x_grid", [-0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75])
    source = str(p.get("source", "fd"))
    sources = ("fd", "bsde") if source == "both" else (source,)
    ergodic = _ergodic_reference(problem, p)
    conf = _solver_config(p, cfg.seed)
    rows = []
    summary = {"lambda_hat": ergodic.lambda_}
    for src in sources:
        rep = asymptotics.renormalized_profile(
            problem, T_grid, x_grid, ergodic, source=src, config=conf,
            replicates=int(p.get("replicates", 1)),
            oracle_nodes=int(p.get("n_nodes", 400)),
            oracle_dt=float(p.get("dt", 1e-3)))
        asymptotics.fit_limit_and_rate(rep,
                                       burn_in=float(p.get("burn_in", 0.5)))
        for i, T in enumerate(rep.T_grid):
            for j, xq in enumerate(rep.x_grid):
                rows.append((src, T, xq, rep.u[i, j], rep.u_se[i, j],
                             rep.w[i, j], rep.spreads[i]))
        summary[f"L_hat_{src}"] = rep.L_hat
        summary[f"eta_hat_{src}"] = rep.eta_hat
        summary[f"fit_{src}"] = _jsonable(rep.fit)
        summary[f"bounded_{src}"] = bool(rep.bounded)
    tables = {"profile.csv": (("source", "T", "x", "u", "u_se", "w",
                               "spread"), rows)}
    if len(sources) == 1:
        summary["L_hat"] = summary[f"L_hat_{sources[0]}"]
        summary["eta_hat"] = summary[f"eta_hat_{sources[0]}"]
    return tables, summary, [], 0


def _build_control_problem(cfg: RunConfig) -> control.ControlProblem:
    p = cfg.params
    coeffs = build_coeffs(cfg)
    labels = tuple(str(s) for s in p.get("controls", ["-1", "+1"]))
    r_flat = _floats(p, "R", [-1.0, 1.0])
    d = coeffs.dim
    R = np.asarray(r_flat, dtype=float).reshape(len(labels), d)
    costs = tuple(scalar_field(str(s))
                  for s in p.get("costs", ["zero"] * len(labels)))
    prob = cfg.problem
    return control.ControlProblem(
        coeffs, labels, R, costs,
        boundary_g=scalar_field(str(prob.get("boundary_g", "constant:1"))),
        terminal_h0=scalar_field(str(prob.get("terminal_h", "zero"))))


def _control_policy(cp, spec: str, hp, T: float, p: dict):
    if spec.startswith("constant:"):
        return control.ConstantPolicy(int(spec.split(":", 1)[1]))
    if spec in ("fd_gradient", "anti"):
        n_snap = int(p.get("policy_snapshots", max(2, int(40 * T) + 1)))
        fd = pde_oracle.solve_parabolic_fd(
            hp, T, snapshot_times=np.linspace(0.0, T, n_snap))
        sign = -1.0 if spec == "anti" else 1.0
        return control.GradientFeedbackPolicy.from_parabolic(cp, fd, T, sign)
    raise PreconditionError(f"unknown policy {spec!r}")


def _run_control(cfg: RunConfig):
    p = cfg.params
    cp = _build_control_problem(cfg)
    hp = control.hamiltonian_problem(cp)
    sub = str(p.get("sub", "finite"))
    x0 = float(p.get("x0", 0.0))
    n_paths = int(p.get("n_paths", 2000))
    checks = []
    if sub == "finite":
        T = float(p.get("T", 1.0))
        n_steps = int(p["n_steps"]) if "n_steps" in p else None
        pol = _control_policy(cp, str(p.get("policy", "fd_gradient")),
                              hp, T, p)
        est = control.finite_cost(cp, pol, T, x0, n_paths, n_steps,
                                  seed=cfg.seed,
                                  mode=str(p.get("mode", "controlled")))
        summary = {"sub": sub, "T": T, "J": est.value, "J_se": est.se,
                   "mean_local_time": est.mean_local_time,
                   "mode": est.mode}
        if bool(p.get("compare_fd", True)):
            fd = pde_oracle.solve_parabolic_fd(hp, T)
            summary["fd_u"] = fd.value(T, x0)
            summary["J_minus_fd_u"] = est.value - summary["fd_u"]
        rows = [(T, est.value, est.se)]
        return {"costs.csv": (("T", "J", "se"), rows)}, summary, checks, 0
    if sub == "ergodic":
        T_max = float(p.get("T_max", 20.0))
        n_steps = int(p["n_steps"]) if "n_steps" in p else None
        pol = _control_policy(cp, str(p.get("policy", "fd_gradient")),
                              hp, T_max, p)
        est = control.ergodic_cost(cp, pol, T_max, x0, n_paths, n_steps,
                                   seed=cfg.seed)
        erg = pde_oracle.solve_ergodic_fd(hp)
        summary = {"sub": sub, "T_max": T_max, "J_avg": est.value,
                   "J_avg_se": est.se, "tail_average": est.tail_average,
                   "lambda_fd": erg.lambda_,
                   "gap_to_lambda": est.value - erg.lambda_}
        rows = [(T_max, est.value, est.se)]
        return {"costs.csv": (("T", "J_avg", "se"), rows)}, summary, checks, 0
    if sub == "expansion":
        T_grid = _floats(p, "T_grid", [2.0, 4.0, 8.0])
        erg = pde_oracle.solve_ergodic_fd(hp)
        ergsol = ebsde.ErgodicSolution(erg.lambda_, 0.0, np.asarray(erg.v.x),
                                       np.asarray(erg.v.values), "fd", {})
        rep = asymptotics.renormalized_profile(
            hp, _floats(p, "fit_T_grid", [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0]),
            [-0.5, 0.0, 0.5], ergsol, source="fd")
        asymptotics.fit_limit_and_rate(rep)
        pols = {T: _control_policy(cp, "fd_gradient", hp, T, p)
                for T in T_grid}
        steps = {T: int(s) for T, s in zip(
            T_grid, p["n_steps_per_T"])} if "n_steps_per_T" in p else None
        out = control.verify_expansion(
            cp, T_grid, x0, erg.lambda_, float(ergsol.v_at(np.array([x0]))[0]),
            rep.L_hat, pols, n_paths=n_paths, n_steps_per_T=steps,
            seed=cfg.seed)
        rows = [(r["T"], r["J"], r["se"], r["centered"], r["gap_to_L"])
                for r in out["rows"]]
        gaps = [abs(r["gap_to_L"]) for r in out["rows"]]
        summary = {"sub": sub, "lambda_hat": erg.lambda_, "L_hat": rep.L_hat,
                   "eta_hat": rep.eta_hat, "max_abs_gap": max(gaps),
                   "rows": _jsonable(out["rows"])}
        return {"costs.csv": (("T", "J", "se", "centered", "gap_to_L"),
                              rows)}, summary, checks, 0
    raise PreconditionError(f"unknown control sub-experiment {sub!r}")


def _run_coupling(cfg: RunConfig):
    p = cfg.params
    coeffs = build_coeffs(cfg)
    t_grid = _floats(p, "t_grid", [0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
    phi = scalar_field(str(p.get("phi", "indicator_pos")))
    rep = sde.coupling_gap(coeffs.drift, coeffs.sigma,
                           float(p.get("x", 1.0)), float(p.get("y", -1.0)),
                           phi, t_grid, dim=coeffs.dim,
                           n_paths=int(p.get("n_paths", 20000)),
                           seed=cfg.seed)
    rows = list(zip(rep.t_grid, rep.gaps, rep.ses))
    summary = {"rate": rep.rate, "rate_window": list(rep.rate_window)}
    for i, t in enumerate(rep.t_grid):
        if abs(t - 1.0) < 1e-9:
            summary["gap_t1"] = float(rep.gaps[i])
            summary["gap_t1_se"] = float(rep.ses[i])
    return {"gaps.csv": (("t", "gap", "se"), rows)}, summary, [], 0


def _run_penalization(cfg: RunConfig):
    p = cfg.params
    coeffs = build_coeffs(cfg)
    if coeffs.domain is None:
        raise PreconditionError("penalization needs a bounded domain")
    T = float(p.get("T", 1.0))
    n_paths = int(p.get("n_paths", 2000))
    n_steps = int(p["n_steps"]) if "n_steps" in p else None
    x0 = float(p.get("x0", 0.0))
    n_list = [int(n) for n in p.get("n_list", [8, 16, 32, 64, 128])]
    ref = sde.simulate_reflected(coeffs, x0, T, n_steps=n_steps,
                                 n_paths=n_paths, seed=cfg.seed)
    rows = []
    gaps = []
    for n_pen in n_list:
        pen = sde.simulate_penalized(coeffs, n_pen, x0, T, n_steps=n_steps,
                                     n_paths=n_paths, seed=cfg.seed)
        dist2 = ((pen.states - ref.states) ** 2).sum(axis=2)
        sup2 = dist2.max(axis=1)
        gap = float(sup2.mean())
        se = float(sup2.std(ddof=1) / np.sqrt(n_paths))
        rows.append((n_pen, gap, se))
        gaps.append((gap, se))
    decreasing = all(gaps[i + 1][0] < gaps[i][0] for i in range(len(gaps) - 1))
    inversions = sum(gaps[i + 1][0] >= gaps[i][0] for i in range(len(gaps) - 1))
    summary = {"T": T, "n_list": n_list,
               "gap_first": gaps[0][0], "gap_last": gaps[-1][0],
               "strictly_decreasing": bool(decreasing),
               "inversions": int(inversions)}
    checks = [{"name": "gaps_decrease", "value": float(inversions),
               "target": 0.0, "tol": 1.0,
               "pass": bool(inversions <= 1)}]
    return {"gaps.csv": (("n_pen", "gap", "se"), rows)}, summary, checks, 0


_DISPATCH = {
    "simulate": _run_simulate,
    "bsde": _run_bsde,
    "oracle": _run_oracle,
    "ergodic": _run_ergodic,
    "asymptotics": _run_asymptotics,
    "control": _run_control,
    "coupling": _run_coupling,
    "penalization": _run_penalization,
}


def _expectation_checks(cfg: RunConfig, summary: dict) -> list:
    checks = []
    for key in sorted(cfg.params):
        if not key.startswith("expect_"):
            continue
        name = key[len("expect_"):]
        target = float(cfg.params[key])
        tol = float(cfg.params.get(f"tol_{name}", 0.0))
        value = summary.get(name)
        if value is None or not isinstance(value, (int, float)):
            checks.append({"name": name, "value": None, "target": target,
                           "tol": tol, "pass": False})
            continue
        ok = abs(float(value) - target) <= tol
        checks.append({"name": name, "value": float(value), "target": target,
                       "tol": tol, "pass": bool(ok)})
    return checks


def run_experiment(config: Union[RunConfig, str, Path],
                   output_root: Optional[Union[str, Path]] = None) -> RunResult:
    """Execute one experiment; artifacts land in <root>/<name>/."""
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    root = Path(output_root) if output_root is not None \
        else default_output_root()
    out_dir = root / cfg.name
    out_dir.mkdir(parents=True, exist_ok=True)

    status = 0
    try:
        tables, summary, checks, status = _DISPATCH[cfg.kind](cfg)
    except NumericalFailure as exc:
        tables, summary, checks = {}, {"error": str(exc)}, []
        status = 3

    checks = checks + _expectation_checks(cfg, summary)
    if checks:
        summary["checks"] = checks
        summary["all_pass"] = bool(all(c["pass"] for c in checks))
    summary["kind"] = cfg.kind
    summary["name"] = cfg.name
    summary["status"] = status

    artifacts = {}
    for fname, (header, rows) in sorted(tables.items()):
        _write_csv(out_dir / fname, header, rows)
    (out_dir / "summary.json").write_text(
        json.dumps(_jsonable(summary), sort_keys=True, indent=2) + "\n")
    (out_dir / "config.toml").write_text(dump_config(cfg))
    for fname in sorted(list(tables) + ["summary.json", "config.toml"]):
        artifacts[fname] = hashlib.sha256(
            (out_dir / fname).read_bytes()).hexdigest()
    manifest = {"config": cfg.as_dict(), "artifacts": artifacts,
                "status": status}
    (out_dir / "manifest.json").write_text(
        json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n")
    return RunResult(status, out_dir, summary, artifacts)


def emit_report(results_dir: Union[str, Path]):
    """Collate manifests under a directory into a pass/fail table.

    Returns (text, csv_rows, status). Runs whose manifest exists but
    whose summary is missing or failed are marked incomplete. status 2
    when no manifest is found at all.
    """
    root = Path(results_dir)
    manifests = sorted(root.glob("*/manifest.json"))
    if (root / "manifest.json").exists():
        manifests.insert(0, root / "manifest.json")
    if not manifests:
        return f"no manifest found under {root}\n", [], 2

    rows = []
    lines = []
    any_fail = False
    for mpath in manifests:
        run_dir = mpath.parent
        name = run_dir.name
        spath = run_dir / "summary.json"
        if not spath.exists():
            rows.append((name, "summary", "", "", "", "incomplete"))
            lines.append(f"{name:32s} incomplete (no summary)")
            any_fail = True
            continue
        summary = json.loads(spath.read_text())
        status = summary.get("status", 0)
        if status != 0:
            rows.append((name, "run", "", "", "", "incomplete"))
            lines.append(f"{name:32s} incomplete (status {status}: "
                         f"{summary.get('error', 'flagged')})")
            any_fail = True
            continue
        for key in ("lambda", "lambda_hat", "L_hat", "eta_hat"):
            if key in summary and isinstance(summary[key], (int, float)):
                rows.append((name, key, summary[key], "", "", "value"))
        for c in summary.get("checks", []):
            verdict = "pass" if c["pass"] else "FAIL"
            any_fail |= not c["pass"]
            rows.append((name, c["name"],
                         "" if c["value"] is None else c["value"],
                         c["target"], c["tol"], verdict))
            val = "missing" if c["value"] is None else f"{c['value']:.6g}"
            lines.append(f"{name:32s} {c['name']:28s} {val:>12s} "
                         f"target {c['target']:.6g} +- {c['tol']:.3g}  "
                         f"{verdict}")
        if not summary.get("checks"):
            lines.append(f"{name:32s} ok (no declared checks)")
    if any_fail:
        lines.append("some checks failed or runs are incomplete")
    header = ("run", "check", "value", "target", "tol", "status")
    text = "\n".join(lines) + "\n"
    _write_csv(root / "report.csv", header, rows)
    (root / "report.txt").write_text(text)
    return text, rows, 0
