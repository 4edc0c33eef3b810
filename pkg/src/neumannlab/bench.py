"""The shipped benchmark suite: small deterministic configs covering
every experiment kind, with expectations against closed-form or frozen
oracle values. `lab bench` runs them all and collates the report.

The suite doubles as the determinism fixture: running it twice with the
same master seed must reproduce every CSV byte for byte.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .config import parse_config
from .runner import default_output_root, emit_report, run_experiment

__all__ = ["bench_configs", "run_bench"]


def bench_configs() -> list:
    """(name, text) pairs of the shipped configs, in run order."""
    pkg = resources.files(__package__) / "bench_configs"
    out = []
    for entry in sorted(pkg.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".toml"):
            out.append((entry.name, entry.read_text()))
    return out


def run_bench(output_root: Optional[Union[str, Path]] = None,
              seed: Optional[int] = None, echo=print) -> int:
    """Run the suite; returns the worst exit status (0 ok, 3 if any run
    hit a numerical failure). seed overrides every config's seed."""
    root = Path(output_root) if output_root is not None \
        else default_output_root() / "bench"
    worst = 0
    for fname, text in bench_configs():
        cfg = parse_config(text)
        if seed is not None:
            cfg.seed = int(seed)
        result = run_experiment(cfg, root)
        worst = max(worst, result.status)
        ok = result.summary.get("all_pass")
        tag = "ok" if result.status == 0 else f"status {result.status}"
        if ok is False:
            tag = "CHECK FAILED"
        echo(f"{fname:32s} -> {result.out_dir}  [{tag}]")
    text, _rows, _status = emit_report(root)
    echo("")
    echo(text)
    return worst
