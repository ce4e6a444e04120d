"""Pinned reference runs that future code must reproduce bit for bit.

One golden per experiment: a small manifest plus the summary.json and
long.csv bytes it produced.  Goldens store summary statistics, never
per-replicate tables, so they stay small and diff cleanly.  A check
reruns the manifest (serially or on a process pool; both must match)
and compares bytes; on mismatch it names the first divergent field.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .config import (
    LatticeRun,
    MomentsRun,
    PicardRun,
    PipelineRun,
    RunConfig,
    Sde1dRun,
    SplittingRun,
)
from .runner import RunOutput, render_long, render_summary, run_experiment

__all__ = [
    "GOLDEN_CONFIGS",
    "GoldenCheck",
    "default_golden_dir",
    "golden_check",
    "write_goldens",
]

# deliberately small: a check should run in seconds, and the pipeline
# golden uses a hand-lowered start exponent so all three stages fire
GOLDEN_CONFIGS: dict[str, RunConfig] = {
    "sde1d": Sde1dRun(
        experiment="sde1d", seed=7, reps=256,
        drift="quadratic", x0=512.0, dt=1e-4, horizon=0.1, xmax=1e6,
    ),
    "lattice": LatticeRun(
        experiment="lattice", seed=7, reps=128,
        profile="const:1", drift="quadratic", J_ladder=(1.0, 2.0, 4.0),
        T=0.125, dt=1.0 / 256.0, window=6, probes=(0, 1), walk="srw",
    ),
    "splitting": SplittingRun(
        experiment="splitting", seed=7, reps=64,
        n_ladder=(8, 16), J=4.0, drift="quadratic", profile="spike:4@0",
        T=0.125, dt=1.0 / 256.0, window=12, probes=(0,), walk="srw",
        dom_M=16.0, dom_J=64.0, dom_delta=0.125,
    ),
    "picard": PicardRun(
        experiment="picard", seed=7, reps=500,
        beta=16.0, iters=3, t=0.25, time_grid=1.0 / 128.0,
        sites=(0, 1), walk="srw",
    ),
    "moments": MomentsRun(
        experiment="moments", seed=7, reps=1024, k=2, t=0.25,
        walk="srw", chunk=512,
    ),
    "pipeline": PipelineRun(
        experiment="pipeline", seed=7, reps=64,
        delta=0.1, L=0.25, drift="quadratic", walk="srw", window=8,
        start_exponent=0, dt=1e-3,
    ),
}


def default_golden_dir() -> str:
    """goldens/ beside the package sources (editable-install layout)."""
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(here))), "goldens")


@dataclass
class GoldenCheck:
    """Outcome of one golden comparison."""

    name: str
    ok: bool
    mismatches: list[str] = field(default_factory=list)


def _render(out: RunOutput) -> dict[str, str]:
    return {"summary.json": render_summary(out), "long.csv": render_long(out)}


def _first_json_divergence(a, b, path: str = "$"):
    """Path of the first differing field under sorted-key traversal."""
    if type(a) is not type(b):
        return path
    if isinstance(a, dict):
        for k in sorted(set(a) | set(b)):
            if k not in a or k not in b:
                return f"{path}.{k}"
            hit = _first_json_divergence(a[k], b[k], f"{path}.{k}")
            if hit:
                return hit
        return None
    if isinstance(a, list):
        for i in range(max(len(a), len(b))):
            if i >= len(a) or i >= len(b):
                return f"{path}[{i}]"
            hit = _first_json_divergence(a[i], b[i], f"{path}[{i}]")
            if hit:
                return hit
        return None
    return None if a == b else path


def _first_csv_divergence(a: str, b: str):
    rows_a, rows_b = a.splitlines(), b.splitlines()
    header = rows_a[0].split(",") if rows_a else []
    for i in range(max(len(rows_a), len(rows_b))):
        if i >= len(rows_a) or i >= len(rows_b):
            return f"line {i + 1} (present on one side only)"
        if rows_a[i] != rows_b[i]:
            cells_a, cells_b = rows_a[i].split(","), rows_b[i].split(",")
            for j in range(max(len(cells_a), len(cells_b))):
                va = cells_a[j] if j < len(cells_a) else "<missing>"
                vb = cells_b[j] if j < len(cells_b) else "<missing>"
                if va != vb:
                    col = header[j] if j < len(header) else f"col{j}"
                    return f"line {i + 1}, column {col}: {vb!r} != {va!r}"
    return None


def write_goldens(golden_dir: str | None = None, names=None) -> list[str]:
    """Run and store the golden manifests; returns the directories."""
    root = default_golden_dir() if golden_dir is None else golden_dir
    written = []
    for name in names or sorted(GOLDEN_CONFIGS):
        out = run_experiment(GOLDEN_CONFIGS[name])
        d = os.path.join(root, name)
        os.makedirs(d, exist_ok=True)
        rendered = _render(out)
        for fname, text in rendered.items():
            with open(os.path.join(d, fname), "w") as fh:
                fh.write(text)
        written.append(d)
    return written


def golden_check(
    name: str, golden_dir: str | None = None, *, workers: int = 0
) -> GoldenCheck:
    """Rerun one golden manifest and compare bytes against the store.

    The first divergent field of each differing file is reported:
    summary.json by JSON path, long.csv by line and column.
    """
    if name not in GOLDEN_CONFIGS:
        raise KeyError(
            f"unknown golden {name!r}; have {sorted(GOLDEN_CONFIGS)}"
        )
    root = default_golden_dir() if golden_dir is None else golden_dir
    d = os.path.join(root, name)
    rendered = _render(run_experiment(GOLDEN_CONFIGS[name], workers=workers))
    mismatches = []
    for fname, text in rendered.items():
        path = os.path.join(d, fname)
        if not os.path.exists(path):
            mismatches.append(f"{fname}: missing from the golden store")
            continue
        with open(path) as fh:
            stored = fh.read()
        if stored == text:
            continue
        if fname == "summary.json":
            hit = _first_json_divergence(json.loads(stored), json.loads(text))
            mismatches.append(f"summary.json: first divergent field {hit}")
        else:
            hit = _first_csv_divergence(stored, text)
            mismatches.append(f"long.csv: {hit}")
    return GoldenCheck(name=name, ok=not mismatches, mismatches=mismatches)
