"""Declarative run manifests for every experiment the CLI can launch.

A manifest is one experiment id plus the module parameters its CLI
flags expose, a seed, a replicate count, and an optional output
directory.  Manifests are strict: unknown fields are rejected, and a
manifest round-trips through JSON losslessly.  On disk they live as
TOML (the human-written input) or JSON (the machine-written echo);
``load_config`` dispatches on the file suffix.

Results are pure functions of (manifest, seed), so two equal manifests
always reproduce each other's outputs byte for byte; the runner and the
golden store both lean on that.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..drift import registered_drifts
from ..kernel import registered_walks

__all__ = [
    "Sde1dRun",
    "LatticeRun",
    "SplittingRun",
    "PicardRun",
    "MomentsRun",
    "PipelineRun",
    "RunConfig",
    "parse_config",
    "config_to_json",
    "load_config",
]


class _Manifest(BaseModel):
    """Common trunk: strict fields, seed, replicate count, output dir."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    reps: int = Field(default=1000, ge=1)
    out_dir: str | None = None

    @field_validator("seed")
    @classmethod
    def _seed_range(cls, v: int) -> int:
        if not 0 <= v < 2**63:
            raise ValueError("seed must lie in [0, 2^63)")
        return v


def _known_drift(name: str) -> str:
    if name not in registered_drifts():
        raise ValueError(f"unknown drift {name!r}; registered: {registered_drifts()}")
    return name


def _known_walk(name: str) -> str:
    if name not in registered_walks():
        raise ValueError(f"unknown walk {name!r}; registered: {registered_walks()}")
    return name


class Sde1dRun(_Manifest):
    """One-site explosion run: frequency of hitting the escape level."""

    experiment: Literal["sde1d"] = "sde1d"
    drift: str = "quadratic"
    x0: float = Field(default=512.0, gt=0.0)
    dt: float = Field(default=1e-4, gt=0.0)
    horizon: float = Field(default=0.1, gt=0.0)
    xmax: float = Field(default=1e6, gt=0.0)
    J: float | None = Field(default=None, gt=0.0, description="drift cap; None = uncapped")
    n0: int = Field(default=1, ge=1, description="slowdown divisor on the drift")

    _drift = field_validator("drift")(_known_drift)


class LatticeRun(_Manifest):
    """Truncation ladder on the lattice: probe values per (J, site)."""

    experiment: Literal["lattice"] = "lattice"
    profile: str = "const:1"
    drift: str = "quadratic"
    J_ladder: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    T: float = Field(default=0.25, gt=0.0)
    dt: float = Field(default=1.0 / 512.0, gt=0.0)
    window: int = Field(default=12, ge=1)
    probes: tuple[int, ...] = (0,)
    walk: str = "srw"
    mode: Literal["extend", "absorb"] = "extend"

    _drift = field_validator("drift")(_known_drift)
    _walk = field_validator("walk")(_known_walk)

    @field_validator("J_ladder")
    @classmethod
    def _ladder_increasing(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("J_ladder must be nonempty and strictly increasing")
        if v[0] < 0.0:
            raise ValueError("J_ladder entries must be >= 0")
        return v


class SplittingRun(_Manifest):
    """Alternating-vs-direct gaps per resolution, plus domination flags."""

    experiment: Literal["splitting"] = "splitting"
    n_ladder: tuple[int, ...] = (4, 8, 16, 32)
    J: float = Field(default=4.0, ge=0.0)
    drift: str = "quadratic"
    profile: str = "const:1"
    T: float = Field(default=0.25, gt=0.0)
    dt: float = Field(default=1.0 / 512.0, gt=0.0)
    window: int = Field(default=12, ge=1)
    probes: tuple[int, ...] = (0,)
    walk: str = "srw"
    mode: Literal["extend", "absorb"] = "extend"
    dom_M: float | None = Field(
        default=16.0, gt=0.0,
        description="spike height for the domination check; None skips it",
    )
    dom_J: float = Field(default=64.0, gt=0.0)
    dom_delta: float = Field(default=0.125, gt=0.0)

    _drift = field_validator("drift")(_known_drift)
    _walk = field_validator("walk")(_known_walk)

    @field_validator("n_ladder")
    @classmethod
    def _ladder_increasing(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("n_ladder must be nonempty and strictly increasing")
        if v[0] < 1:
            raise ValueError("n_ladder entries must be >= 1")
        return v


class PicardRun(_Manifest):
    """Localized iterate build: per-site values at the final depth."""

    experiment: Literal["picard"] = "picard"
    beta: float = Field(default=16.0, gt=0.0)
    iters: int = Field(default=4, ge=1)
    t: float = Field(default=0.25, gt=0.0, le=1.0)
    time_grid: float = Field(default=1.0 / 128.0, gt=0.0)
    sites: tuple[int, ...] = (0,)
    walk: str = "srw"

    _walk = field_validator("walk")(_known_walk)

    @field_validator("sites")
    @classmethod
    def _nonempty(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v:
            raise ValueError("sites must be nonempty")
        return v


class MomentsRun(_Manifest):
    """Exact-jump collision oracle for the k-th driftless moment."""

    experiment: Literal["moments"] = "moments"
    k: int = Field(default=2, ge=1, le=4)
    t: float = Field(default=0.25, gt=0.0)
    walk: str = "srw"
    chunk: int = Field(
        default=4096, ge=1,
        description="replicates per sampling chunk; part of the experiment "
        "definition, because each chunk draws from its own derived seed",
    )

    _walk = field_validator("walk")(_known_walk)


class PipelineRun(_Manifest):
    """Three-stage chained blowup experiment."""

    experiment: Literal["pipeline"] = "pipeline"
    delta: float = Field(default=0.1, gt=0.0)
    L: float = Field(default=10.0, gt=0.0)
    drift: str = "quadratic"
    walk: str = "srw"
    window: int = Field(default=64, ge=1)
    epsilon: float | None = Field(default=None, gt=0.0, lt=1.0)
    start_exponent: int | None = None
    dt: float = Field(default=1e-3, gt=0.0)
    mode: Literal["extend", "absorb"] = "extend"
    spike_budget: float = Field(default=1e6, gt=0.0)
    reps: int = Field(default=200, ge=1)

    _drift = field_validator("drift")(_known_drift)
    _walk = field_validator("walk")(_known_walk)


RunConfig = Union[
    Sde1dRun, LatticeRun, SplittingRun, PicardRun, MomentsRun, PipelineRun
]


def parse_config(data: dict[str, Any]) -> RunConfig:
    """Validate a mapping into the manifest its ``experiment`` id names."""
    if not isinstance(data, dict):
        raise TypeError("config data must be a mapping")
    exp = data.get("experiment")
    kinds = {
        "sde1d": Sde1dRun,
        "lattice": LatticeRun,
        "splitting": SplittingRun,
        "picard": PicardRun,
        "moments": MomentsRun,
        "pipeline": PipelineRun,
    }
    if exp not in kinds:
        raise ValueError(
            f"experiment must be one of {sorted(kinds)}, got {exp!r}"
        )
    return kinds[exp].model_validate(data)


def config_to_json(cfg: RunConfig) -> str:
    """Canonical JSON for a manifest (sorted keys, lossless round-trip)."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True)


def load_config(path: str | Path) -> RunConfig:
    """Read a manifest from a .toml or .json file."""
    p = Path(path)
    raw = p.read_bytes()
    if p.suffix == ".toml":
        import tomli

        data = tomli.loads(raw.decode("utf-8"))
    elif p.suffix == ".json":
        data = json.loads(raw.decode("utf-8"))
    else:
        raise ValueError(f"config files are .toml or .json, got {p.suffix!r}")
    return parse_config(data)
