"""Chunked experiment execution with byte-stable outputs.

Every experiment runs as a fixed plan of replicate chunks.  The plan is
a pure function of the manifest, each chunk is a pure function of
(manifest, chunk bounds), and chunk tables are concatenated in plan
order, so a serial run and a process-pool run of the same manifest
produce identical bytes.  For most experiments the chunk size only sets
scheduling granularity, because per-replicate noise is keyed by the
global replicate index; collision sampling instead draws each chunk
from its own derived seed, so its chunk size lives in the manifest.

Files written per run:

* ``replicates.csv``  one row per replicate observation
* ``domination.csv``  splitting runs only, when a domination check is set
* ``summary.json``    manifest echo, pooled estimates, derived scalars
* ``long.csv``        tidy rows (experiment, parameter, value, stderr)

CSV column orders are fixed:

* sde1d       replicate, exploded, explosion_time
* lattice     replicate, J, probe, value
* splitting   replicate, n, probe, sq_gap
              domination: replicate, violated, checked_steps
* picard      replicate, site, iterate, value
* moments     replicate, collision_time, value
* pipeline    replicate, stage1, site, site_value, widened,
              target_level, capped, stage2, hit_time, stage3, success

Cells are written as repr() of the float (shortest round-trip), integer
columns as bare integers, flags as 0/1, and not-applicable values (a
relay site that was never found, the explosion time of a path that ran
to the horizon) as empty cells.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

from ..drift import find_growth_constants, get_drift
from ..kernel import get_walk
from ..lattice import InitialProfile, final_profiles
from ..moments import sample_collision_times
from ..noise import McEstimate, NoiseField
from ..picard import PicardConfig, build_iterates
from ..sde1d import simulate_batch
from ..splitting import AlternatingConfig, alternating_finals, domination_flags
from .config import (
    LatticeRun,
    MomentsRun,
    PicardRun,
    PipelineRun,
    RunConfig,
    Sde1dRun,
    SplittingRun,
    config_to_json,
    parse_config,
)
from .pipeline import (
    Stage1Exhausted,
    derive_constants,
    product_bound,
    run_blowup_pipeline,
)

__all__ = [
    "SCHEMA_VERSION",
    "RunOutput",
    "plan_chunks",
    "run_chunk",
    "run_experiment",
    "merge",
    "summary_dict",
    "render_summary",
    "render_long",
    "write_outputs",
]

SCHEMA_VERSION = 1

# scheduling granularity; moments chunks come from the manifest instead
_CHUNK = {
    "sde1d": 512,
    "lattice": 128,
    "splitting": 64,
    "picard": 500,
    "pipeline": 64,
}

_INT_COLS = frozenset(
    {
        "replicate", "probe", "n", "site", "iterate", "checked_steps",
        "exploded", "violated", "widened", "capped",
        "stage1", "stage2", "stage3", "success",
    }
)


@dataclass
class RunOutput:
    """Everything a finished run knows: raw tables and pooled numbers."""

    config: RunConfig
    tables: dict[str, dict[str, np.ndarray]]
    estimates: dict[str, McEstimate]
    derived: dict[str, Any]


def plan_chunks(cfg: RunConfig) -> list[tuple[int, int]]:
    """Replicate ranges [lo, hi) the run executes, in order."""
    size = cfg.chunk if isinstance(cfg, MomentsRun) else _CHUNK[cfg.experiment]
    return [(a, min(a + size, cfg.reps)) for a in range(0, cfg.reps, size)]


def _check_probes(probes, window: int) -> None:
    for p in probes:
        if abs(p) > window:
            raise ValueError(f"probe {p} lies outside the window {window}")


def _chunk_sde1d(cfg: Sde1dRun, lo: int, hi: int):
    drift = get_drift(cfg.drift)
    noise = NoiseField(seed=cfg.seed, dt=cfg.dt)
    seeds = noise.replicate_seed_range(lo, hi)
    res = simulate_batch(
        drift, cfg.x0, cfg.dt, cfg.horizon, noise, 0, seeds,
        up_level=cfg.xmax, J=math.inf if cfg.J is None else cfg.J, n0=cfg.n0,
    )
    return {
        "replicates": {
            "replicate": np.arange(lo, hi, dtype=np.int64),
            "exploded": res.stopped_up.astype(np.float64),
            "explosion_time": np.where(res.stopped_up, res.stop_time, np.nan),
        }
    }


def _chunk_lattice(cfg: LatticeRun, lo: int, hi: int):
    drift = get_drift(cfg.drift)
    walk = get_walk(cfg.walk)
    profile = InitialProfile.parse(cfg.profile)
    _check_probes(cfg.probes, cfg.window)
    noise = NoiseField(seed=cfg.seed, dt=cfg.dt)
    seeds = noise.replicate_seed_range(lo, hi)
    nrep, nj, nq = hi - lo, len(cfg.J_ladder), len(cfg.probes)
    vals = np.empty((nrep, nj, nq))
    for j, J in enumerate(cfg.J_ladder):
        finals = final_profiles(
            profile, drift, J, cfg.T, cfg.dt, noise, cfg.window, seeds,
            walk=walk, mode=cfg.mode,
        )
        for q, p in enumerate(cfg.probes):
            vals[:, j, q] = finals[p + cfg.window, :]
    return {
        "replicates": {
            "replicate": np.repeat(np.arange(lo, hi, dtype=np.int64), nj * nq),
            "J": np.tile(np.repeat(np.asarray(cfg.J_ladder, float), nq), nrep),
            "probe": np.tile(np.asarray(cfg.probes, np.int64), nrep * nj),
            "value": vals.reshape(-1),
        }
    }


def _chunk_splitting(cfg: SplittingRun, lo: int, hi: int):
    drift = get_drift(cfg.drift)
    walk = get_walk(cfg.walk)
    profile = InitialProfile.parse(cfg.profile)
    _check_probes(cfg.probes, cfg.window)
    noise = NoiseField(seed=cfg.seed, dt=cfg.dt)
    seeds = noise.replicate_seed_range(lo, hi)
    nrep, nn, nq = hi - lo, len(cfg.n_ladder), len(cfg.probes)
    direct = final_profiles(
        profile, drift, cfg.J, cfg.T, cfg.dt, noise, cfg.window, seeds,
        walk=walk, mode=cfg.mode,
    )
    gaps = np.empty((nrep, nn, nq))
    for i, n in enumerate(cfg.n_ladder):
        alt = alternating_finals(
            profile, drift, AlternatingConfig(n, cfg.J, inner_dt=cfg.dt),
            cfg.T, noise, cfg.window, seeds, walk=walk, mode=cfg.mode,
        )
        for q, p in enumerate(cfg.probes):
            row = p + cfg.window
            gaps[:, i, q] = (alt[row] - direct[row]) ** 2
    tables = {
        "replicates": {
            "replicate": np.repeat(np.arange(lo, hi, dtype=np.int64), nn * nq),
            "n": np.tile(np.repeat(np.asarray(cfg.n_ladder, np.int64), nq), nrep),
            "probe": np.tile(np.asarray(cfg.probes, np.int64), nrep * nn),
            "sq_gap": gaps.reshape(-1),
        }
    }
    if cfg.dom_M is not None:
        growth = find_growth_constants(drift, 4096.0)
        n_dom = max(cfg.n_ladder[0], growth.n0)
        viol, checked = domination_flags(
            cfg.dom_M, drift, growth, cfg.dom_J, n_dom, cfg.dom_delta,
            noise, cfg.window, seeds, walk=walk, mode=cfg.mode,
        )
        tables["domination"] = {
            "replicate": np.arange(lo, hi, dtype=np.int64),
            "violated": viol.astype(np.float64),
            "checked_steps": checked.astype(np.int64),
        }
    return tables


def _chunk_picard(cfg: PicardRun, lo: int, hi: int):
    walk = get_walk(cfg.walk)
    pcfg = PicardConfig(cfg.beta, cfg.iters, cfg.t, cfg.time_grid)
    noise = NoiseField(seed=cfg.seed, dt=cfg.time_grid)
    seeds = noise.replicate_seed_range(lo, hi)
    vals = build_iterates(pcfg, list(cfg.sites), noise, seeds, walk=walk)
    nrep, ns, ni = hi - lo, len(cfg.sites), cfg.iters + 1
    return {
        "replicates": {
            "replicate": np.repeat(np.arange(lo, hi, dtype=np.int64), ns * ni),
            "site": np.tile(np.repeat(np.asarray(cfg.sites, np.int64), ni), nrep),
            "iterate": np.tile(np.arange(ni, dtype=np.int64), nrep * ns),
            "value": vals.transpose(2, 1, 0).reshape(-1),
        }
    }


def _chunk_moments(cfg: MomentsRun, lo: int, hi: int):
    if lo % cfg.chunk or hi != min(lo + cfg.chunk, cfg.reps):
        raise ValueError(
            "moments chunks are pinned to the manifest chunk size "
            f"{cfg.chunk}; got [{lo}, {hi})"
        )
    index = lo // cfg.chunk
    child = int(
        NoiseField(seed=cfg.seed, dt=1.0).replicate_seed_range(index, index + 1)[0]
    )
    times = sample_collision_times(
        get_walk(cfg.walk), cfg.k, [cfg.t], hi - lo, seed=child
    )[:, 0]
    return {
        "replicates": {
            "replicate": np.arange(lo, hi, dtype=np.int64),
            "collision_time": times,
            "value": np.exp(times),
        }
    }


def _chunk_pipeline(cfg: PipelineRun, lo: int, hi: int):
    res = run_blowup_pipeline(
        cfg.delta, cfg.L, get_drift(cfg.drift), get_walk(cfg.walk),
        cfg.window, cfg.reps, cfg.seed,
        epsilon=cfg.epsilon, start_exponent=cfg.start_exponent,
        dt=cfg.dt, mode=cfg.mode, spike_budget=cfg.spike_budget,
        rep_range=(lo, hi),
    )
    rows = res.reports

    def tri(picker):  # None -> nan, else 0/1
        return np.array(
            [math.nan if picker(r) is None else float(picker(r)) for r in rows]
        )

    return {
        "replicates": {
            "replicate": np.array([r.rep for r in rows], dtype=np.int64),
            "stage1": np.array([float(r.stage1) for r in rows]),
            "site": np.array(
                [math.nan if r.site is None else float(r.site) for r in rows]
            ),
            "site_value": np.array([r.site_value for r in rows]),
            "widened": np.array([float(r.widened) for r in rows]),
            "target_level": np.array([r.target_level for r in rows]),
            "capped": np.array([float(r.capped) for r in rows]),
            "stage2": tri(lambda r: r.stage2),
            "hit_time": np.array([r.hit_time for r in rows]),
            "stage3": tri(lambda r: r.stage3),
            "success": np.array([float(r.success) for r in rows]),
        }
    }


_CHUNKERS = {
    "sde1d": _chunk_sde1d,
    "lattice": _chunk_lattice,
    "splitting": _chunk_splitting,
    "picard": _chunk_picard,
    "moments": _chunk_moments,
    "pipeline": _chunk_pipeline,
}


def run_chunk(cfg: RunConfig, lo: int, hi: int):
    """Tables for replicate range [lo, hi): {table: {column: array}}.

    Replicate columns carry global indices, so chunk tables concatenate
    directly.  Moments chunks must match the manifest's chunk plan.
    """
    if not 0 <= lo < hi <= cfg.reps:
        raise ValueError("chunk bounds must satisfy 0 <= lo < hi <= reps")
    return _CHUNKERS[cfg.experiment](cfg, lo, hi)


def _chunk_task(cfg_json: str, lo: int, hi: int):
    """Worker entry point; the manifest travels as JSON."""
    return run_chunk(parse_config(json.loads(cfg_json)), lo, hi)


def _concat(parts: list) -> dict[str, dict[str, np.ndarray]]:
    tables = {}
    for name in parts[0]:
        tables[name] = {
            col: np.concatenate([p[name][col] for p in parts])
            for col in parts[0][name]
        }
    return tables


def _group_means(key_cols, value, names) -> dict[str, McEstimate]:
    """One estimate per distinct key tuple, keys rendered compactly."""
    keys = list(zip(*(np.asarray(c) for c in key_cols)))
    out: dict[str, McEstimate] = {}
    seen: list[tuple] = []
    for k in keys:
        if k not in seen:
            seen.append(k)
    for k in seen:
        mask = np.ones(len(keys), dtype=bool)
        for c, kc in zip(key_cols, k):
            mask &= np.asarray(c) == kc
        label = ",".join(f"{n}={v:g}" for n, v in zip(names, k))
        out[label] = McEstimate.from_samples(np.asarray(value)[mask])
    return out


def _summ_sde1d(cfg: Sde1dRun, tables):
    t = tables["replicates"]
    exploded = t["exploded"]
    times = t["explosion_time"][exploded > 0.0]
    est = {
        "explosion_frequency": McEstimate.from_samples(exploded),
        "explosion_time_mean": McEstimate.from_samples(times),
    }
    return est, {"exploded_count": int(exploded.sum())}


def _summ_lattice(cfg: LatticeRun, tables):
    t = tables["replicates"]
    est = {
        f"mean[{label}]": e
        for label, e in _group_means(
            (t["J"], t["probe"]), t["value"], ("J", "probe")
        ).items()
    }
    return est, {}


def _summ_splitting(cfg: SplittingRun, tables):
    t = tables["replicates"]
    est = {
        f"sq_gap[{label}]": e
        for label, e in _group_means(
            (t["n"], t["probe"]), t["sq_gap"], ("n", "probe")
        ).items()
    }
    derived: dict[str, Any] = {}
    if "domination" in tables:
        d = tables["domination"]
        est["domination_rate"] = McEstimate.from_samples(d["violated"])
        derived["checked_steps_total"] = int(d["checked_steps"].sum())
    return est, derived


def _summ_picard(cfg: PicardRun, tables):
    t = tables["replicates"]
    last = t["iterate"] == cfg.iters
    est = {}
    for s in cfg.sites:
        mask = last & (t["site"] == s)
        v = t["value"][mask]
        est[f"mean[site={s}]"] = McEstimate.from_samples(v)
        est[f"second_moment[site={s}]"] = McEstimate.from_samples(v**2)
    return est, {}


def _summ_moments(cfg: MomentsRun, tables):
    t = tables["replicates"]
    est = {
        "moment": McEstimate.from_samples(t["value"]),
        "collision_time_mean": McEstimate.from_samples(t["collision_time"]),
    }
    return est, {"chunk": cfg.chunk}


def _summ_pipeline(cfg: PipelineRun, tables):
    t = tables["replicates"]
    s1, s2, s3 = t["stage1"], t["stage2"], t["stage3"]
    n1 = int(s1.sum())
    if n1 == 0:
        raise Stage1Exhausted(
            f"no site reached the start level by time {cfg.delta:g} in any "
            f"of {len(s1)} replicates (window {cfg.window}, widened to "
            f"{2 * cfg.window})"
        )
    eps = cfg.delta if cfg.epsilon is None else cfg.epsilon
    constants = derive_constants(
        cfg.delta, get_drift(cfg.drift), epsilon=eps,
        start_exponent=cfg.start_exponent,
    )
    est = {
        "success_frequency": McEstimate.from_samples(t["success"]),
        "stage1_rate": McEstimate.from_samples(s1),
        "stage2_rate_given_stage1": McEstimate.from_samples(s2[~np.isnan(s2)]),
        "stage3_rate_given_stage2": McEstimate.from_samples(s3[~np.isnan(s3)]),
    }
    derived = {
        "epsilon": eps,
        "start_exponent": constants.start_exponent,
        "start_level": constants.start_level,
        "slowdown": constants.slowdown,
        "growth_threshold": constants.growth_threshold,
        "explosion_bound": constants.explosion_bound,
        "chained_bound": constants.chained_bound,
        "product_bound": product_bound(cfg.delta),
        "widened_count": int(t["widened"].sum()),
        "capped_count": int(t["capped"].sum()),
        "stage1_count": n1,
        "stage2_count": int(np.nansum(s2)),
        "stage3_count": int(np.nansum(s3)),
    }
    return est, derived


_SUMMARIZERS = {
    "sde1d": _summ_sde1d,
    "lattice": _summ_lattice,
    "splitting": _summ_splitting,
    "picard": _summ_picard,
    "moments": _summ_moments,
    "pipeline": _summ_pipeline,
}


def run_experiment(cfg: RunConfig, *, workers: int = 0) -> RunOutput:
    """Execute the manifest's chunk plan and pool the results.

    ``workers`` <= 1 runs the plan serially in-process; larger values
    fan chunks out to a process pool.  Both paths execute the identical
    plan and concatenate in plan order, so outputs are byte-identical.
    """
    chunks = plan_chunks(cfg)
    if workers > 1 and len(chunks) > 1:
        blob = config_to_json(cfg)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_chunk_task, blob, a, b) for a, b in chunks]
            parts = [f.result() for f in futures]
    else:
        parts = [run_chunk(cfg, a, b) for a, b in chunks]
    tables = _concat(parts)
    estimates, derived = _SUMMARIZERS[cfg.experiment](cfg, tables)
    return RunOutput(config=cfg, tables=tables, estimates=estimates, derived=derived)


def _sort_key(e: McEstimate):
    def k(x: float):
        return (1, 0.0) if math.isnan(x) else (0, x)

    return (e.reps, k(e.mean), k(e.m2), k(e.stderr))


def merge(parts: Iterable[McEstimate]) -> McEstimate:
    """Pool estimates; the same multiset gives the same bits.

    Parts are put in a canonical order before the pairwise fold, so any
    arrival order (and any grouping that preserves the multiset of leaf
    estimates) produces a bit-identical pooled estimate.
    """
    out = McEstimate(mean=0.0, stderr=float("nan"), reps=0, m2=0.0)
    for p in sorted(parts, key=_sort_key):
        out = out.combine(p)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def summary_dict(out: RunOutput) -> dict:
    """The summary.json payload: schema-stamped, nan and inf to null."""
    return _jsonable(
        {
            "schema_version": SCHEMA_VERSION,
            "experiment": out.config.experiment,
            "config": out.config.model_dump(mode="json"),
            "estimates": {
                name: {
                    "mean": e.mean,
                    "stderr": e.stderr,
                    "reps": e.reps,
                    "m2": e.m2,
                }
                for name, e in out.estimates.items()
            },
            "derived": out.derived,
        }
    )


def _cell(col: str, x) -> str:
    v = float(x)
    if math.isnan(v):
        return ""
    if col in _INT_COLS:
        return str(int(round(v)))
    return repr(v)


def _write_table(path: str, cols: dict[str, np.ndarray]) -> None:
    names = list(cols)
    arrays = [cols[c] for c in names]
    lines = [",".join(names)]
    for i in range(len(arrays[0])):
        lines.append(",".join(_cell(c, a[i]) for c, a in zip(names, arrays)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _num(x) -> str:
    v = float(x)
    return "" if math.isnan(v) else repr(v)


def render_summary(out: RunOutput) -> str:
    """summary.json text: sorted keys, two-space indent, one trailing
    newline, so equal runs give equal bytes."""
    return json.dumps(summary_dict(out), sort_keys=True, indent=2) + "\n"


def render_long(out: RunOutput) -> str:
    """long.csv text: pooled estimates first (sorted by name, value =
    mean), then numeric derived scalars (sorted, empty stderr)."""
    exp = out.config.experiment
    lines = ["experiment,parameter,value,stderr"]
    for name in sorted(out.estimates):
        e = out.estimates[name]
        lines.append(f"{exp},{name},{_num(e.mean)},{_num(e.stderr)}")
    for name in sorted(out.derived):
        v = out.derived[name]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            lines.append(f"{exp},{name},{_num(v)},")
    return "\n".join(lines) + "\n"


def write_outputs(out: RunOutput, out_dir: str) -> dict[str, str]:
    """Write the run's files into out_dir; returns {kind: path}."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, cols in out.tables.items():
        fname = "replicates.csv" if name == "replicates" else f"{name}.csv"
        paths[name] = os.path.join(out_dir, fname)
        _write_table(paths[name], cols)

    paths["summary"] = os.path.join(out_dir, "summary.json")
    with open(paths["summary"], "w") as fh:
        fh.write(render_summary(out))

    paths["long"] = os.path.join(out_dir, "long.csv")
    with open(paths["long"], "w") as fh:
        fh.write(render_long(out))
    return paths
