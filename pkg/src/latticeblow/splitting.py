"""Alternating scheme: per-site SDE blocks glued by exact kernel mixing.

Time is cut into blocks of length 1/n.  Within a block every site runs
its own uncoupled SDE

    dV = b(min(V, J)) dt + V dB(x)

by Euler-Maruyama on ``inner_dt`` substeps, drawing the same noise-field
increments a direct lattice scheme would consume.  At each block
boundary k/n the whole profile is convolved with the exact transition
kernel at time 1/n, so the spatial mixing carries no discretization
error at all; the left-limit profile is recorded before each mixing.

Mixing exactly isolates the splitting error from any spatial
discretization error, which is what the convergence measurement against
the direct scheme (l2_distance_to_direct) is about.  The scheme also dominates the
one-dimensional comparison process started at a spike, which
domination_experiment checks pathwise under shared noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .drift import DriftSpec, GrowthConstants
from .kernel import (
    KernelSlice,
    WalkSpec,
    WindowTooNarrow,
    convolve,
    get_walk,
    kernel_slice,
    required_margin,
)
from .lattice import _DT_MIN, InitialProfile, _advance_columns, final_profiles
from .noise import McEstimate, NoiseField
from .sde1d import simulate_batch

__all__ = [
    "AlternatingConfig",
    "AlternatingRun",
    "BlockRecord",
    "ConvergenceReport",
    "DominationStats",
    "TrendReport",
    "run_alternating",
    "alternating_finals",
    "l2_distance_to_direct",
    "dt_refinement_floor",
    "domination_flags",
    "domination_experiment",
    "domination_tolerance",
    "hit_level_experiment",
    "second_moment_by_n",
    "mann_kendall_trend",
]


@dataclass(frozen=True)
class AlternatingConfig:
    """Splitting resolution: n blocks per unit time, drift truncated at J.

    ``inner_dt`` is the Euler substep inside each block; it defaults to
    1/(20n) so the SDE-block error stays subordinate to the splitting
    error, and must keep inner_dt <= 1/(10n) and divide the block length
    exactly.
    """

    n: int
    J: float
    inner_dt: float | None = None

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        object.__setattr__(self, "n", int(self.n))
        if self.J < 0.0:
            raise ValueError("J must be >= 0")
        if self.inner_dt is None:
            object.__setattr__(self, "inner_dt", 1.0 / (20.0 * self.n))
        if not 0.0 < self.inner_dt <= 1.0 / (10.0 * self.n) + 1e-15:
            raise ValueError("inner_dt must lie in (0, 1/(10 n)]")
        spb = 1.0 / self.n / self.inner_dt
        if abs(spb - round(spb)) > 1e-9:
            raise ValueError("inner_dt must divide the block length 1/n")

    @property
    def steps_per_block(self) -> int:
        return int(round(1.0 / self.n / self.inner_dt))

    @property
    def block_len(self) -> float:
        return 1.0 / self.n


@dataclass(frozen=True)
class BlockRecord:
    """Profile at a block boundary: left limit, then the mixed value."""

    t: float
    before_mix: np.ndarray
    after_mix: np.ndarray


@dataclass(frozen=True)
class AlternatingRun:
    cfg: AlternatingConfig
    window: int
    boundary_margin: int
    t_final: float
    initial: np.ndarray
    final: np.ndarray
    blocks: tuple[BlockRecord, ...]


class _ZeroNoise:
    """Stands in for a NoiseField in deterministic runs.

    Increments are zero and so are their bridge refinements; the dt only
    feeds grid bookkeeping.
    """

    def __init__(self, dt: float) -> None:
        self.dt = dt

    def matrix(self, sites, step, rep_seeds) -> np.ndarray:
        return np.zeros((len(sites), len(rep_seeds)))

    def split(self, inc, sites, step, node, seg_len, rep_seeds=None):
        return np.zeros_like(inc), np.zeros_like(inc)


def _plan(cfg: AlternatingConfig, T: float) -> tuple[int, int]:
    """(total inner steps, steps per block); T on the grid and <= 1."""
    if T <= 0.0:
        raise ValueError("T must be positive")
    if T > 1.0 + 1e-12:
        raise ValueError("the alternating construction runs up to T = 1")
    n_steps = int(round(T / cfg.inner_dt))
    if abs(n_steps * cfg.inner_dt - T) > 1e-9:
        raise ValueError("T must be an integer multiple of inner_dt")
    return n_steps, cfg.steps_per_block


def _mix_margin(
    walk: WalkSpec, ker: KernelSlice, T: float, window: int, budget: float
) -> int:
    margin = max(required_margin(walk, T, budget), ker.support_radius)
    if margin > window:
        raise WindowTooNarrow(
            f"window {window} cannot hold the margin {margin} needed for "
            f"horizon {T} (mixing support {ker.support_radius})"
        )
    return margin


def _mix(values: np.ndarray, ker: KernelSlice, margin: int, mode: str) -> np.ndarray:
    # convolve mixes along the last axis; columns are replicates
    return convolve(ker, values.T, margin, mode).T


def run_alternating(
    profile: InitialProfile,
    drift: DriftSpec,
    cfg: AlternatingConfig,
    T: float,
    noise: NoiseField,
    window: int,
    *,
    walk: WalkSpec | None = None,
    mode: str = "extend",
    rep_seed: int | None = None,
    boundary_budget: float = 1e-6,
    zero_noise: bool = False,
    dt_min: float = _DT_MIN,
) -> AlternatingRun:
    """One replicate of the alternating scheme, block records included.

    ``zero_noise=True`` replaces every Brownian increment (and bridge
    refinement) with zero, exposing the deterministic skeleton of ODE
    blocks and kernel mixings for oracle comparisons.
    """
    walk = get_walk("srw") if walk is None else walk
    field = _ZeroNoise(cfg.inner_dt) if zero_noise else noise
    if not zero_noise and abs(noise.dt - cfg.inner_dt) > 1e-15 * max(1.0, cfg.inner_dt):
        raise ValueError("noise field granularity must equal inner_dt")
    n_steps, spb = _plan(cfg, T)
    ker = kernel_slice(walk, cfg.block_len)
    margin = _mix_margin(walk, ker, T, window, boundary_budget)
    sites = np.arange(-window, window + 1)
    seed = noise.seed if rep_seed is None else rep_seed
    seeds = np.array([seed], dtype=np.uint64)
    values = profile.build(window)[:, None]
    initial = values[:, 0].copy()
    blocks: list[BlockRecord] = []
    for k in range(n_steps):
        inc = field.matrix(sites, k, seeds)
        values = _advance_columns(
            values, drift, cfg.J, cfg.inner_dt, 1, inc, seeds, field,
            sites, k, None, mode, dt_min,
        )
        if (k + 1) % spb == 0:
            before = values[:, 0].copy()
            values = _mix(values, ker, margin, mode)
            blocks.append(
                BlockRecord(
                    t=(k + 1) // spb * cfg.block_len,
                    before_mix=before,
                    after_mix=values[:, 0].copy(),
                )
            )
    return AlternatingRun(
        cfg=cfg,
        window=window,
        boundary_margin=margin,
        t_final=T,
        initial=initial,
        final=values[:, 0].copy(),
        blocks=tuple(blocks),
    )


def _alternating_batch(
    profile: InitialProfile,
    drift: DriftSpec,
    cfg: AlternatingConfig,
    T: float,
    noise: NoiseField,
    window: int,
    rep_seeds: np.ndarray,
    walk: WalkSpec,
    mode: str,
    boundary_budget: float,
    dt_min: float = _DT_MIN,
    trace_site: int | None = None,
    max_site: int | None = None,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """All replicates at once; optional per-step trace and running max.

    The trace holds the value AT each grid time (post-mixing at block
    boundaries); the running max additionally sees the pre-mixing left
    limits, so sup functionals do not miss the block-end spikes.
    """
    if abs(noise.dt - cfg.inner_dt) > 1e-15 * max(1.0, cfg.inner_dt):
        raise ValueError("noise field granularity must equal inner_dt")
    n_steps, spb = _plan(cfg, T)
    ker = kernel_slice(walk, cfg.block_len)
    margin = _mix_margin(walk, ker, T, window, boundary_budget)
    sites = np.arange(-window, window + 1)
    values = np.repeat(profile.build(window)[:, None], len(rep_seeds), axis=1)
    trace = None
    if trace_site is not None:
        trace = np.empty((n_steps + 1, len(rep_seeds)))
        trace[0] = values[trace_site + window]
    vmax = None
    if max_site is not None:
        vmax = values[max_site + window].copy()
    for k in range(n_steps):
        inc = noise.matrix(sites, k, rep_seeds)
        values = _advance_columns(
            values, drift, cfg.J, cfg.inner_dt, 1, inc, rep_seeds, noise,
            sites, k, None, mode, dt_min,
        )
        if vmax is not None:
            np.maximum(vmax, values[max_site + window], out=vmax)
        if (k + 1) % spb == 0:
            values = _mix(values, ker, margin, mode)
            if vmax is not None:
                np.maximum(vmax, values[max_site + window], out=vmax)
        if trace is not None:
            trace[k + 1] = values[trace_site + window]
    return values, trace, vmax


def alternating_finals(
    profile: InitialProfile,
    drift: DriftSpec,
    cfg: AlternatingConfig,
    T: float,
    noise: NoiseField,
    window: int,
    rep_seeds: np.ndarray,
    *,
    walk: WalkSpec | None = None,
    mode: str = "extend",
    boundary_budget: float = 1e-6,
) -> np.ndarray:
    """Terminal profiles of the alternating scheme, shape (sites, reps)."""
    walk = get_walk("srw") if walk is None else walk
    finals, _, _ = _alternating_batch(
        profile, drift, cfg, T, noise, window, rep_seeds, walk, mode,
        boundary_budget,
    )
    return finals


@dataclass(frozen=True)
class ConvergenceReport:
    """Coupled L2 gaps between the alternating and direct schemes."""

    n_ladder: tuple[int, ...]
    estimates: tuple[McEstimate, ...]
    probes: tuple[int, ...]

    def gaps(self) -> tuple[float, ...]:
        return tuple(e.mean for e in self.estimates)


def _sup_probe_gap(
    a: np.ndarray, b: np.ndarray, probe_sites, window: int
) -> tuple[McEstimate, int]:
    best: McEstimate | None = None
    best_p = 0
    for p in probe_sites:
        est = McEstimate.from_samples((a[p + window] - b[p + window]) ** 2)
        if best is None or est.mean > best.mean:
            best, best_p = est, p
    return best, best_p


def l2_distance_to_direct(
    profile: InitialProfile,
    drift: DriftSpec,
    J: float,
    n_ladder,
    T: float,
    noise: NoiseField,
    window: int,
    reps: int,
    *,
    probe_sites=(0,),
    walk: WalkSpec | None = None,
    mode: str = "extend",
    boundary_budget: float = 1e-6,
) -> ConvergenceReport:
    """sup over probes of E[(V_T - U_T)^2], per splitting resolution n.

    Both schemes consume the identical noise field and replicate seeds,
    so the gap is a genuine strong (pathwise) distance, not a difference
    of marginals.
    """
    ladder = tuple(int(n) for n in n_ladder)
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("n_ladder must be strictly increasing")
    walk = get_walk("srw") if walk is None else walk
    rep_seeds = noise.replicate_seeds(reps)
    direct = final_profiles(
        profile, drift, J, T, noise.dt, noise, window, rep_seeds,
        walk=walk, mode=mode, boundary_budget=boundary_budget,
    )
    ests: list[McEstimate] = []
    probes: list[int] = []
    for n in ladder:
        cfg = AlternatingConfig(n=n, J=J, inner_dt=noise.dt)
        vfin = alternating_finals(
            profile, drift, cfg, T, noise, window, rep_seeds,
            walk=walk, mode=mode, boundary_budget=boundary_budget,
        )
        est, p = _sup_probe_gap(vfin, direct, probe_sites, window)
        ests.append(est)
        probes.append(p)
    return ConvergenceReport(
        n_ladder=ladder, estimates=tuple(ests), probes=tuple(probes)
    )


def dt_refinement_floor(
    profile: InitialProfile,
    drift: DriftSpec,
    J: float,
    T: float,
    noise: NoiseField,
    window: int,
    reps: int,
    *,
    probe_sites=(0,),
    walk: WalkSpec | None = None,
    mode: str = "extend",
    boundary_budget: float = 1e-6,
) -> McEstimate:
    """Direct scheme at dt against itself at dt/2 on the same paths.

    The half-step run refines each base increment through the noise
    bridge (the same refinement a rejected step would use), so the two
    runs follow one Brownian path and the gap measures pure step-size
    error: the floor any splitting comparison at this dt sits on.
    """
    walk = get_walk("srw") if walk is None else walk
    margin = required_margin(walk, T, boundary_budget)
    if margin > window:
        raise WindowTooNarrow(
            f"window {window} cannot hold the margin {margin} for horizon {T}"
        )
    n_steps = int(round(T / noise.dt))
    if abs(n_steps * noise.dt - T) > 1e-9:
        raise ValueError("T must be an integer multiple of noise.dt")
    rep_seeds = noise.replicate_seeds(reps)
    base = final_profiles(
        profile, drift, J, T, noise.dt, noise, window, rep_seeds,
        walk=walk, mode=mode, boundary_budget=boundary_budget,
    )
    sites = np.arange(-window, window + 1)
    half = np.repeat(profile.build(window)[:, None], reps, axis=1)
    dt = noise.dt
    for k in range(n_steps):
        inc = noise.matrix(sites, k, rep_seeds)
        left, right = noise.split(inc, sites, k, 1, dt, rep_seeds)
        half = _advance_columns(
            half, drift, J, dt / 2.0, 2, left, rep_seeds, noise, sites, k,
            walk, mode, _DT_MIN,
        )
        half = _advance_columns(
            half, drift, J, dt / 2.0, 3, right, rep_seeds, noise, sites, k,
            walk, mode, _DT_MIN,
        )
    est, _ = _sup_probe_gap(base, half, probe_sites, window)
    return est


def domination_tolerance(drift: DriftSpec, z, J: float, dt: float):
    """Pointwise allowance for the pathwise domination check.

    One Euler step moves either process by at most b(min(state, J)) dt
    through its drift; ten steps' worth absorbs the clamp and substep
    asymmetries between the two integrators without masking a real
    crossing, which would grow linearly in time, not stay within a
    fixed number of steps.
    """
    with np.errstate(over="ignore"):
        return 10.0 * dt * np.asarray(drift.b(np.minimum(z, J)), dtype=np.float64)


@dataclass(frozen=True)
class DominationStats:
    """Violation frequency of V(0) >= Z - tol while K_b < Z < J."""

    violation: McEstimate
    mean_checked_steps: float
    reps: int


def domination_flags(
    M: float,
    drift: DriftSpec,
    growth: GrowthConstants,
    J: float,
    n: int,
    delta: float,
    noise: NoiseField,
    window: int,
    rep_seeds: np.ndarray,
    *,
    walk: WalkSpec | None = None,
    mode: str = "extend",
    boundary_budget: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-replicate domination violations for an explicit seed batch.

    Returns (violated, checked_steps), shapes (reps,): whether the
    scheme value at the origin dipped below Z - tol at some checked grid
    time, and how many grid times were checked before Z left the band
    (K_b, J).  See domination_experiment for the construction.
    """
    if n < growth.n0:
        raise ValueError(f"n must be >= n0 = {growth.n0}")
    if not M > growth.K_b:
        raise ValueError("the spike must start above K_b")
    walk = get_walk("srw") if walk is None else walk
    cfg = AlternatingConfig(n=n, J=J, inner_dt=noise.dt)
    n_steps, _ = _plan(cfg, delta)
    _, vtrace, _ = _alternating_batch(
        InitialProfile.spike(M, 0), drift, cfg, delta, noise, window,
        rep_seeds, walk, mode, boundary_budget, trace_site=0,
    )
    grid = tuple(np.arange(n_steps + 1) * noise.dt)
    zres = simulate_batch(
        drift, M, noise.dt, delta, noise, 0, rep_seeds,
        J=J, n0=growth.n0, record_times=grid,
    )
    z = zres.snapshots
    inside = (z > growth.K_b) & (z < J)
    left_band = ~inside
    exit_idx = np.where(
        left_band.any(axis=0), left_band.argmax(axis=0), len(grid)
    )
    checked = np.arange(len(grid))[:, None] < exit_idx[None, :]
    tol = domination_tolerance(drift, z, J, noise.dt)
    viol = (vtrace < z - tol) & checked
    return viol.any(axis=0), checked.sum(axis=0)


def domination_experiment(
    M: float,
    drift: DriftSpec,
    growth: GrowthConstants,
    J: float,
    n: int,
    delta: float,
    noise: NoiseField,
    window: int,
    reps: int,
    *,
    walk: WalkSpec | None = None,
    mode: str = "extend",
    boundary_budget: float = 1e-6,
) -> DominationStats:
    """Check the scheme started at spike M@0 against the slowed SDE Z.

    Z runs dZ = b(min(Z, J))/n0 dt + Z dB on the SAME site-0 Brownian
    increments the scheme consumes, started at M.  Each replicate is
    checked at every grid time while K_b < Z < J (checking stops for
    good once Z exits that band); a violation is V(0) < Z - tol at some
    checked time.  The frequency should be ~0; it is reported, not
    asserted, because discretization can cross strict pathwise
    inequalities.
    """
    violated, checked_steps = domination_flags(
        M, drift, growth, J, n, delta, noise, window,
        noise.replicate_seeds(reps),
        walk=walk, mode=mode, boundary_budget=boundary_budget,
    )
    return DominationStats(
        violation=McEstimate.from_samples(violated.astype(np.float64)),
        mean_checked_steps=float(checked_steps.mean()),
        reps=reps,
    )


def hit_level_experiment(
    M_target: float,
    K_start: float,
    p: int,
    drift: DriftSpec,
    growth: GrowthConstants,
    J: float,
    delta: float,
    noise: NoiseField,
    reps: int,
    *,
    n: int | None = None,
    window: int | None = None,
    walk: WalkSpec | None = None,
    mode: str = "extend",
    boundary_budget: float = 1e-6,
) -> McEstimate:
    """P(sup over t <= 2 delta of the scheme's value at p >= M_target).

    The scheme starts from a spike of height K_start at p and runs at
    the slowest admissible resolution n0 by default.  The sup functional
    sees pre-mixing left limits, so block-end peaks are not missed.
    """
    if M_target <= K_start:
        raise ValueError("M_target must exceed K_start")
    n = growth.n0 if n is None else n
    if n < growth.n0:
        raise ValueError(f"n must be >= n0 = {growth.n0}")
    walk = get_walk("srw") if walk is None else walk
    cfg = AlternatingConfig(n=n, J=J, inner_dt=noise.dt)
    if window is None:
        ker = kernel_slice(walk, cfg.block_len)
        window = abs(p) + max(
            required_margin(walk, 2 * delta, boundary_budget),
            ker.support_radius,
        ) + 2
    rep_seeds = noise.replicate_seeds(reps)
    _, _, vmax = _alternating_batch(
        InitialProfile.spike(K_start, p), drift, cfg, 2 * delta, noise,
        window, rep_seeds, walk, mode, boundary_budget, max_site=p,
    )
    return McEstimate.from_samples((vmax >= M_target).astype(np.float64))


def second_moment_by_n(
    profile: InitialProfile,
    drift: DriftSpec,
    J: float,
    n_ladder,
    t: float,
    noise: NoiseField,
    window: int,
    reps: int,
    *,
    site: int = 0,
    walk: WalkSpec | None = None,
    mode: str = "extend",
    boundary_budget: float = 1e-6,
    coupled: bool = False,
) -> tuple[McEstimate, ...]:
    """E[V_t(site)^2] per splitting resolution.

    By default each ladder entry runs on an independent noise field, so
    the estimates carry independent sampling noise and a rank test such
    as mann_kendall_trend keeps its exchangeable null.  With
    ``coupled=True`` every entry shares the same replicate noise; that
    variance-reduces inter-resolution comparisons, but it also turns the
    deterministic convergence drift of the scheme into a perfect
    ordering of the estimates, however far below their stderr it sits,
    so coupled output must not be fed to a trend test.
    """
    walk = get_walk("srw") if walk is None else walk
    out = []
    for i, n in enumerate(n_ladder):
        if coupled:
            field = noise
        else:
            field = NoiseField(seed=noise.seed + 0x9E3779B9 * (i + 1), dt=noise.dt)
        rep_seeds = field.replicate_seeds(reps)
        cfg = AlternatingConfig(n=int(n), J=J, inner_dt=noise.dt)
        finals = alternating_finals(
            profile, drift, cfg, t, field, window, rep_seeds,
            walk=walk, mode=mode, boundary_budget=boundary_budget,
        )
        out.append(McEstimate.from_samples(finals[site + window] ** 2))
    return tuple(out)


@dataclass(frozen=True)
class TrendReport:
    """Exact one-sided Mann-Kendall test for an upward trend."""

    S: int
    p_upward: float
    upward: bool


def mann_kendall_trend(values, alpha: float = 0.05) -> TrendReport:
    """Exact permutation null; usable for the short ladders tested here.

    S is the number of increasing pairs minus decreasing pairs; the
    p-value is the exact probability, under a uniformly random ordering
    of the observed values, of an S at least as large.
    """
    xs = [float(v) for v in values]
    if not 2 <= len(xs) <= 8:
        raise ValueError("trend test needs 2..8 values (exact enumeration)")

    def score(seq) -> int:
        s = 0
        for i in range(len(seq)):
            for j in range(i + 1, len(seq)):
                d = seq[j] - seq[i]
                s += (d > 0) - (d < 0)
        return s

    s_obs = score(xs)
    perms = list(permutations(xs))
    at_least = sum(1 for p in perms if score(p) >= s_obs)
    p_up = at_least / len(perms)
    return TrendReport(S=s_obs, p_upward=p_up, upward=p_up <= alpha)
