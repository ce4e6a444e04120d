"""The underlying one-dimensional SDE and its explosion machinery.

The state equation is dX = b(X) dt + X dB with multiplicative noise that
freezes the origin.  Superlinear b can push X to infinity in finite
time; everything here quantifies that event at desk scale:

* Euler-Maruyama simulation with adaptive substep halving in the stiff
  region and a threshold surrogate for explosion;
* the dyadic comparison process 2^k exp(B_t + (f(2^{k-1}) - 1/2) t)
  that bounds X from below between consecutive dyadic levels;
* closed forms for the level-up hitting probability and the first
  passage MGF of a line-crossing time;
* a computable lower bound on the probability of exploding within
  delta from level 2^K, and the search for the K making it >= 1-eps.

All simulation is batched across replicates and keyed off NoiseField,
so any two schemes given the same field see the same Brownian paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .drift import DriftSpec
from .noise import McEstimate, NoiseField

__all__ = [
    "SdePath",
    "LevelCrossingRecord",
    "BatchResult",
    "ExplosionLevelNotFound",
    "SeriesConvergenceError",
    "simulate_underlying",
    "simulate_batch",
    "simulate_geometric_level",
    "simulate_Z",
    "hitting_probability_closed_form",
    "sigma_mgf",
    "explosion_lower_bound",
    "find_K",
    "explosion_experiment",
    "level_exit_experiment",
    "geometric_level_exit_experiment",
    "sigma_mgf_experiment",
    "level_crossing_record",
]

_MAX_SPLIT_DEPTH = 40


class ExplosionLevelNotFound(LookupError):
    """No starting level K <= 64 achieves the requested bound."""


class SeriesConvergenceError(ValueError):
    """A dyadic series did not reach the term cutoff within the scan cap.

    Raised for drifts whose gauge grows too slowly for termwise float
    summation (the gauge argument 2^k overflows before terms vanish).
    """


@dataclass(frozen=True)
class SdePath:
    times: np.ndarray
    values: np.ndarray
    exploded: bool
    explosion_time: float | None


@dataclass(frozen=True)
class LevelCrossingRecord:
    """Dyadic exponents visited by a path, in crossing order."""

    levels_visited: tuple[int, ...]
    backtracked: bool
    total_time: float

    def __post_init__(self) -> None:
        for a, b in zip(self.levels_visited, self.levels_visited[1:]):
            if abs(b - a) != 1:
                raise ValueError("consecutive dyadic exponents must differ by 1")


@dataclass(frozen=True)
class BatchResult:
    """Replicate-indexed outcome of a batched SDE run.

    ``stop_time`` is nan for paths that ran to the horizon; ``snapshots``
    has one row per requested record time (stopped paths carry their
    final value forward).
    """

    final: np.ndarray
    stop_time: np.ndarray
    stopped_up: np.ndarray
    stopped_down: np.ndarray
    snapshots: np.ndarray
    record_times: tuple[float, ...]

    @property
    def exploded(self) -> np.ndarray:
        return self.stopped_up


def simulate_batch(
    drift: DriftSpec,
    x0: float,
    dt: float,
    horizon: float,
    noise: NoiseField,
    site: int,
    rep_seeds: np.ndarray,
    *,
    up_level: float = math.inf,
    down_level: float = -math.inf,
    J: float = math.inf,
    n0: int = 1,
    record_times: tuple[float, ...] = (),
    step0: int = 0,
) -> BatchResult:
    """Euler-Maruyama for dX = b(X ^ J)/n0 dt + X dB across replicates.

    One column per entry of ``rep_seeds``.  A step whose drift part
    would exceed 10% of the state is split in half recursively, with the
    Brownian increment refined through the noise field's bridge, so the
    realized path is a function of the Brownian path alone and not of
    the splitting pattern.  Paths stop when they exit (down_level,
    up_level); crossing up_level is the explosion surrogate.  States are
    clamped at zero from below.
    """
    if dt <= 0.0 or horizon <= 0.0:
        raise ValueError("dt and horizon must be positive")
    if abs(noise.dt - dt) > 1e-15 * max(1.0, dt):
        raise ValueError("noise field granularity must equal dt")
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9:
        raise ValueError("horizon must be an integer multiple of dt")

    n_reps = len(rep_seeds)
    x = np.full(n_reps, float(x0))
    stop_time = np.full(n_reps, np.nan)
    stopped_up = np.zeros(n_reps, dtype=bool)
    stopped_down = np.zeros(n_reps, dtype=bool)
    snap_steps = {}
    for rt in record_times:
        k = int(round(rt / dt))
        if abs(k * dt - rt) > 1e-9 or not 0 <= k <= n_steps:
            raise ValueError(f"record time {rt} is not on the step grid")
        snap_steps.setdefault(k, []).append(rt)
    snapshots = np.empty((len(record_times), n_reps))
    snap_row = {rt: i for i, rt in enumerate(record_times)}

    b = drift.b
    inv_n0 = 1.0 / n0

    def advance(xs, inc, seeds, seg_len, node, t0, step):
        """One segment for a subset; returns (new_x, event_time, went_up)."""
        capped = np.minimum(xs, J) if J != math.inf else xs
        with np.errstate(over="ignore"):
            dterm = np.asarray(b(capped), dtype=np.float64) * (seg_len * inv_n0)
        split = (dterm > 0.1 * xs) & (node < 2 ** _MAX_SPLIT_DEPTH)
        out_x = np.empty_like(xs)
        ev_t = np.full(xs.shape, np.nan)
        went_up = np.zeros(xs.shape, dtype=bool)
        keep = ~split
        if keep.any():
            xk = xs[keep]
            nx = np.maximum(xk + dterm[keep] + xk * inc[keep], 0.0)
            out_x[keep] = nx
            hit_up = nx >= up_level
            hit_dn = nx <= down_level
            hit = hit_up | hit_dn
            ev_t[keep] = np.where(hit, t0 + seg_len, np.nan)
            went_up[keep] = hit_up
        if split.any():
            idx = np.flatnonzero(split)
            sub_seeds = seeds[idx]
            left, right = noise.split(
                inc[idx][None, :], [site], step, node, seg_len, sub_seeds
            )
            mx, mt, mu = advance(
                xs[idx], left[0], sub_seeds, seg_len / 2.0, 2 * node, t0, step
            )
            out_x[idx] = mx
            ev_t[idx] = mt
            went_up[idx] = mu
            alive = np.isnan(mt)
            if alive.any():
                ai = np.flatnonzero(alive)
                fx, ft, fu = advance(
                    mx[ai],
                    right[0][ai],
                    sub_seeds[ai],
                    seg_len / 2.0,
                    2 * node + 1,
                    t0 + seg_len / 2.0,
                    step,
                )
                gi = idx[ai]
                out_x[gi] = fx
                ev_t[gi] = ft
                went_up[gi] = fu
        return out_x, ev_t, went_up

    active = np.arange(n_reps)
    for rt in snap_steps.get(0, []):
        snapshots[snap_row[rt]] = x
    for k in range(n_steps):
        if active.size:
            seeds = rep_seeds[active]
            inc = noise.matrix([site], step0 + k, seeds)[0]
            nx, ev, up = advance(x[active], inc, seeds, dt, 1, k * dt, step0 + k)
            x[active] = nx
            hit = ~np.isnan(ev)
            if hit.any():
                gi = active[hit]
                stop_time[gi] = ev[hit]
                stopped_up[gi] = up[hit]
                stopped_down[gi] = ~up[hit]
                active = active[~hit]
        for rt in snap_steps.get(k + 1, []):
            snapshots[snap_row[rt]] = x
    return BatchResult(
        final=x,
        stop_time=stop_time,
        stopped_up=stopped_up,
        stopped_down=stopped_down,
        snapshots=snapshots,
        record_times=tuple(record_times),
    )


def _self_seed(noise: NoiseField) -> np.ndarray:
    # a one-column batch keyed by the field's own seed reproduces the
    # field's own increment stream exactly
    return np.array([noise.seed], dtype=np.uint64)


def simulate_underlying(
    drift: DriftSpec,
    x0: float,
    dt: float,
    horizon: float,
    x_max: float,
    noise: NoiseField,
    site: int = 0,
) -> SdePath:
    """One path of dX = b(X) dt + X dB, stopping at the explosion proxy.

    Explosion is a result, not an error: the returned path is truncated
    at the first (sub)step boundary where the state reaches x_max.
    """
    if x0 < 0.0:
        raise ValueError("x0 must be >= 0")
    if x_max <= x0:
        raise ValueError("x_max must exceed x0")
    n_steps = int(round(horizon / dt))
    grid = np.arange(n_steps + 1) * dt
    res = simulate_batch(
        drift,
        x0,
        dt,
        horizon,
        noise,
        site,
        _self_seed(noise),
        up_level=x_max,
        record_times=tuple(grid),
    )
    vals = res.snapshots[:, 0]
    if res.stopped_up[0]:
        t_star = float(res.stop_time[0])
        keep = grid < t_star - 1e-15
        times = np.append(grid[keep], t_star)
        values = np.append(vals[keep], float(res.final[0]))
        return SdePath(times, values, True, t_star)
    return SdePath(grid, vals, False, None)


def simulate_Z(
    drift: DriftSpec,
    n0: int,
    J: float,
    z0: float,
    noise: NoiseField,
    site: int = 0,
    dt: float = 1e-3,
    horizon: float = 1.0,
) -> SdePath:
    """One path of the slowed comparison process dZ = b(Z ^ J)/n0 dt + Z dB."""
    if z0 < 0.0:
        raise ValueError("z0 must be >= 0")
    n_steps = int(round(horizon / dt))
    grid = np.arange(n_steps + 1) * dt
    res = simulate_batch(
        drift,
        z0,
        dt,
        horizon,
        noise,
        site,
        _self_seed(noise),
        J=J,
        n0=n0,
        record_times=tuple(grid),
    )
    return SdePath(grid, res.snapshots[:, 0], False, None)


def simulate_geometric_level(
    drift: DriftSpec,
    k: int,
    noise: NoiseField,
    site: int = 0,
    dt: float = 1e-3,
    horizon: float = 1.0,
) -> SdePath:
    """The dyadic comparison path 2^k exp(B_t + (f(2^{k-1}) - 1/2) t).

    Closed form on the step grid: no discretization error beyond the
    granularity of the Brownian path itself.
    """
    from .drift import eval_f

    f = eval_f(drift, 2.0 ** (k - 1))
    n_steps = int(round(horizon / dt))
    grid = np.arange(n_steps + 1) * dt
    bpath = noise.brownian(site, n_steps)
    values = 2.0 ** k * np.exp(bpath + (f - 0.5) * grid)
    return SdePath(grid, values, False, None)


def hitting_probability_closed_form(drift: DriftSpec, k: int) -> float:
    """P(the geometric comparison path doubles before it halves).

    Scale-function identity for geometric Brownian motion with drift:
    1 / (1 + 2^{1 - 2 f(2^{k-1})}).
    """
    from .drift import eval_f

    f = eval_f(drift, 2.0 ** (k - 1))
    if f <= 0.0:
        raise ValueError("hitting probability needs f(2^{k-1}) > 0")
    return 1.0 / (1.0 + 2.0 ** (1.0 - 2.0 * f))


def sigma_mgf(a: float, slope: float, s: float) -> float:
    """E[exp(s sigma)] for sigma = first time B_t hits slope*t - a.

    Closed form exp(-a*slope*(sqrt(1 - 2s/slope^2) - 1)), finite only
    for s < slope^2 / 2; at the boundary the MGF diverges and the
    domain error is the honest answer.
    """
    if a <= 0.0 or slope <= 0.0:
        raise ValueError("a and slope must be positive")
    ratio = s / slope ** 2
    if ratio >= 0.5:
        raise ValueError("MGF diverges at s >= slope^2 / 2")
    return math.exp(-a * slope * (math.sqrt(1.0 - 2.0 * ratio) - 1.0))


# ---------------------------------------------------------------------------
# explosion bound and the level search

_TERM_CUTOFF = 1e-15
_SERIES_CAP = 1000


def _beyond_half_gauge(drift: DriftSpec, K: int):
    """Terms (2^{1-2f}, 1/(f-1/2)) for k >= K until both pass the cutoff.

    Returns (eps1, mgf_series_sum, f_min).  Raises if the gauge dips to
    1/2 or the cutoff is not reached before the scan cap.
    """
    from .drift import eval_f

    eps1 = 0.0
    ssum = 0.0
    f_min = math.inf
    for k in range(K, K + _SERIES_CAP + 1):
        with np.errstate(over="ignore"):
            f = eval_f(drift, 2.0 ** (k - 1))
        if not math.isfinite(f):
            # the gauge argument overflowed before the terms vanished, so
            # the remaining terms cannot be summed faithfully in float
            raise SeriesConvergenceError(
                f"gauge overflows at dyadic level k={k} with series terms "
                f"still above {_TERM_CUTOFF}"
            )
        if not f > 0.5:
            raise ValueError(
                f"gauge f(2^{{k-1}}) must exceed 1/2 for all k >= {K}; "
                f"fails at k={k} (f={f})"
            )
        f_min = min(f_min, f)
        t1 = 2.0 ** (1.0 - 2.0 * min(f, 1e6))
        t2 = 1.0 / (f - 0.5)
        eps1 += t1
        ssum += t2
        if t1 < _TERM_CUTOFF and t2 < _TERM_CUTOFF:
            return eps1, ssum, f_min
    raise SeriesConvergenceError(
        f"series terms above {_TERM_CUTOFF} after {_SERIES_CAP} dyadic "
        f"levels past K={K}"
    )


def explosion_lower_bound(drift: DriftSpec, K: int, delta: float, s: float) -> float:
    """Lower bound on P(explode within delta | start at 2^K).

    1 - sum_{k>=K} 2^{1-2f(2^{k-1})}
      - exp(-s delta) * exp(2 s ln2 * sum_{k>=K} 1/(f(2^{k-1}) - 1/2))

    May be negative (vacuous); callers clamp at 0 when interpreting.
    The s domain is s < (1/2) min_{k>=K} (f(2^{k-1}) - 1/2)^2.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    if s < 0.0:
        raise ValueError("s must be >= 0")
    eps1, ssum, f_min = _beyond_half_gauge(drift, K)
    s_max = 0.5 * (f_min - 0.5) ** 2
    if s >= s_max:
        raise ValueError(f"s={s} outside the MGF domain (s < {s_max})")
    return 1.0 - eps1 - math.exp(-s * delta + 2.0 * s * math.log(2.0) * ssum)


def find_K(drift: DriftSpec, epsilon: float, delta: float) -> tuple[int, float]:
    """Smallest dyadic level exponent K with bound >= 1 - epsilon.

    For each K the free parameter s is grid-searched on 32 logarithmic
    points spanning (1e-3, 0.9 * s_max].  Raises ExplosionLevelNotFound
    when no K <= 64 works, which covers both non-summable gauges and
    gauges too slow for the termwise series at float precision.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    for K in range(1, 65):
        try:
            eps1, ssum, f_min = _beyond_half_gauge(drift, K)
        except (ValueError, SeriesConvergenceError):
            continue
        s_max = 0.5 * (f_min - 0.5) ** 2
        hi = 0.9 * s_max
        if hi <= 1e-3:
            continue
        best_bound = -math.inf
        best_s = None
        for s in np.geomspace(1e-3, hi, 32):
            bound = 1.0 - eps1 - math.exp(
                -s * delta + 2.0 * s * math.log(2.0) * ssum
            )
            if bound > best_bound:
                best_bound = bound
                best_s = float(s)
        if best_bound >= 1.0 - epsilon:
            return K, best_s
    raise ExplosionLevelNotFound(
        f"no K <= 64 reaches bound >= {1.0 - epsilon} for drift {drift.name!r}"
    )


# ---------------------------------------------------------------------------
# Monte Carlo experiments


@dataclass(frozen=True)
class ExplosionStats:
    frequency: McEstimate
    exploded: np.ndarray
    explosion_time: np.ndarray


def explosion_experiment(
    drift: DriftSpec,
    x0: float,
    dt: float,
    horizon: float,
    x_max: float,
    noise: NoiseField,
    reps: int,
    *,
    J: float = math.inf,
    n0: int = 1,
) -> ExplosionStats:
    """Empirical explosion frequency over independent replicates."""
    rep_seeds = noise.replicate_seeds(reps)
    res = simulate_batch(
        drift, x0, dt, horizon, noise, 0, rep_seeds, up_level=x_max, J=J, n0=n0
    )
    return ExplosionStats(
        frequency=McEstimate.from_samples(res.exploded.astype(np.float64)),
        exploded=res.exploded.copy(),
        explosion_time=res.stop_time.copy(),
    )


@dataclass(frozen=True)
class LevelExitStats:
    p_up: McEstimate
    n_up: int
    n_down: int
    n_censored: int


def level_exit_experiment(
    drift: DriftSpec,
    k: int,
    dt: float,
    horizon: float,
    noise: NoiseField,
    reps: int,
) -> LevelExitStats:
    """From 2^k, does the underlying SDE double before it halves?

    Censored paths (no exit by the horizon) are excluded from p_up;
    their count is reported so callers can judge the truncation.
    """
    rep_seeds = noise.replicate_seeds(reps)
    res = simulate_batch(
        drift,
        2.0 ** k,
        dt,
        horizon,
        noise,
        0,
        rep_seeds,
        up_level=2.0 ** (k + 1),
        down_level=2.0 ** (k - 1),
    )
    decided = res.stopped_up | res.stopped_down
    ups = res.stopped_up[decided].astype(np.float64)
    return LevelExitStats(
        p_up=McEstimate.from_samples(ups),
        n_up=int(res.stopped_up.sum()),
        n_down=int(res.stopped_down.sum()),
        n_censored=int(reps - decided.sum()),
    )


def geometric_level_exit_experiment(
    drift: DriftSpec,
    k: int,
    dt: float,
    horizon: float,
    noise: NoiseField,
    reps: int,
) -> LevelExitStats:
    """Exit direction of the closed-form comparison path from its band.

    The path doubles when B_t + (f - 1/2) t reaches ln 2 and halves at
    -ln 2; simulated directly on the Brownian grid.
    """
    from .drift import eval_f

    f = eval_f(drift, 2.0 ** (k - 1))
    n_steps = int(round(horizon / dt))
    rep_seeds = noise.replicate_seeds(reps)
    ln2 = math.log(2.0)
    n_up = 0
    n_down = 0
    outcomes = []
    block = 4096
    carry = np.zeros(reps)
    alive = np.arange(reps)
    step = 0
    while step < n_steps and alive.size:
        nb = min(block, n_steps - step)
        incs = noise.path_matrix(0, nb, rep_seeds[alive], step0=step)
        paths = carry[alive] + np.cumsum(incs + (f - 0.5) * dt, axis=0)
        hit_up = paths >= ln2
        hit_dn = paths <= -ln2
        hit_any = hit_up | hit_dn
        decided = hit_any.any(axis=0)
        if decided.any():
            first = np.argmax(hit_any[:, decided], axis=0)
            up_first = hit_up[first, np.flatnonzero(decided)]
            n_up += int(up_first.sum())
            n_down += int((~up_first).sum())
            outcomes.extend(up_first.astype(np.float64).tolist())
        carry[alive] = paths[-1]
        alive = alive[~decided]
        step += nb
    return LevelExitStats(
        p_up=McEstimate.from_samples(np.array(outcomes)),
        n_up=n_up,
        n_down=n_down,
        n_censored=int(alive.size),
    )


@dataclass(frozen=True)
class SigmaMgfStats:
    estimate: McEstimate
    n_censored: int


def sigma_mgf_experiment(
    a: float,
    slope: float,
    s: float,
    dt: float,
    noise: NoiseField,
    reps: int,
    horizon: float = 150.0,
) -> SigmaMgfStats:
    """MC estimate of E[exp(s sigma)] by direct first-passage simulation.

    sigma is detected on the dt grid (first step with B_t - slope*t <=
    -a).  Paths still alive at the horizon contribute exp(s*horizon),
    which under-counts their true weight; at the default horizon the
    surviving mass is ~1e-8 of replicates and the induced bias is far
    below the MC error this feeds into.
    """
    if a <= 0.0 or slope <= 0.0:
        raise ValueError("a and slope must be positive")
    if s >= 0.5 * slope ** 2:
        raise ValueError("MGF diverges at s >= slope^2 / 2")
    n_steps = int(round(horizon / dt))
    rep_seeds = noise.replicate_seeds(reps)
    sigma = np.full(reps, horizon)
    carry = np.zeros(reps)
    alive = np.arange(reps)
    step = 0
    block = max(1, int(2 ** 22 / max(reps, 1)))
    while step < n_steps and alive.size:
        nb = min(block, n_steps - step)
        incs = noise.path_matrix(0, nb, rep_seeds[alive], step0=step)
        drifted = incs - slope * dt
        paths = carry[alive] + np.cumsum(drifted, axis=0)
        hit = paths <= -a
        decided = hit.any(axis=0)
        if decided.any():
            rows = np.argmax(hit[:, decided], axis=0)
            sigma[alive[decided]] = (step + rows + 1) * dt
        carry[alive] = paths[-1]
        alive = alive[~decided]
        step += nb
    return SigmaMgfStats(
        estimate=McEstimate.from_samples(np.exp(s * sigma)),
        n_censored=int(alive.size),
    )


def level_crossing_record(
    path: SdePath, k0: int, k_min: int, k_max: int
) -> LevelCrossingRecord:
    """Dyadic levels visited by a path started in [2^k0, 2^{k0+1}).

    Walks the path and records each first crossing of a neighboring
    dyadic level; ``backtracked`` flags any downward move.
    """
    levels = [k0]
    k = k0
    for v in path.values:
        while v >= 2.0 ** (k + 1) and k < k_max:
            k += 1
            levels.append(k)
        while v < 2.0 ** k and k > k_min:
            k -= 1
            levels.append(k)
    return LevelCrossingRecord(
        levels_visited=tuple(levels),
        backtracked=any(b < a for a, b in zip(levels, levels[1:])),
        total_time=float(path.times[-1]),
    )
