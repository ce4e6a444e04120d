"""Collision-time moment oracle for the driftless system.

The k-th moment of the driftless field at a site equals the expected
exponential of the total pairwise collision time of k independent
unit-rate walks started at that site:

    E[U_t(x)^k] = E exp( sum_{i<j} |{s <= t : X^i_s = X^j_s}| ).

The walks here are simulated exactly from their jump skeleton
(exponential holding times, jumps from the walk's pmf), so the estimate
carries no time-discretization bias at all; its only error is Monte
Carlo.  That makes it an independent reference for the Euler-based
lattice estimators, which is what cross_validate packages up.

RNG note: this module draws from numpy's Philox streams, one substream
per walker, while the lattice route uses the package's own counter-based
field.  The two routes of a cross-check share no randomness machinery.
Per-walker substreams also make samples couple cleanly: adding walkers
or extending the horizon refines the same paths instead of redrawing
them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .drift import get_drift
from .kernel import WalkSpec, get_walk, required_margin
from .lattice import InitialProfile, estimate_moment
from .noise import McEstimate, NoiseField

__all__ = [
    "CollisionSample",
    "CrossCheckReport",
    "sample_collision_times",
    "collision_samples",
    "feynman_kac_moment",
    "cross_validate",
]

_MAX_ORDER = 4


@dataclass(frozen=True)
class CollisionSample:
    """Total pairwise time-at-equality of k coupled walks over [0, t]."""

    k: int
    t: float
    collision_time: float

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.t < 0.0:
            raise ValueError("t must be >= 0")
        cap = self.k * (self.k - 1) / 2.0 * self.t
        if not 0.0 <= self.collision_time <= cap + 1e-12:
            raise ValueError(
                f"collision time {self.collision_time} outside [0, {cap}]"
            )


def _equal_pairs(pos: list) -> int:
    n = 0
    for i in range(len(pos)):
        pi = pos[i]
        for j in range(i + 1, len(pos)):
            if pi == pos[j]:
                n += 1
    return n


def sample_collision_times(
    walk: WalkSpec, k: int, horizons, reps: int, *, seed: int = 0
) -> np.ndarray:
    """Exact collision times for k walks, shape (reps, len(horizons)).

    ``horizons`` must be strictly increasing and positive; column j holds
    the total pairwise time-at-equality on [0, horizons[j]].  Walker i of
    replicate r is a fixed function of (seed, i, r), so calls that differ
    only in k or in the horizon list extend the same paths: columns are
    pathwise nondecreasing and larger k pathwise dominates smaller.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    hs = [float(h) for h in horizons]
    if not hs or any(h <= 0.0 for h in hs) or any(
        b <= a for a, b in zip(hs, hs[1:])
    ):
        raise ValueError("horizons must be positive and strictly increasing")
    horizon = hs[-1]

    offsets = [int(z) for z, _ in walk.pmf]
    probs = np.array([p for _, p in walk.pmf])

    # one Philox substream per walker keeps its skeleton independent of
    # how many other walkers a call asks for
    counts = np.empty((k, reps), dtype=np.int64)
    times: list[np.ndarray] = []
    steps: list[np.ndarray] = []
    for i in range(k):
        rng = np.random.Generator(np.random.Philox(key=[seed, i]))
        counts[i] = rng.poisson(horizon, size=reps)
        total = int(counts[i].sum())
        times.append(rng.random(total) * horizon)
        steps.append(rng.choice(len(offsets), size=total, p=probs))
    starts = np.zeros((k, reps + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=starts[:, 1:])

    out = np.empty((reps, len(hs)))
    for r in range(reps):
        ev_t: list[float] = []
        ev_w: list[int] = []
        ev_s: list[int] = []
        for i in range(k):
            lo, hi = starts[i, r], starts[i, r + 1]
            ev_t.extend(times[i][lo:hi].tolist())
            ev_w.extend([i] * (hi - lo))
            ev_s.extend(steps[i][lo:hi].tolist())
        order = sorted(range(len(ev_t)), key=ev_t.__getitem__)

        pos = [0] * k
        eq = k * (k - 1) // 2  # all walks start together
        acc = 0.0
        s = 0.0
        hj = 0
        for e in order:
            te = ev_t[e]
            while hj < len(hs) and hs[hj] <= te:
                out[r, hj] = acc + (hs[hj] - s) * eq
                hj += 1
            if hj == len(hs):
                break
            acc += (te - s) * eq
            s = te
            pos[ev_w[e]] += offsets[ev_s[e]]
            eq = _equal_pairs(pos)
        while hj < len(hs):
            out[r, hj] = acc + (hs[hj] - s) * eq
            hj += 1
    return out


def collision_samples(
    walk: WalkSpec, k: int, t: float, reps: int, *, seed: int = 0
) -> tuple[CollisionSample, ...]:
    cts = sample_collision_times(walk, k, (t,), reps, seed=seed)[:, 0]
    return tuple(CollisionSample(k=k, t=t, collision_time=float(c)) for c in cts)


def feynman_kac_moment(
    walk: WalkSpec, k: int, t: float, reps: int, *, seed: int = 0
) -> McEstimate:
    """MC mean of exp(total pairwise collision time); k capped at 4.

    For k=1 the pairwise sum is empty and every sample is exactly 1.
    The identity matches the Ito reading of the site noise u dB; under a
    Stratonovich reading the k-th moment would carry an extra factor
    e^{kt/2}, which this oracle deliberately does not include.
    """
    if not 1 <= int(k) <= _MAX_ORDER:
        raise ValueError(f"k must be an integer in 1..{_MAX_ORDER}")
    if t <= 0.0:
        raise ValueError("t must be positive")
    cts = sample_collision_times(walk, int(k), (t,), reps, seed=seed)[:, 0]
    return McEstimate.from_samples(np.exp(cts))


@dataclass(frozen=True)
class CrossCheckReport:
    """Agreement report between the exact-jump and Euler moment routes."""

    k: int
    t: float
    dt: float
    oracle: McEstimate
    euler: McEstimate
    gap: float
    combined_stderr: float
    dt_floor: float
    tolerance: float
    agrees: bool
    advice: str | None


def _assess(
    oracle: McEstimate, euler: McEstimate, k: int, t: float, dt: float
) -> CrossCheckReport:
    """Build the report; split out so the thresholds are testable alone.

    The dt floor allows for the Euler route's weak bias: its one-step
    defect against the moment evolution is O(dt^2) with a constant that
    grows like the squared generator norm, so k^2; accumulated over t/dt
    steps that is proportional to k^2 t dt times the moment's scale.
    """
    gap = abs(oracle.mean - euler.mean)
    combined = math.hypot(oracle.stderr, euler.stderr)
    floor = 8.0 * k * k * t * dt * oracle.mean
    tol = 3.0 * combined + floor
    advice = None
    if gap > 5.0 * combined + floor:
        advice = (
            f"gap {gap:.3g} is beyond 5 x combined stderr + {floor:.3g}: "
            f"the Euler step dt={dt:g} is too coarse, halve it and rerun"
        )
    return CrossCheckReport(
        k=k,
        t=t,
        dt=dt,
        oracle=oracle,
        euler=euler,
        gap=gap,
        combined_stderr=combined,
        dt_floor=floor,
        tolerance=tol,
        agrees=gap <= tol,
        advice=advice,
    )


def cross_validate(
    k: int,
    t: float,
    reps: int,
    *,
    dt: float = 1e-3,
    seed: int = 0,
    walk: WalkSpec | None = None,
    window: int | None = None,
    mode: str = "extend",
) -> CrossCheckReport:
    """Check the Euler lattice moment against the exact-jump oracle.

    Runs both routes at ``reps`` replicates and compares within
    3 x combined stderr + dt floor.  The two routes share the ``seed``
    integer but not RNG machinery, so the comparison has no common
    randomness to hide behind.
    """
    walk = get_walk("srw") if walk is None else walk
    oracle = feynman_kac_moment(walk, k, t, reps, seed=seed)
    if window is None:
        window = required_margin(walk, t, 1e-6) + 3
    euler = estimate_moment(
        k,
        t,
        InitialProfile.constant(1.0),
        get_drift("zero"),
        0.0,
        reps,
        dt=dt,
        noise=NoiseField(seed=seed, dt=dt),
        window=window,
        walk=walk,
        mode=mode,
    )
    return _assess(oracle, euler, k, t, dt)
