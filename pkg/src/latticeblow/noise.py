"""Counter-based Gaussian noise fields and Monte Carlo estimates.

Every Brownian increment consumed anywhere in this package is a pure
function of ``(seed, replicate, site, step)``.  Two integrators handed
the same field therefore see the same driving noise no matter how they
interleave their work, which is what makes coupled comparisons between
schemes meaningful.  There is no hidden stream state to advance and no
dependence on thread schedule or evaluation order.

A base increment covers one step of length ``dt``.  When an integrator
needs to substep below ``dt`` it must not invent fresh noise; instead
``split`` refines an increment into two halves that are conditionally
correct (a Brownian bridge midpoint), using auxiliary draws keyed on a
separate stream.  Refinements of the same increment are consistent
across depths, so schemes running at different substep resolutions
still follow the same underlying Brownian path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = ["NoiseField", "McEstimate"]

# Odd multipliers and the splitmix64 increment; the finalizer below is the
# standard splitmix64 avalanche (bijective on 64-bit words).
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_K_SITE = np.uint64(0xBF58476D1CE4E5B7)
_K_STEP = np.uint64(0x94D049BB133111EB)
_K_AUX = np.uint64(0xD6E8FEB86659FD93)
_K_REP = np.uint64(0xA0761D6478BD642F)

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

_U64_TO_UNIT = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z + _GOLDEN).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _as_u64(v) -> np.ndarray:
    # two's complement so negative sites key cleanly
    return np.asarray(v, dtype=np.int64).view(np.uint64)


def _keys(seed, site, step, tag) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = _mix64(np.asarray(seed, dtype=np.uint64) ^ (_as_u64(site) * _K_SITE))
        z = _mix64(z ^ (_as_u64(step) * _K_STEP))
        return _mix64(z ^ (_as_u64(tag) * _K_AUX))


def _unit(keys: np.ndarray) -> np.ndarray:
    # 53-bit uniform, offset into the open interval (0, 1)
    return ((keys >> np.uint64(11)).astype(np.float64) + 0.5) * _U64_TO_UNIT


def _std_normal(seed, site, step, tag) -> np.ndarray:
    return ndtri(_unit(_keys(seed, site, step, tag)))


@dataclass(frozen=True)
class NoiseField:
    """Gaussian increments N(0, dt) addressed by (site, step).

    ``seed`` identifies the field; ``replicate`` derives an independent
    field for Monte Carlo fan-out via key mixing, never by jumping a
    sequential stream.
    """

    seed: int
    dt: float

    def __post_init__(self) -> None:
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        # seeds live on the 64-bit ring; normalize so derived seeds round-trip
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    # -- addressing ----------------------------------------------------

    def replicate(self, r: int) -> "NoiseField":
        return NoiseField(seed=int(self._replicate_seeds([r])[0]), dt=self.dt)

    def _seed_u64(self) -> np.uint64:
        return np.uint64(self.seed)

    def _replicate_seeds(self, reps) -> np.ndarray:
        with np.errstate(over="ignore"):
            return _mix64(self._seed_u64() ^ (_as_u64(reps) * _K_REP))

    # -- base increments ----------------------------------------------

    def increment(self, site: int, step: int) -> float:
        return float(self.increments([site], step)[0])

    def increments(self, sites, step: int) -> np.ndarray:
        """Increments for one step at many sites, shape (len(sites),)."""
        z = _std_normal(self._seed_u64(), np.asarray(sites), step, 0)
        return z * math.sqrt(self.dt)

    def matrix(self, sites, step: int, rep_seeds: np.ndarray) -> np.ndarray:
        """Increments for one step, shape (len(sites), len(rep_seeds)).

        ``rep_seeds`` comes from :meth:`replicate_seeds`; column r matches
        ``self.replicate(r).increments(sites, step)`` exactly.
        """
        sites_u = _as_u64(sites)[:, None]
        z = _std_normal(rep_seeds[None, :], sites_u.view(np.int64), step, 0)
        return z * math.sqrt(self.dt)

    def replicate_seeds(self, n_reps: int) -> np.ndarray:
        return self._replicate_seeds(np.arange(n_reps))

    def replicate_seed_range(self, start: int, stop: int) -> np.ndarray:
        """Seeds for replicate indices start..stop-1; a contiguous slice
        of replicate_seeds(stop), so range workers and a whole-run see
        identical per-replicate noise."""
        if not 0 <= start <= stop:
            raise ValueError("need 0 <= start <= stop")
        return self._replicate_seeds(np.arange(start, stop))

    def path(self, site: int, n_steps: int, step0: int = 0) -> np.ndarray:
        """All increments for one site, steps step0..step0+n_steps-1."""
        z = _std_normal(self._seed_u64(), site, np.arange(step0, step0 + n_steps), 0)
        return z * math.sqrt(self.dt)

    def brownian(self, site: int, n_steps: int) -> np.ndarray:
        """B evaluated on the step grid, shape (n_steps + 1,), B[0] = 0."""
        out = np.empty(n_steps + 1)
        out[0] = 0.0
        np.cumsum(self.path(site, n_steps), out=out[1:])
        return out

    def path_matrix(
        self, site: int, n_steps: int, rep_seeds: np.ndarray, step0: int = 0
    ) -> np.ndarray:
        """Increments (n_steps, len(rep_seeds)) for one site across replicates."""
        steps_u = _as_u64(np.arange(step0, step0 + n_steps))[:, None]
        z = _std_normal(rep_seeds[None, :], site, steps_u.view(np.int64), 0)
        return z * math.sqrt(self.dt)

    # -- bridge refinement ----------------------------------------------

    def split(self, inc, sites, step: int, node: int, seg_len: float,
              rep_seeds: np.ndarray | None = None):
        """Split increments over a segment of length ``seg_len`` in half.

        ``inc`` has shape (len(sites),) or (len(sites), n_reps) and is the
        Brownian increment over the segment; the return value is the pair
        (left, right) with left + right == inc and each half marginally
        N(0, seg_len / 2), conditionally on the parent.  ``node`` is the
        heap index of the segment in the dyadic subdivision of base step
        ``step`` (the whole step is node 1, children of v are 2v, 2v+1);
        auxiliary draws are keyed on (site, step, node) in a stream that
        never collides with base increments.
        """
        tag = 2 * node  # base draws use tag 0; node >= 1 here
        if rep_seeds is None:
            z = _std_normal(self._seed_u64(), np.asarray(sites), step, tag)
        else:
            sites_u = _as_u64(sites)[:, None]
            z = _std_normal(rep_seeds[None, :], sites_u.view(np.int64), step, tag)
        mid = z * (0.5 * math.sqrt(seg_len))
        left = 0.5 * inc + mid
        return left, inc - left

    def sub_increments(self, site: int, step: int, depth: int) -> np.ndarray:
        """The 2**depth bridge sub-increments of one base increment."""
        segs = np.array([self.increment(site, step)])
        seg_len = self.dt
        node0 = 1
        for _ in range(depth):
            out = np.empty(2 * len(segs))
            for i, inc in enumerate(segs):
                l, r = self.split(np.array([inc]), [site], step, node0 + i, seg_len)
                out[2 * i] = l[0]
                out[2 * i + 1] = r[0]
            segs = out
            node0 *= 2
            seg_len /= 2.0
        return segs

    # -- misc -----------------------------------------------------------

    def uniforms(self, sites, step: int, tag: int = 0) -> np.ndarray:
        """Raw (0,1) uniforms behind the normals; mainly for diagnostics."""
        return _unit(_keys(self._seed_u64(), np.asarray(sites), step, tag))


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo summary: mean, stderr = sample std / sqrt(reps).

    ``m2`` is the sum of squared deviations (Welford), carried so that
    estimates merge without access to the raw samples.
    """

    mean: float
    stderr: float
    reps: int
    m2: float = 0.0

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.mean - 1.96 * self.stderr, self.mean + 1.96 * self.stderr)

    @staticmethod
    def from_samples(x) -> "McEstimate":
        x = np.asarray(x, dtype=np.float64)
        n = x.size
        if n == 0:
            return McEstimate(mean=0.0, stderr=float("nan"), reps=0, m2=0.0)
        mean = float(x.mean())
        m2 = float(((x - mean) ** 2).sum())
        stderr = math.sqrt(m2 / (n - 1) / n) if n > 1 else float("nan")
        return McEstimate(mean=mean, stderr=stderr, reps=n, m2=m2)

    def combine(self, other: "McEstimate") -> "McEstimate":
        """Pooled estimate; symmetric in its two operands bit for bit."""
        if other.reps == 0:
            return self
        if self.reps == 0:
            return other
        na, nb = self.reps, other.reps
        n = na + nb
        mean = (na * self.mean + nb * other.mean) / n
        delta = self.mean - other.mean
        m2 = self.m2 + other.m2 + delta * delta * (na * nb / n)
        stderr = math.sqrt(m2 / (n - 1) / n) if n > 1 else float("nan")
        return McEstimate(mean=mean, stderr=stderr, reps=n, m2=m2)
