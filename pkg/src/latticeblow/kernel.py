"""Finite-range continuous-time random walk and its transition kernel.

The walk jumps at unit rate; each jump displaces by z with probability
pmf(z), |z| <= reach.  Its time-t transition kernel

    G_t(z) = P(walk displaced by z at time t)

is computed as a Poisson mixture of convolution powers of the jump law,
truncated at an order M chosen so the Poisson tail P(N_t > M) is below a
tolerance.  Every truncation is accounted for explicitly: a KernelSlice
carries its exact leftover ``tail_mass``, and window sizing for lattice
simulations budgets the walk's escape probability with a Chernoff bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "WalkSpec",
    "KernelSlice",
    "WindowTooNarrow",
    "get_walk",
    "registered_walks",
    "kernel_slice",
    "convolve",
    "l1_time_difference",
    "poisson_jump_tail",
    "required_margin",
]


class WindowTooNarrow(ValueError):
    """A finite window cannot absorb the kernel support plus margin."""


@dataclass(frozen=True)
class WalkSpec:
    """Jump law of the walk: ``pmf`` maps displacement to probability.

    ``reach`` bounds the jump size; zero jumps are legal (lazy walks).
    The jump rate is fixed at 1, so time reparametrization is the
    caller's business.
    """

    name: str
    reach: int
    pmf: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        if self.reach < 1:
            raise ValueError("reach must be >= 1")
        total = 0.0
        for z, p in self.pmf:
            if abs(z) > self.reach:
                raise ValueError(f"jump {z} outside [-{self.reach}, {self.reach}]")
            if p < 0.0:
                raise ValueError("jump probabilities must be nonnegative")
            total += p
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"jump probabilities sum to {total}, not 1")

    def weights(self) -> np.ndarray:
        """Dense pmf on offsets -reach..reach (index z + reach)."""
        w = np.zeros(2 * self.reach + 1)
        for z, p in self.pmf:
            w[z + self.reach] = p
        return w


_WALKS = {
    "srw": WalkSpec("srw", 1, ((-1, 0.5), (1, 0.5))),
    "lazy-srw": WalkSpec("lazy-srw", 1, ((-1, 0.25), (0, 0.5), (1, 0.25))),
    "range2": WalkSpec(
        "range2", 2, ((-2, 0.125), (-1, 0.375), (1, 0.375), (2, 0.125))
    ),
}


def get_walk(name: str) -> WalkSpec:
    try:
        return _WALKS[name]
    except KeyError:
        raise KeyError(f"unknown walk {name!r}; registered: {sorted(_WALKS)}") from None


def registered_walks() -> tuple[str, ...]:
    return tuple(sorted(_WALKS))


@dataclass(frozen=True, eq=False)
class KernelSlice:
    """G_t on the truncated support [-order*reach, order*reach].

    values[i] = G_t(offsets[i]); ``tail_mass`` is the exact Poisson mass
    of the discarded orders, so sum(values) + tail_mass == 1 up to fp.
    """

    t: float
    offsets: np.ndarray
    values: np.ndarray
    tail_mass: float
    order: int

    @property
    def support_radius(self) -> int:
        return int(self.offsets[-1])

    def value_at(self, z: int) -> float:
        r = self.support_radius
        if abs(z) > r:
            return 0.0
        return float(self.values[z + r])


@lru_cache(maxsize=512)
def kernel_slice(walk: WalkSpec, t: float, tol: float = 1e-12) -> KernelSlice:
    """Truncated transition kernel at time t.

    Truncation order M is the smallest with P(Poisson(t) > M) < tol;
    the kernel support is then [-M*reach, M*reach].
    """
    if t < 0.0:
        raise ValueError("t must be >= 0")
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must be in (0, 1)")

    # Poisson weights up to the tolerance cut
    probs = [math.exp(-t)]
    cum = probs[0]
    while 1.0 - cum >= tol:
        m = len(probs)
        probs.append(probs[-1] * t / m)
        cum += probs[-1]
    order = len(probs) - 1
    tail = max(1.0 - cum, 0.0)

    radius = order * walk.reach
    values = np.zeros(2 * radius + 1)
    center = radius
    values[center] = probs[0]
    if order > 0:
        w = walk.weights()
        power = np.array([1.0])  # pmf^{*0}
        for m in range(1, order + 1):
            power = np.convolve(power, w)
            half = m * walk.reach
            values[center - half : center + half + 1] += probs[m] * power

    slice_ = KernelSlice(
        t=t,
        offsets=np.arange(-radius, radius + 1),
        values=values,
        tail_mass=tail,
        order=order,
    )
    assert abs(slice_.values.sum() + slice_.tail_mass - 1.0) < 1e-12
    assert slice_.tail_mass < tol
    return slice_


def convolve(
    ker: KernelSlice,
    profile: np.ndarray,
    boundary_margin: int,
    mode: str = "extend",
) -> np.ndarray:
    """Mix a profile through the kernel: out(x) = sum_z G_t(z) profile(x+z).

    ``profile`` lives on a symmetric window; ``boundary_margin`` is the
    count of edge sites reserved as truncation buffer and must cover the
    kernel support, else the mixed interior values would silently depend
    on the boundary treatment.  ``mode`` picks that treatment for the
    buffer itself: "extend" copies edge values outward, "absorb" treats
    the outside as zero.
    """
    if ker.support_radius > boundary_margin:
        raise WindowTooNarrow(
            f"kernel support radius {ker.support_radius} exceeds the "
            f"reserved boundary margin {boundary_margin}"
        )
    profile = np.asarray(profile, dtype=np.float64)
    if profile.shape[-1] < 2 * boundary_margin + 1:
        raise WindowTooNarrow(
            f"window of {profile.shape[-1]} sites cannot reserve a margin "
            f"of {boundary_margin} on each side"
        )
    nd_mode = {"extend": "nearest", "absorb": "constant"}[mode]
    return correlate1d(profile, ker.values, axis=-1, mode=nd_mode, cval=0.0)


def l1_time_difference(
    walk: WalkSpec, t: float, h: float, tol: float = 1e-12
) -> float:
    """L1 distance between the kernels at times t and t+h.

    Computed on the union of the two truncated supports; the discarded
    tails contribute at most 2*tol on top, which is far below any h this
    is used with.  Scales linearly in h uniformly over t in [0, 1]: the
    walk must jump at least once for the kernel to move.
    """
    if h < 0.0:
        raise ValueError("h must be >= 0")
    if h == 0.0:
        return 0.0
    a = kernel_slice(walk, t, tol)
    b = kernel_slice(walk, t + h, tol)
    r = max(a.support_radius, b.support_radius)
    va = np.zeros(2 * r + 1)
    vb = np.zeros(2 * r + 1)
    va[r - a.support_radius : r + a.support_radius + 1] = a.values
    vb[r - b.support_radius : r + b.support_radius + 1] = b.values
    return float(np.abs(va - vb).sum())


def poisson_jump_tail(t: float, threshold: float) -> float:
    """Chernoff bound on P(Poisson(t) > threshold), threshold > t.

    exp(threshold - t - threshold*ln(threshold/t)); dominates the exact
    tail and is the quantity window sizing budgets against.
    """
    if t < 0.0:
        raise ValueError("t must be >= 0")
    if threshold <= t:
        raise ValueError("Chernoff bound needs threshold > t")
    if t == 0.0:
        return 0.0
    return math.exp(threshold - t - threshold * math.log(threshold / t))


def required_margin(walk: WalkSpec, T: float, budget: float = 1e-6) -> int:
    """Smallest boundary margin keeping the walk's escape below budget.

    The walk leaves a margin of m sites within time T only by jumping
    more than m/reach times; the margin returned makes the Chernoff
    bound on that event < budget.
    """
    if T < 0.0:
        raise ValueError("T must be >= 0")
    if T == 0.0:
        return 1
    m = max(1, math.floor(T * walk.reach) + 1)
    while True:
        if m / walk.reach > T and poisson_jump_tail(T, m / walk.reach) < budget:
            return m
        m += 1
