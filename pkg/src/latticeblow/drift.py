"""Drift functions and the quantities derived from them.

A drift is a non-decreasing map b: [0, inf) -> [0, inf) with b(0) = 0 that
grows at least linearly past some threshold.  Everything downstream hangs
off two derived objects:

* the superlinearity gauge ``f(x) = b(x) / (4 x)``, whose reciprocal
  series over dyadic points decides whether solutions can blow up in
  finite time (summable series <=> finite-time explosion is possible);
* the growth constants ``(K_b, n0)`` quantifying how much of b survives
  an exponential damping factor, used by the slowed-drift comparison
  process.

Drifts are immutable and safe to share across worker processes.  The
built-in registry covers one representative per regime; custom drifts
come from a tiny arithmetic expression language, see :func:`make_drift`.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "DriftSpec",
    "GrowthConstants",
    "GrowthConstantsNotFound",
    "make_drift",
    "get_drift",
    "registered_drifts",
    "eval_f",
    "osgood_partial_sum",
    "osgood_series_converges",
    "osgood_integral_bracket",
    "find_growth_constants",
    "validate_growth_constants",
]


class GrowthConstantsNotFound(LookupError):
    """No (K_b, n0) pair validates below the search cap.

    Raised for drifts without genuine superlinear-or-better growth, e.g.
    b(x) = x or b identically zero.
    """


# ---------------------------------------------------------------------------
# expression sublanguage
#
# grammar: numbers, the variable x, the constant e, +, *, ** (alias pow),
# ln(expr), min(expr, expr).  Deliberately too weak to express anything
# non-monotone by accident in the registry; user-supplied expressions are
# still validated numerically on a geometric grid at registration.

_ALLOWED_BINOPS = (ast.Add, ast.Mult, ast.Pow)


def _check_expr(tree: ast.AST) -> None:
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load)):
            continue
        if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
            continue
        if isinstance(node, _ALLOWED_BINOPS):
            continue
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            continue
        if isinstance(node, ast.USub):
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            continue
        if isinstance(node, ast.Name) and node.id in ("x", "e", "ln", "min", "pow"):
            continue  # bare ln/min/pow (not called) still dies in _eval_expr
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and not node.keywords
            and len(node.args) == {"ln": 1, "min": 2, "pow": 2}.get(node.func.id)
        ):
            continue
        raise ValueError(f"disallowed syntax in drift expression: {ast.dump(node)}")


def _eval_expr(node: ast.AST, x):
    if isinstance(node, ast.Expression):
        return _eval_expr(node.body, x)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id == "x":
            return x
        if node.id == "e":
            return math.e
        raise ValueError(f"{node.id} can only be applied, not referenced")
    if isinstance(node, ast.UnaryOp):
        return -_eval_expr(node.operand, x)
    if isinstance(node, ast.BinOp):
        a = _eval_expr(node.left, x)
        b = _eval_expr(node.right, x)
        if isinstance(node.op, ast.Add):
            return a + b
        if isinstance(node.op, ast.Mult):
            return a * b
        return np.power(a, b)
    if isinstance(node, ast.Call):
        args = [_eval_expr(a, x) for a in node.args]
        name = node.func.id
        if name == "ln":
            return np.log(args[0])
        if name == "min":
            return np.minimum(args[0], args[1])
        return np.power(args[0], args[1])
    raise AssertionError(f"unreachable: {node!r}")


def _compile_drift_expr(expr: str) -> Callable[[np.ndarray], np.ndarray]:
    tree = ast.parse(expr, mode="eval")
    _check_expr(tree)

    def b(v):
        arr = np.asarray(v, dtype=np.float64)
        # extend by zero to the left; clip before evaluating so that
        # e.g. ln never sees a negative argument
        out = np.asarray(_eval_expr(tree, np.clip(arr, 0.0, None)), dtype=np.float64)
        out = np.where(arr > 0.0, out, 0.0)
        return float(out) if np.isscalar(v) or np.ndim(v) == 0 else out

    return b


# ---------------------------------------------------------------------------
# drift objects


@dataclass(frozen=True)
class DriftSpec:
    """A named drift with its growth metadata.

    ``eta`` and ``x_growth`` record the at-least-linear growth margin:
    b(x)/x >= 1 + eta for every x >= x_growth.  They are declared, not
    inferred; construction checks them on a geometric grid.  ``osgood``
    flags whether the reciprocal-gauge series converges (None when the
    question does not apply, e.g. the zero drift where f vanishes).
    ``lipschitz_on(hi)`` returns a Lipschitz constant of b on [0, hi].
    """

    name: str
    b: Callable[[np.ndarray], np.ndarray]
    eta: float
    x_growth: float
    lipschitz_on: Callable[[float], float]
    osgood: bool | None = None
    expr: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.eta > 0.0:
            raise ValueError("eta must be positive")
        _validate_drift(self)

    def __call__(self, v):
        return self.b(v)


_VALIDATION_GRID = 2.0 ** (np.arange(-8 * 4, 8 * 12 + 1) / 8.0)  # [1/16, 4096]


def _validate_drift(d: DriftSpec) -> None:
    if d.b(0.0) != 0.0:
        raise ValueError(f"drift {d.name!r}: b(0) must be exactly 0")
    g = _VALIDATION_GRID
    vals = np.asarray(d.b(g), dtype=np.float64)
    if np.any(vals < 0.0):
        raise ValueError(f"drift {d.name!r}: b must be nonnegative")
    if np.any(np.diff(vals) < 0.0):
        raise ValueError(f"drift {d.name!r}: b must be non-decreasing")
    if np.any(np.asarray(d.b(-g)) != 0.0):
        raise ValueError(f"drift {d.name!r}: b must vanish on x <= 0")
    mask = g >= d.x_growth
    if np.any(vals[mask] / g[mask] < 1.0 + d.eta):
        raise ValueError(
            f"drift {d.name!r}: growth margin eta={d.eta} fails below the "
            f"declared threshold x_growth={d.x_growth}"
        )


def _numeric_lipschitz(b: Callable, hi: float) -> float:
    # crude but serviceable: max forward-difference slope on a fine
    # geometric grid, padded 25% for the sampling gap
    hi = max(hi, 1e-6)
    g = np.concatenate([[0.0], np.geomspace(1e-6, hi, 512)])
    v = np.asarray(b(g), dtype=np.float64)
    slopes = np.diff(v) / np.diff(g)
    return 1.25 * float(slopes.max(initial=0.0))


def make_drift(
    name: str,
    expr: str,
    eta: float,
    x_growth: float,
    osgood: bool | None = None,
    lipschitz_on: Callable[[float], float] | None = None,
) -> DriftSpec:
    """Build a drift from an expression in the sublanguage.

    ``expr`` uses the variable ``x``, the constant ``e``, numbers and the
    operations + * ** pow ln min; it is evaluated for x > 0 and extended
    by zero elsewhere.  Raises ValueError when the expression strays
    outside the grammar or the resulting b violates a drift invariant.
    """
    b = _compile_drift_expr(expr)
    if lipschitz_on is None:
        lipschitz_on = lambda hi: _numeric_lipschitz(b, hi)  # noqa: E731
    return DriftSpec(
        name=name,
        b=b,
        eta=eta,
        x_growth=x_growth,
        lipschitz_on=lipschitz_on,
        osgood=osgood,
        expr=expr,
    )


def _zero_b(v):
    arr = np.zeros_like(np.asarray(v, dtype=np.float64))
    return float(arr) if np.ndim(v) == 0 else arr


_REGISTRY: dict[str, DriftSpec] = {}


def _register(d: DriftSpec) -> DriftSpec:
    _REGISTRY[d.name] = d
    return d


QUADRATIC = _register(
    make_drift(
        "quadratic",
        "x ** 2",
        eta=1.0,
        x_growth=2.0,
        osgood=True,
        lipschitz_on=lambda hi: 2.0 * hi,
    )
)

# b(x) = x ln(e+x)^2: the borderline case, superlinear by a bare
# logarithmic margin yet still summable
LOGSQUARE = _register(
    make_drift(
        "logsquare",
        "x * ln(e + x) ** 2",
        eta=0.5,
        x_growth=2.0,
        osgood=True,
    )
)

LINEAR2X = _register(
    make_drift(
        "linear2x",
        "2 * x",
        eta=1.0,
        x_growth=1.0,
        osgood=False,
        lipschitz_on=lambda hi: 2.0,
    )
)

ZERO = _register(
    DriftSpec(
        name="zero",
        b=_zero_b,
        eta=1.0,
        x_growth=math.inf,  # growth clause vacuous: the control case
        lipschitz_on=lambda hi: 0.0,
        osgood=None,
        expr="0",
    )
)


def get_drift(name: str) -> DriftSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown drift {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def registered_drifts() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


# ---------------------------------------------------------------------------
# derived quantities


def eval_f(drift: DriftSpec, x):
    """The superlinearity gauge f(x) = b(x) / (4x); domain x > 0."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr <= 0.0):
        raise ValueError("f(x) requires x > 0")
    out = np.asarray(drift.b(arr), dtype=np.float64) / (4.0 * arr)
    return float(out) if np.ndim(x) == 0 else out


def _gauge_reciprocals(drift: DriftSpec, k_lo: int, k_hi: int) -> np.ndarray:
    ks = np.arange(k_lo, k_hi + 1)
    f = eval_f(drift, 2.0 ** ks)
    f = np.atleast_1d(f)
    if np.any(f <= 0.0):
        raise ValueError(
            f"drift {drift.name!r}: gauge f(2^k) must be positive on k in "
            f"[{k_lo}, {k_hi}]"
        )
    return 1.0 / f


def osgood_partial_sum(drift: DriftSpec, K: int) -> float:
    """Partial sum over k = 0..K of 1 / f(2^k); non-decreasing in K."""
    if K < 0:
        raise ValueError("K must be a nonnegative integer")
    return float(_gauge_reciprocals(drift, 0, K).sum())


def osgood_series_converges(drift: DriftSpec, threshold: float = 0.05) -> bool:
    """Numerical convergence probe via a dyadic block sum.

    Sums the terms 1/f(2^k) over k in (500, 1000] and compares against
    ``threshold``: a summable series has a vanishing block there (the
    borderline logsquare drift contributes ~8e-3), while any series with
    harmonic-or-slower decay contributes >= 4.  A probe, not a proof; it
    separates the regimes this package registers by several orders of
    magnitude.
    """
    with np.errstate(over="ignore"):
        block = _gauge_reciprocals(drift, 501, 1000)
    return bool(block.sum() < threshold)


def osgood_integral_bracket(drift: DriftSpec, K: int) -> tuple[float, float]:
    """Two-sided dyadic estimate of the integral of 1/b over [1, 2^(K+1)].

    Returns (lower, upper) with
        lower = (1/8) * sum_{k=1..K+1} 1 / f(2^k)
        upper = (1/4) * sum_{k=0..K}   1 / f(2^k)
    so the integral is pinned between constant multiples of the same
    series that decides explosion.
    """
    if K < 0:
        raise ValueError("K must be a nonnegative integer")
    recips = _gauge_reciprocals(drift, 0, K + 1)
    lower = 0.125 * float(recips[1:].sum())
    upper = 0.25 * float(recips[:-1].sum())
    return lower, upper


# ---------------------------------------------------------------------------
# growth constants


@dataclass(frozen=True)
class GrowthConstants:
    """Constants (K_b, n0) such that for every n >= n0 and x >= K_b

        exp(-1/n) * b(x) - x >= b(x) / n0.

    The left side is increasing in n, so validation only ever needs the
    single case n = n0.
    """

    K_b: float
    n0: int


def _growth_gap(drift: DriftSpec, x: np.ndarray, n0: int) -> np.ndarray:
    bx = np.asarray(drift.b(x), dtype=np.float64)
    return math.exp(-1.0 / n0) * bx - x - bx / n0


def validate_growth_constants(
    drift: DriftSpec,
    gc: GrowthConstants,
    search_cap: float,
    points_per_octave: int = 80,
) -> bool:
    """Check the GrowthConstants inequality on a geometric grid of
    [K_b, search_cap]; also covers K_b and search_cap themselves."""
    if gc.K_b > search_cap:
        return False
    n_pts = max(2, int(math.ceil(points_per_octave * math.log2(search_cap / gc.K_b))) + 1)
    grid = np.geomspace(gc.K_b, search_cap, n_pts)
    return bool(np.all(_growth_gap(drift, grid, gc.n0) >= 0.0))


def find_growth_constants(
    drift: DriftSpec,
    search_cap: float,
    n0_cap: int = 64,
) -> GrowthConstants:
    """Smallest n0 >= 2 (and its threshold K_b) passing the growth check.

    The search grid is geometric with 8 points per octave starting at 1;
    candidates re-validate on a 10x denser grid before being returned.
    Raises GrowthConstantsNotFound when nothing validates with
    K_b <= search_cap, which is the verdict for drifts lacking genuinely
    more-than-(1+eta)-linear growth headroom (b(x) = x, the zero drift).
    """
    if search_cap < 1.0:
        raise ValueError("search_cap must be >= 1")
    k_hi = int(math.ceil(8.0 * math.log2(search_cap)))
    grid = np.minimum(2.0 ** (np.arange(0, k_hi + 1) / 8.0), search_cap)
    for n0 in range(2, n0_cap + 1):
        ok = _growth_gap(drift, grid, n0) >= 0.0
        # suffix scan: holds at every grid point from index i onward
        holds_from = np.logical_and.accumulate(ok[::-1])[::-1]
        for i in np.flatnonzero(holds_from):
            cand = GrowthConstants(K_b=float(grid[i]), n0=n0)
            if validate_growth_constants(drift, cand, search_cap):
                return cand
    raise GrowthConstantsNotFound(
        f"drift {drift.name!r}: no growth constants with K_b <= {search_cap}"
    )
