"""Shared numerical kernels.

Bracketed root finding and adaptive quadrature are thin, contract-enforcing
wrappers around SciPy's Brent solver and QUADPACK (adaptive Gauss-Kronrod);
the rest (compensated summation, KS statistic, quantiles, seeded stream
derivation) is implemented here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .errors import BracketError, ConvergenceError, QuadratureError

MAX_ROOT_ITER = 200


@dataclass(frozen=True)
class RootBracket:
    """An interval [lo, hi] whose endpoints straddle a root.

    Invariant: lo < hi and f_lo * f_hi <= 0.
    """

    lo: float
    hi: float
    f_lo: float
    f_hi: float

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise BracketError(f"bracket requires lo < hi, got [{self.lo}, {self.hi}]")
        if self.f_lo * self.f_hi > 0:
            raise BracketError(
                f"no sign change on [{self.lo}, {self.hi}]: "
                f"f(lo)={self.f_lo}, f(hi)={self.f_hi}"
            )

    @classmethod
    def from_function(cls, f: Callable[[float], float], lo: float, hi: float) -> "RootBracket":
        return cls(lo, hi, f(lo), f(hi))


def expand_bracket(f: Callable[[float], float], x0: float, factor: float = 2.0,
                   max_steps: int = 80) -> RootBracket:
    """Expand geometrically from ``x0`` until a sign change is bracketed.

    Intended for monotone functions; raises BracketError if the expansion
    never straddles a root.
    """
    step = max(abs(x0), 1e-8) * 0.5
    lo = hi = x0
    f0 = f(x0)
    f_lo = f_hi = f0
    for _ in range(max_steps):
        if f_lo * f_hi <= 0 and lo < hi:
            return RootBracket(lo, hi, f_lo, f_hi)
        step *= factor
        if f0 > 0:
            lo = x0 - step
            f_lo = f(lo)
        else:
            hi = x0 + step
            f_hi = f(hi)
        # widen the other side too, in case x0 sits on the wrong slope
        if f_lo * f_hi > 0:
            if f0 > 0:
                hi = x0 + step
                f_hi = f(hi)
            else:
                lo = x0 - step
                f_lo = f(lo)
    raise BracketError(f"no sign change found expanding from x0={x0}")


def find_root(f: Callable[[float], float], bracket: RootBracket | tuple[float, float],
              tol: float = 1e-12) -> float:
    """Locate a root of ``f`` inside a sign-change bracket.

    Brent's method (bisection/secant/inverse-quadratic hybrid with guaranteed
    bracket maintenance). Deterministic; the returned point satisfies a final
    bracket width <= ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if isinstance(bracket, tuple):
        bracket = RootBracket.from_function(f, *bracket)
    if bracket.f_lo == 0.0:
        return bracket.lo
    if bracket.f_hi == 0.0:
        return bracket.hi
    try:
        root, res = optimize.brentq(
            f, bracket.lo, bracket.hi, xtol=tol, rtol=4 * np.finfo(float).eps,
            maxiter=MAX_ROOT_ITER, full_output=True, disp=False,
        )
    except ValueError as exc:  # scipy re-checks the sign condition
        raise BracketError(str(exc)) from exc
    if not res.converged:
        raise ConvergenceError(
            f"root search exceeded {MAX_ROOT_ITER} iterations (best x={root})"
        )
    return float(root)


def adaptive_quadrature(f: Callable[[float], float], a: float, b: float,
                        abs_tol: float = 1e-10, limit: int = 500) -> float:
    """Integrate ``f`` over [a, b] to an estimated absolute error <= abs_tol.

    Raises QuadratureError (carrying the best estimate and the achieved error
    bound) when the subdivision limit is reached without convergence.
    """
    if not (a < b):
        raise ValueError(f"integration bounds require a < b, got [{a}, {b}]")
    value, err = integrate.quad(f, a, b, epsabs=abs_tol, epsrel=1e-12, limit=limit)
    if not math.isfinite(value) or err > max(abs_tol, 1e-14 * abs(value)):
        raise QuadratureError(
            f"quadrature on [{a}, {b}] achieved {err:.3g} > requested {abs_tol:.3g}",
            estimate=value, achieved=err,
        )
    return value


class CompensatedSum:
    """Neumaier-compensated running sum; works elementwise on arrays too."""

    def __init__(self, like: float | np.ndarray = 0.0):
        self._s = np.zeros_like(like, dtype=float) if isinstance(like, np.ndarray) else 0.0
        self._c = np.zeros_like(like, dtype=float) if isinstance(like, np.ndarray) else 0.0

    def add(self, x):
        t = self._s + x
        if isinstance(t, np.ndarray):
            self._c = self._c + np.where(
                np.abs(self._s) >= np.abs(x), (self._s - t) + x, (x - t) + self._s
            )
        else:
            self._c += ((self._s - t) + x) if abs(self._s) >= abs(x) else ((x - t) + self._s)
        self._s = t

    @property
    def total(self):
        return self._s + self._c


def compensated_sum(values: Iterable[float]) -> float:
    """Exactly-rounded sum of a finite iterable of floats."""
    return math.fsum(values)


def normal_quantile(p: float) -> float:
    """Standard normal inverse CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    return float(special.ndtri(p))


def chi2_quantile_1df(p: float) -> float:
    """Quantile of the chi-square distribution with one degree of freedom.

    Uses the squared-normal relation: quantile = (Phi^-1((1+p)/2))^2.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    return normal_quantile((1.0 + p) / 2.0) ** 2


def ks_statistic(sample: Sequence[float] | np.ndarray,
                 cdf: Callable[[np.ndarray], np.ndarray],
                 cdf_left: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """One-sample Kolmogorov-Smirnov statistic sup_x |F_n(x) - F(x)|.

    Both one-sided gaps are evaluated at the sample points. For a continuous
    F this is the classical statistic. When F has atoms at sample points, the
    lower gap needs the left limit of F there; pass it as ``cdf_left``
    (defaults to ``cdf``, the continuous case).
    """
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("sample must be nonempty")

    def evaluate(f):
        fx = np.asarray(f(x), dtype=float)
        if fx.shape != x.shape:  # scalar-only cdf callables
            fx = np.array([f(v) for v in x], dtype=float)
        return fx

    fx = evaluate(cdf)
    fx_left = fx if cdf_left is None else evaluate(cdf_left)
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - fx)
    d_minus = np.max(fx_left - (i - 1) / n)
    return float(max(d_plus, d_minus))


def ks_pvalue(statistic: float, n: int) -> float:
    """Asymptotic two-sided KS p-value with the Stephens small-sample factor."""
    en = math.sqrt(n)
    return float(special.kolmogorov((en + 0.12 + 0.11 / en) * statistic))


@dataclass(frozen=True)
class RandomStream:
    """Reproducible random stream keyed by (seed, stream_id).

    Identical keys give bit-identical sequences; distinct ``stream_id`` values
    give statistically independent streams (PCG64 seeded through
    ``SeedSequence(entropy=seed, spawn_key=(stream_id,))``). Streams are
    single-owner once a generator is created; deriving new streams from a
    master seed is safe concurrently.
    """

    seed: int
    stream_id: int = 0

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def generators(self, n: int) -> list[np.random.Generator]:
        """n independent child generators (e.g. arrivals vs. segment draws)."""
        return [np.random.Generator(np.random.PCG64(ss)) for ss in self.seed_sequence().spawn(n)]
