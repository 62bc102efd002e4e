"""Probability laws of the linear Boolean counter model.

Particles arrive as a Poisson process with intensity ``lam`` and each blocks
the sensor for a segment length drawn from :class:`SegmentLaw` (a fixed
``t0`` or a normal law with known mean). Overlapping blockages merge into
clumps; this module provides the clump-length distribution under the
deterministic-segment model (point mass at ``t0`` plus a piecewise-smooth
continuous part), its moments, the renewal moments of the clump count, the
geometric law of clump orders, and the Laplace transform of the clump length
under a general segment law.

The continuous clump-length density is an alternating series whose terms can
dwarf the result far in the tail. Terms are therefore evaluated in
log-magnitude/sign form and accumulated with compensated summation; whenever
the estimated cancellation error exceeds 1e-8 relative, the affected points
are recomputed in extended-precision arithmetic (mpmath).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy import special

from .errors import NumericsError
from .numerics import CompensatedSum, adaptive_quadrature

# relative tolerance used to decide that y sits exactly on a multiple of t0
BOUNDARY_RTOL = 1e-12
# estimated relative cancellation above this triggers the mpmath fallback
CANCEL_RTOL = 1e-8


@dataclass(frozen=True)
class SegmentLaw:
    """Law of a single particle's passage (segment) length.

    ``sd == 0`` is the deterministic model with segment length ``mean``;
    ``sd > 0`` is the random model with normally distributed segments
    (truncated at zero when sampling). The two coincide as ``sd -> 0``.
    """

    mean: float
    sd: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.mean) and self.mean > 0):
            raise ValueError(f"segment mean must be positive, got {self.mean}")
        if not (math.isfinite(self.sd) and self.sd >= 0):
            raise ValueError(f"segment sd must be nonnegative, got {self.sd}")

    @classmethod
    def deterministic(cls, t0: float) -> "SegmentLaw":
        return cls(mean=t0, sd=0.0)

    @classmethod
    def normal(cls, mu: float, sigma: float) -> "SegmentLaw":
        return cls(mean=mu, sd=sigma)

    @property
    def is_deterministic(self) -> bool:
        return self.sd == 0.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n segment lengths; nonpositive normal draws are resampled."""
        if self.is_deterministic:
            return np.full(n, self.mean)
        s = rng.normal(self.mean, self.sd, n)
        while True:
            bad = np.flatnonzero(s <= 0.0)
            if bad.size == 0:
                return s
            s[bad] = rng.normal(self.mean, self.sd, bad.size)

    def cdf(self, x: float) -> float:
        if self.is_deterministic:
            return float(x >= self.mean)
        return float(special.ndtr((x - self.mean) / self.sd))

    def integrated_sf(self, t: float) -> float:
        """Integral of the survival function from t to infinity."""
        if self.is_deterministic:
            return max(self.mean - t, 0.0)
        z = (t - self.mean) / self.sd
        # int_z^inf (1 - Phi) = phi(z) - z * (1 - Phi(z))
        phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        return self.sd * (phi - z * float(special.ndtr(-z)))


@dataclass(frozen=True)
class ModelParams:
    """Flow intensity, segment-length law, and optional observation horizon."""

    lam: float
    segments: SegmentLaw
    horizon_t: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"flow intensity must be positive, got {self.lam}")
        if self.horizon_t is not None and not (math.isfinite(self.horizon_t) and self.horizon_t > 0):
            raise ValueError(f"horizon must be positive, got {self.horizon_t}")


def _validate_lam_t0(lam: float, t0: float) -> None:
    if not (math.isfinite(lam) and lam > 0):
        raise ValueError(f"lam must be positive and finite, got {lam}")
    if not (math.isfinite(t0) and t0 > 0):
        raise ValueError(f"t0 must be positive and finite, got {t0}")


def whole_segments(y: np.ndarray | float, t0: float) -> np.ndarray | int:
    """Largest integer s with t0 < y/s, tolerant at multiples of t0.

    When y/t0 is an integer within 1e-12 relative, the boundary resolves
    downward (s = y/t0 - 1), which makes the density left-continuous at the
    kink points.
    """
    r = np.asarray(y, dtype=float) / t0
    nearest = np.rint(r)
    tie = np.abs(r - nearest) <= BOUNDARY_RTOL * np.abs(r)
    s = np.where(tie, nearest - 1, np.floor(r)).astype(int)
    if s.ndim == 0:
        return int(s)
    return s


def singleton_mass(lam: float, t0: float) -> float:
    """Probability that a clump consists of a single particle: exp(-lam*t0)."""
    if not math.isfinite(lam) or not (math.isfinite(t0) and t0 > 0):
        raise ValueError("lam and t0 must be finite, t0 positive")
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    return math.exp(-lam * t0)


def _bracket_mp(y: float, lam: float, t0: float, s: int, kind: str, dps: int) -> float:
    """Extended-precision evaluation of the density or CDF series bracket."""
    with mpmath.workdps(dps):
        lam_mp = mpmath.mpf(lam)
        y_mp = mpmath.mpf(y)
        t0_mp = mpmath.mpf(t0)
        if kind == "density":
            total = mpmath.mpf(1)
        else:
            total = 1 + lam_mp * (y_mp - t0_mp)
        for j in range(1, s):
            u = y_mp - (j + 1) * t0_mp
            if u < 0:
                u = mpmath.mpf(0)
            p = lam_mp * u
            e = mpmath.exp(-j * lam_mp * t0_mp)
            if kind == "density":
                term = e * p ** (j - 1) * (p + j) / mpmath.factorial(j)
            else:
                term = e * (p ** (j + 1) / (j + 1) + p ** j) / mpmath.factorial(j)
            total += term if j % 2 == 0 else -term
        return float(total)


def _bracket_many(y: np.ndarray, lam: float, t0: float, kind: str) -> np.ndarray:
    """Series bracket of the density ('density') or CDF ('cdf') at y > t0.

    Vectorized log-magnitude/sign evaluation with elementwise compensated
    summation; entries whose estimated cancellation exceeds CANCEL_RTOL are
    recomputed with mpmath.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    s = np.atleast_1d(whole_segments(y, t0))
    jmax = int(s.max()) - 1
    lead = np.zeros_like(y) if kind == "density" else np.log1p(lam * (y - t0))

    if jmax < 1:
        return np.exp(lead)

    lgam = special.gammaln(np.arange(2, jmax + 2))  # log j! for j = 1..jmax

    def log_terms(j: int) -> tuple[np.ndarray, np.ndarray]:
        active = j <= s - 1
        u = np.where(active, np.maximum(y - (j + 1) * t0, 0.0), 1.0)
        p = lam * u
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        if kind == "density":
            # p^(j-1) * (p+j); p == 0 contributes only at j == 1
            lt = (j - 1) * logp + np.log(p + j) - j * lam * t0 - lgam[j - 1]
            if j == 1:
                lt = np.where(p == 0.0, -lam * t0, lt)
        else:
            # p^j * (1 + p/(j+1))
            lt = j * logp + np.log1p(p / (j + 1)) - j * lam * t0 - lgam[j - 1]
            lt = np.where(p == 0.0, -np.inf, lt)
        return np.where(active, lt, -np.inf), active

    log_max = lead.copy()
    for j in range(1, jmax + 1):
        lt, _ = log_terms(j)
        np.maximum(log_max, lt, out=log_max)

    total = CompensatedSum(y)
    abs_total = CompensatedSum(y)
    lead_scaled = np.exp(lead - log_max)
    total.add(lead_scaled)
    abs_total.add(lead_scaled)
    for j in range(1, jmax + 1):
        lt, _ = log_terms(j)
        mag = np.exp(lt - log_max)
        total.add(-mag if j % 2 else mag)
        abs_total.add(mag)

    tot = total.total
    cancel = np.abs(abs_total.total) / np.maximum(np.abs(tot), np.finfo(float).tiny)
    bad = (np.finfo(float).eps * cancel > CANCEL_RTOL) | (tot <= 0.0)
    result = np.exp(log_max) * tot
    for i in np.flatnonzero(bad):
        dps = 40 + int(math.log10(max(cancel[i], 1.0)))
        result[i] = _bracket_mp(float(y[i]), lam, t0, int(s[i]), kind, dps)
        if result[i] <= 0.0:
            raise NumericsError(
                f"series bracket not positive at y={y[i]} even at {dps} digits"
            )
    return result


def clump_density(y: np.ndarray | float, lam: float, t0: float) -> np.ndarray | float:
    """Continuous part of the clump-length density at y > t0.

    The clump-length law has an atom of weight exp(-lam*t0) at y = t0
    (see :func:`singleton_mass`); this function evaluates the density of the
    continuous part, normalized so that atom + integral equals one. It is
    constant at ``lam * exp(-lam*t0)`` on (t0, 2*t0) and nonincreasing
    beyond 2*t0.

    Parameters
    ----------
    y : float or array
        Clump length(s), each strictly greater than t0.
    lam : float
        Flow intensity.
    t0 : float
        Deterministic segment length.
    """
    _validate_lam_t0(lam, t0)
    arr = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("clump lengths must be finite")
    if np.any(arr <= t0 * (1.0 + BOUNDARY_RTOL)):
        raise ValueError(
            "density is defined for y > t0 only; query the point mass via singleton_mass"
        )
    out = lam * math.exp(-lam * t0) * _bracket_many(arr, lam, t0, "density")
    if np.ndim(y) == 0:
        return float(out[0])
    return out


def clump_cdf(y: np.ndarray | float, lam: float, t0: float,
              method: str = "analytic") -> np.ndarray | float:
    """Clump-length CDF, including the atom at t0.

    ``method='analytic'`` evaluates the exact piecewise antiderivative of the
    density series (fast, vectorized). ``method='quadrature'`` integrates the
    density piecewise on [j*t0, (j+1)*t0] with adaptive Gauss-Kronrod panels
    (densities are smooth within each panel) and exists as an independent
    cross-check of the analytic route.
    """
    _validate_lam_t0(lam, t0)
    arr = np.atleast_1d(np.asarray(y, dtype=float))
    if method == "analytic":
        out = np.zeros_like(arr)
        atom_edge = t0 * (1.0 - BOUNDARY_RTOL)
        at_or_above = arr >= atom_edge
        near_t0 = at_or_above & (arr <= t0 * (1.0 + BOUNDARY_RTOL))
        out[near_t0] = math.exp(-lam * t0)
        above = at_or_above & ~near_t0
        if np.any(above):
            out[above] = math.exp(-lam * t0) * _bracket_many(arr[above], lam, t0, "cdf")
        np.clip(out, 0.0, 1.0, out=out)
    elif method == "quadrature":
        out = np.array([_cdf_quadrature(v, lam, t0) for v in arr])
    else:
        raise ValueError(f"unknown method {method!r}")
    if np.ndim(y) == 0:
        return float(out[0])
    return out


def _cdf_quadrature(y: float, lam: float, t0: float, abs_tol: float = 1e-11) -> float:
    if y < t0 * (1.0 - BOUNDARY_RTOL):
        return 0.0
    total = math.exp(-lam * t0)
    j = 1
    while j * t0 < y * (1.0 - BOUNDARY_RTOL):
        a = j * t0
        b = min((j + 1) * t0, y)
        if b <= a:
            break
        total += adaptive_quadrature(lambda u: clump_density(u, lam, t0), a, b, abs_tol)
        j += 1
    return min(total, 1.0)


def clump_length_tail_bound(y: float, lam: float, t0: float) -> float:
    """Upper bound on P(Y > y): a clump of length y needs > y/t0 particles."""
    _validate_lam_t0(lam, t0)
    m = int(math.floor(y / t0))
    return float(-math.expm1(-lam * t0)) ** max(m, 0)


def clump_length_truncation(lam: float, t0: float, tol: float, moment: int = 0) -> float:
    """Point beyond which the tail of y^moment * f(y) contributes less than tol."""
    q = -math.expm1(-lam * t0)
    m = 1
    while True:
        # tail of E[Y^moment; Y > m*t0] <= sum_{k>=m} ((k+1) t0)^moment q^k
        tail = 0.0
        k = m
        term = ((k + 1) * t0) ** moment * q ** k
        while term > tol * (1 - q) * 1e-3 and k < m + 10000:
            tail += term
            k += 1
            term = ((k + 1) * t0) ** moment * q ** k
        tail += term / (1 - q)
        if tail < tol:
            return (m + 1) * t0
        m += max(1, m // 4)


def mean_clump_length(lam: float, mu: float) -> float:
    """Mean clump length (expm1(lam*mu))/lam; valid for any segment law.

    Extends continuously to mu at lam = 0 and is increasing in lam (it is
    also defined for negative lam, where estimating equations may probe).
    """
    if not (math.isfinite(mu) and mu > 0) or not math.isfinite(lam):
        raise ValueError("mu must be positive and lam finite")
    if lam == 0.0:
        return mu
    with np.errstate(over="ignore"):  # saturates to inf under bracket probing
        return float(np.expm1(lam * mu) / lam)


def _var_dsl_core(x: float) -> float:
    """e^(2x) - 2x e^x - 1, series-protected against cancellation near 0."""
    if abs(x) < 1e-3:
        return x ** 3 * (1.0 / 3.0 + x * (1.0 / 3.0 + x * 11.0 / 60.0))
    return math.exp(2 * x) - 2 * x * math.exp(x) - 1.0


def var_clump_length_dsl(lam: float, mu: float) -> float:
    """Clump-length variance under the deterministic segment model."""
    if not (math.isfinite(lam) and lam > 0):
        raise ValueError(f"lam must be positive, got {lam}")
    if not (math.isfinite(mu) and mu > 0):
        raise ValueError(f"mu must be positive, got {mu}")
    return _var_dsl_core(lam * mu) / lam ** 2


def var_clump_length_rsl(lam: float, law: SegmentLaw, abs_tol: float = 1e-10) -> float:
    """Clump-length variance for a general segment law.

    Evaluates 2/lam * e^(lam*mu) * int_0^inf (exp(lam * int_t^inf (1-G)) - 1) dt
    minus the squared mean, truncating the outer integral where the integrand
    falls below 1e-10 (located by a doubling search). The inner integral of
    the survival function is closed-form for both supported laws.
    """
    if not (math.isfinite(lam) and lam > 0):
        raise ValueError(f"lam must be positive, got {lam}")
    mu = law.mean

    def integrand(t: float) -> float:
        return float(np.expm1(lam * law.integrated_sf(t)))

    upper = mu if law.is_deterministic else mu + 8 * law.sd
    while integrand(upper) > 1e-10:
        upper *= 2.0
    outer = adaptive_quadrature(integrand, 0.0, upper, abs_tol)
    return 2.0 / lam * math.exp(lam * mu) * outer - mean_clump_length(lam, mu) ** 2


def laplace_transform_clump(s: float, lam: float, law: SegmentLaw) -> float:
    """Laplace transform of the clump length under a general segment law.

    gamma(s) = 1 + s/lam - (lam * int_0^inf exp(-s t - lam * int_0^t (1-G)) dt)^-1.
    At s = 0 the defining integral diverges and gamma -> 1; that limit is
    returned exactly. The numeric integral is split at a point T beyond which
    the inner integral has saturated at mu, where the tail is analytic.
    """
    if not (math.isfinite(lam) and lam > 0):
        raise ValueError(f"lam must be positive, got {lam}")
    if s < 0:
        raise ValueError(f"transform argument must be nonnegative, got {s}")
    if s == 0.0:
        return 1.0
    mu = law.mean
    T = mu if law.is_deterministic else mu + 12.0 * law.sd

    def integrand(t: float) -> float:
        # int_0^t (1-G) = mu - int_t^inf (1-G)
        return math.exp(-s * t - lam * (mu - law.integrated_sf(t)))

    head = adaptive_quadrature(integrand, 0.0, T, 1e-11)
    tail = math.exp(-lam * mu) * math.exp(-s * T) / s
    return 1.0 + s / lam - 1.0 / (lam * (head + tail))


def renewal_moments(lam: float, t0: float) -> tuple[float, float]:
    """Mean and variance of a spacing+clump renewal period.

    Returns (mu_R, sigma2_R) = (e^(lam t0)/lam, (e^(2 lam t0) - 2 lam t0
    e^(lam t0))/lam^2). The clump count over a horizon t then has
    E[N(t)] ~= t/mu_R and Var[N(t)] ~= sigma2_R t / mu_R^3.
    """
    _validate_lam_t0(lam, t0)
    x = lam * t0
    mu_r = math.exp(x) / lam
    sigma2_r = (math.exp(2 * x) - 2 * x * math.exp(x)) / lam ** 2
    return mu_r, sigma2_r


def clump_order_pmf(k: np.ndarray | int, lam: float, t0: float) -> np.ndarray | float:
    """Marginal law of the number of particles in a clump: geometric.

    Pr(K=k) = (1 - e^(-lam t0))^(k-1) e^(-lam t0) for k = 1, 2, ...;
    mean e^(lam t0), variance e^(2 lam t0) - e^(lam t0).
    """
    _validate_lam_t0(lam, t0)
    karr = np.asarray(k)
    if not np.issubdtype(karr.dtype, np.integer):
        raise ValueError("clump order k must be integer")
    if np.any(karr < 1):
        raise ValueError("clump order k must be >= 1")
    p = math.exp(-lam * t0)
    q = -math.expm1(-lam * t0)
    out = np.power(q, karr - 1) * p
    if np.ndim(k) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ClumpLengthDist:
    """Clump-length law under the deterministic segment model.

    A point mass of exp(-lam*t0) at t0 plus the continuous density of
    :func:`clump_density`; immutable and safe for concurrent use.
    """

    lam: float
    t0: float

    def __post_init__(self):
        _validate_lam_t0(self.lam, self.t0)

    def singleton_mass(self) -> float:
        return singleton_mass(self.lam, self.t0)

    def density(self, y):
        return clump_density(y, self.lam, self.t0)

    def cdf(self, y, method: str = "analytic"):
        return clump_cdf(y, self.lam, self.t0, method=method)

    def mean(self) -> float:
        return mean_clump_length(self.lam, self.t0)

    def var(self) -> float:
        return var_clump_length_dsl(self.lam, self.t0)

    def tail_bound(self, y: float) -> float:
        return clump_length_tail_bound(y, self.lam, self.t0)

    def truncation_point(self, tol: float, moment: int = 0) -> float:
        return clump_length_truncation(self.lam, self.t0, tol, moment)
