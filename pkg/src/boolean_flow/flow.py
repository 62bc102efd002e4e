"""Total particle flow estimation.

Two estimators of the total number of particles A(t) behind N(t) observed
clumps: the unconditional count-based estimator N(t) e^(lam t0) (every clump
order has mean e^(lam t0)) and the clumpwise Bayes estimator summing the
conditional mean order E(K | Y = y) of each clump given its length.

The conditional order law under the deterministic-segment model involves the
probability p_n(u) that the largest division formed by n uniform points on
the unit interval does not exceed u; for t0 < y < 2 t0 the order is a
translated Poisson and the conditional mean is linear in y, with a jump of
lam t0 e^(-lam t0) / (1 - e^(-lam t0)) at y = 2 t0 and near-linearity beyond,
which the grid interpolator exploits.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import special

from . import model
from .errors import ConvergenceError, DataError
from .estimate import ClumpSample

# terms of the conditional-order series are summed until below this fraction
# of the running sum (past the mode), per-term positive so no cancellation
SERIES_RTOL = 1e-12
MAX_SERIES_TERMS = 10_000
# alternating binomial sums switch to log/sign form above this order
EXACT_COMB_MAX_N = 30


def expected_total_flow(lam: float, t: float) -> float:
    """Mean total flow lam * t over a known observation period."""
    if lam < 0 or t < 0:
        raise ValueError("lam and t must be nonnegative")
    return lam * t


def flow_from_lengths(lam: float, sample: ClumpSample) -> float:
    """Total-flow estimate lam * sum(Y_i) + N(t) for unknown t.

    Equals N(t) e^(lam t0) exactly when lam solves the moment estimating
    equation, since then e^(lam mu) = 1 + lam * ybar.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return lam * sample.total_length() + sample.n


def a_hat_1(lam: float, n: int, t0: float) -> float:
    """Unconditional total-flow estimator N(t) e^(lam t0)."""
    if not math.isfinite(lam):
        raise ValueError("lam must be finite")
    if n < 0 or t0 <= 0:
        raise ValueError("n must be >= 0 and t0 > 0")
    return n * math.exp(lam * t0)


def _largest_division_mp(n: int, u: float, dps: int) -> float:
    with mpmath.workdps(dps):
        uu = mpmath.mpf(u)
        total = mpmath.mpf(0)
        for j in range(int(mpmath.floor(1 / uu)) + 1):
            base = 1 - j * uu
            if base <= 0:
                continue
            total += (-1) ** j * math.comb(n + 1, j) * base ** n
        return float(total)


def _largest_division_log_bound(n: int, u: float) -> float:
    """log of an upper bound on p_n(u), from negative association of spacings.

    The n+1 spacings are negatively associated, so P(all <= u) is at most
    the product of the marginals (1 - (1-u)^n)^(n+1).
    """
    if u >= 1.0 or n == 0:
        return 0.0
    return (n + 1) * math.log1p(-((1.0 - u) ** n))


def largest_division_prob(n: int, u: float) -> float:
    """P(largest division of the unit interval by n uniform points <= u).

    Zero below the pigeonhole bound u < 1/(n+1), one for u >= 1. For n above
    30 the alternating binomial sum is evaluated in log-magnitude/sign form
    with compensated summation and falls back to extended precision when the
    cancellation would spoil the result.
    """
    if n < 0 or n != int(n):
        raise ValueError("n must be a nonnegative integer")
    if u <= 0:
        raise ValueError("u must be positive")
    if u >= 1.0:
        return 1.0
    if u < 1.0 / (n + 1):
        return 0.0
    jmax = int(math.floor(1.0 / u + 1e-12))
    if n <= EXACT_COMB_MAX_N:
        terms = []
        for j in range(jmax + 1):
            base = 1.0 - j * u
            if base <= 0.0:
                continue
            terms.append((-1) ** j * math.comb(n + 1, j) * base ** n)
        total = math.fsum(terms)
        abs_total = math.fsum(map(abs, terms))
        # the terms carry ~n*eps relative error each, amplified by cancellation
        cancel = abs_total / max(abs(total), np.finfo(float).tiny)
        if (n + 1) * np.finfo(float).eps * cancel > model.CANCEL_RTOL or total < 0.0:
            dps = 40 + int(math.log10(max(cancel, 1.0)))
            return min(max(_largest_division_mp(n, u, dps), 0.0), 1.0)
        return min(max(total, 0.0), 1.0)

    j = np.arange(jmax + 1)
    base = 1.0 - j * u
    keep = base > 0.0
    j, base = j[keep], base[keep]
    logs = (
        special.gammaln(n + 2) - special.gammaln(j + 1) - special.gammaln(n + 2 - j)
        + n * np.log(base)
    )
    signs = np.where(j % 2 == 1, -1.0, 1.0)
    m = float(logs.max())
    scaled = signs * np.exp(logs - m)
    total = math.fsum(scaled)
    abs_total = math.fsum(np.abs(scaled))
    cancel = abs_total / max(abs(total), np.finfo(float).tiny)
    if (n + 1) * np.finfo(float).eps * cancel > model.CANCEL_RTOL or total < 0.0:
        dps = 40 + int(math.log10(max(cancel, 1.0)))
        return min(max(_largest_division_mp(n, u, dps), 0.0), 1.0)
    return min(max(math.exp(m) * total, 0.0), 1.0)


@dataclass(frozen=True)
class ConditionalOrderDist:
    """Law of the clump order K given the clump length Y = y.

    Supported on k >= s+1 where s is the number of whole segment lengths in
    y (k = 1 exactly at y = t0, the singleton atom).
    """

    y: float
    lam: float
    t0: float

    def __post_init__(self):
        if self.y < self.t0 * (1.0 - model.BOUNDARY_RTOL):
            raise ValueError(f"clump length {self.y} below segment length {self.t0}")

    @property
    def is_singleton(self) -> bool:
        return self.y <= self.t0 * (1.0 + model.BOUNDARY_RTOL)

    @property
    def s(self) -> int:
        return 1 if self.is_singleton else int(model.whole_segments(self.y, self.t0))

    def pmf(self, k: int) -> float:
        if k < 1 or k != int(k):
            raise ValueError("order k must be a positive integer")
        if self.is_singleton:
            return 1.0 if k == 1 else 0.0
        if k == 1:
            return 0.0
        w = self.y - self.t0
        log_a = (
            math.log(self.lam) - self.lam * self.y
            - math.log(model.clump_density(self.y, self.lam, self.t0))
        )
        p = largest_division_prob(k - 2, self.t0 / w)
        if p == 0.0:
            return 0.0
        log_term = (k - 2) * math.log(self.lam * w) - special.gammaln(k - 1) if k > 2 else 0.0
        return math.exp(log_a + log_term) * p

    def mean(self) -> float:
        if self.is_singleton:
            return 1.0
        s = self.s
        w = self.y - self.t0
        if s == 1:
            # translated Poisson: K - 2 ~ Poisson(lam * (y - t0))
            return 2.0 + self.lam * w
        log_a = (
            math.log(self.lam) - self.lam * self.y
            - math.log(model.clump_density(self.y, self.lam, self.t0))
        )
        u = self.t0 / w
        lw = self.lam * w
        # the mean is at least s+1, so terms below floor_scale never matter
        floor_scale = SERIES_RTOL * (s + 1) / 100.0
        total = 0.0
        for k in range(s + 1, s + 1 + MAX_SERIES_TERMS):
            log_poisson = log_a + (k - 2) * math.log(lw) - special.gammaln(k - 1)
            cap = math.log(k) + log_poisson + _largest_division_log_bound(k - 2, u)
            if cap < math.log(floor_scale):
                if (k - 1) > lw and total > 0.0:
                    return total
                continue
            p = largest_division_prob(k - 2, u)
            if p > 0.0:
                term = k * math.exp(log_poisson) * p
                total += term
                if (k - 1) > lw and term < SERIES_RTOL * total:
                    return total
        raise ConvergenceError(
            f"conditional-order series did not converge within {MAX_SERIES_TERMS} terms"
        )


def conditional_order_pmf(k: int, y: float, lam: float, t0: float) -> float:
    """Pr(K = k | Y = y) under the deterministic-segment model."""
    return ConditionalOrderDist(y, lam, t0).pmf(k)


def conditional_order_mean(y: float, lam: float, t0: float) -> float:
    """E(K | Y = y); exactly 1 at y = t0, 2 + lam (y - t0) on (t0, 2 t0)."""
    return ConditionalOrderDist(y, lam, t0).mean()


class ConditionalOrderInterpolator:
    """Piecewise-linear interpolant of E(K | Y = y) on a knot grid.

    Knots are laid within each interval (j t0, (j+1) t0) separately, so the
    interpolant never bridges the jump at 2 t0 (nor the smaller kinks at
    higher multiples). It is exact at its knots and exact everywhere on
    (t0, 2 t0), where the conditional mean is linear.
    """

    def __init__(self, lam: float, t0: float, grid_step: float | None = None):
        if grid_step is None:
            grid_step = t0 / 20.0
        if grid_step <= 0:
            raise ValueError("grid_step must be positive")
        self.lam = lam
        self.t0 = t0
        self.grid_step = grid_step
        self._knots: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _interval(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        if j not in self._knots:
            nudge = 1e-9 * self.t0
            m = max(int(math.ceil(self.t0 / self.grid_step)), 1) + 1
            xs = np.linspace(j * self.t0 + nudge, (j + 1) * self.t0 - nudge, m)
            vals = np.array([conditional_order_mean(x, self.lam, self.t0) for x in xs])
            self._knots[j] = (xs, vals)
        return self._knots[j]

    def __call__(self, y: np.ndarray | float) -> np.ndarray | float:
        arr = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty_like(arr)
        segs = np.atleast_1d(model.whole_segments(arr, self.t0))
        for j in np.unique(segs):
            sel = segs == j
            xs, vals = self._interval(int(j))
            out[sel] = np.interp(arr[sel], xs, vals)
        if np.ndim(y) == 0:
            return float(out[0])
        return out


def conditional_order_mean_interp(y, lam: float, t0: float,
                                  grid_step: float | None = None):
    """Interpolated E(K | Y = y); see ConditionalOrderInterpolator."""
    return ConditionalOrderInterpolator(lam, t0, grid_step)(y)


@dataclass
class FlowReport:
    """Both total-flow estimates for one sample, with per-clump detail."""

    a_hat_1: float
    a_hat_b: float
    per_clump_means: np.ndarray = field(repr=False)
    lambda_used: float
    interpolated: bool
    n_below_t0: int = 0

    def to_dict(self) -> dict:
        return {
            "a_hat_1": self.a_hat_1,
            "a_hat_b": self.a_hat_b,
            "lambda_used": self.lambda_used,
            "interpolated": self.interpolated,
            "n_clumps": int(self.per_clump_means.size),
            "n_below_t0": self.n_below_t0,
        }

    def write_per_clump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["conditional_mean_order"])
            for v in self.per_clump_means:
                writer.writerow([f"{v:.12g}"])


def a_hat_bayes(sample: ClumpSample, lam: float, t0: float,
                use_interp: bool = False,
                singleton_rtol: float | None = None,
                clamp_below: bool = False,
                grid_step: float | None = None) -> FlowReport:
    """Bayes total-flow estimator: sum of per-clump conditional mean orders.

    Lengths within ``singleton_rtol`` of t0 (default: the sample's own
    singleton window) contribute exactly 1. Lengths below that window are
    invalid under the deterministic-segment model and raise DataError unless
    ``clamp_below`` is set, in which case they also contribute 1 (their count
    is reported); data with segment-length noise needs this.

    The per-clump means are accumulated with exact compensated summation in
    a fixed order, so the result is independent of any parallel evaluation.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if sample.lengths is None:
        raise DataError("Bayes flow estimator requires raw clump lengths")
    if singleton_rtol is None:
        singleton_rtol = sample.singleton_rtol
    y = sample.lengths
    below = y < t0 * (1.0 - singleton_rtol)
    if np.any(below) and not clamp_below:
        raise DataError(
            f"{int(below.sum())} clump lengths below t0; invalid under the "
            "deterministic-segment model (pass clamp_below=True to count them as singletons)"
        )
    singleton = y <= t0 * (1.0 + singleton_rtol)
    means = np.ones_like(y)
    multi = ~singleton
    if np.any(multi):
        if use_interp:
            interp = ConditionalOrderInterpolator(lam, t0, grid_step)
            means[multi] = interp(y[multi])
        else:
            means[multi] = [conditional_order_mean(v, lam, t0) for v in y[multi]]
    total = math.fsum(means)
    return FlowReport(
        a_hat_1=a_hat_1(lam, sample.n, t0),
        a_hat_b=total,
        per_clump_means=means,
        lambda_used=lam,
        interpolated=use_interp,
        n_below_t0=int(below.sum()),
    )


def rrmse(estimates, truths) -> float:
    """Root mean squared error relative to the mean true total flow."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape or est.size == 0:
        raise ValueError("estimates and truths must be nonempty and parallel")
    mean_truth = tru.mean()
    if mean_truth <= 0:
        raise ValueError("mean true flow must be positive")
    return float(np.sqrt(np.mean((est - tru) ** 2)) / mean_truth)


def relative_bias(estimates, truths) -> float:
    """(mean estimate - mean truth) / mean truth."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape or est.size == 0:
        raise ValueError("estimates and truths must be nonempty and parallel")
    return float((est.mean() - tru.mean()) / tru.mean())
