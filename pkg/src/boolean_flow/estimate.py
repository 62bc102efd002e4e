"""Point and interval estimation of flow intensity from observed clumps.

Three routes are provided, each as a plain function on :class:`ClumpSample`
and as a scikit-learn style estimator over raw length arrays:

* :func:`m_estimate` / :class:`MEstimator` -- moment estimator solving
  ybar = (e^(lam*mu) - 1)/lam; robust to segment-length heterogeneity, with
  sandwich standard errors (model-based and sample-variance based).
* :func:`mle_dsl` / :class:`BooleanMLE` -- maximum likelihood under the
  deterministic-segment partial likelihood (singleton point masses times
  multi-particle clump densities), with a likelihood-ratio interval.
* :func:`singleton_mom` / :class:`SingletonMoment` -- moment estimator from
  the observed singleton fraction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import model
from .errors import DataError, NumericsError
from .numerics import chi2_quantile_1df, expand_bracket, find_root, normal_quantile

# a length within this relative window above mu counts as a singleton
DEFAULT_SINGLETON_RTOL = 1e-6


def _check_lengths(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("clump lengths must be a nonempty 1-d array")
    if not np.all(np.isfinite(y)):
        raise ValueError("clump lengths must be finite")
    if np.any(y < 0):
        raise ValueError("clump lengths must be nonnegative")
    return y


@dataclass(frozen=True)
class ClumpSample:
    """Sufficient data for all estimators.

    ``lengths`` may be omitted when only the summary statistics are known
    (e.g. reproducing a published table); operations that need raw lengths
    raise DataError in that case. ``m1`` counts singletons, classified as
    lengths within ``singleton_rtol`` above ``mu`` (exact equality is
    meaningless in floating point and impossible with measurement noise).
    """

    n: int
    ybar: float
    s2y: float
    mu: float
    m1: int | None = None
    lengths: np.ndarray | None = field(default=None, repr=False)
    spacings: np.ndarray | None = field(default=None, repr=False)
    singleton_rtol: float = DEFAULT_SINGLETON_RTOL

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sample size must be >= 1")
        if not (math.isfinite(self.ybar) and self.ybar > 0):
            raise ValueError(f"mean clump length must be positive, got {self.ybar}")
        if not (math.isfinite(self.s2y) and self.s2y >= 0):
            raise ValueError(f"sample variance must be nonnegative, got {self.s2y}")
        if not (math.isfinite(self.mu) and self.mu > 0):
            raise ValueError(f"segment mean must be positive, got {self.mu}")
        if self.m1 is not None and not (0 <= self.m1 <= self.n):
            raise ValueError("singleton count must lie in [0, n]")
        if self.lengths is not None:
            y = _check_lengths(self.lengths)
            object.__setattr__(self, "lengths", y)
            if y.size != self.n:
                raise ValueError("n must equal the number of lengths")
            ybar = float(y.mean())
            s2y = float(y.var(ddof=1)) if y.size > 1 else 0.0
            if not math.isclose(ybar, self.ybar, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError("stored ybar does not match the lengths")
            if not math.isclose(s2y, self.s2y, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError("stored s2y does not match the lengths")
        if self.spacings is not None:
            object.__setattr__(self, "spacings", np.asarray(self.spacings, dtype=float))

    @classmethod
    def from_lengths(cls, lengths, mu: float, spacings=None,
                     singleton_rtol: float = DEFAULT_SINGLETON_RTOL) -> "ClumpSample":
        y = _check_lengths(lengths)
        m1 = int(np.count_nonzero(y <= mu * (1.0 + singleton_rtol)))
        return cls(
            n=y.size,
            ybar=float(y.mean()),
            s2y=float(y.var(ddof=1)) if y.size > 1 else 0.0,
            mu=mu,
            m1=m1,
            lengths=y,
            spacings=spacings,
            singleton_rtol=singleton_rtol,
        )

    @classmethod
    def from_moments(cls, n: int, ybar: float, s2y: float, mu: float,
                     m1: int | None = None) -> "ClumpSample":
        return cls(n=n, ybar=ybar, s2y=s2y, mu=mu, m1=m1)

    def total_length(self) -> float:
        return self.n * self.ybar


@dataclass
class EstimateReport:
    """Point estimate with optional standard errors and intervals."""

    method: str
    lambda_hat: float
    se_dsl: float | None = None
    se_g: float | None = None
    ci_wald: tuple[float, float] | None = None
    ci_lrt: tuple[float, float] | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for se in (self.se_dsl, self.se_g):
            if se is not None and se < 0:
                raise ValueError("standard errors must be nonnegative")
        for ci in (self.ci_wald, self.ci_lrt):
            if ci is not None and ci[0] > ci[1]:
                raise ValueError(f"interval bounds out of order: {ci}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lambda_hat": self.lambda_hat,
            "se_dsl": self.se_dsl,
            "se_g": self.se_g,
            "ci_wald": list(self.ci_wald) if self.ci_wald else None,
            "ci_lrt": list(self.ci_lrt) if self.ci_lrt else None,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _psi_slope(x: float) -> float:
    """e^x (x-1) + 1, series-protected near zero (it is ~ x^2/2 there)."""
    if abs(x) < 1e-3:
        return x * x * (0.5 + x * (1.0 / 3.0 + x * (0.125 + x / 30.0)))
    return math.exp(x) * (x - 1.0) + 1.0


def sandwich_components(lam: float, mu: float) -> tuple[float, float]:
    """Slope and spread components (B, C) of the estimating equation.

    B = (e^(lam mu)(lam mu - 1) + 1)/lam^2 and C = Var(Y) under the
    deterministic-segment model; the asymptotic variance of the moment
    estimator is C/B^2 per observed clump.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    b = _psi_slope(lam * mu) / lam ** 2
    c = model.var_clump_length_dsl(lam, mu)
    return b, c


def se_m_dsl(lam: float, mu: float, n: int) -> float:
    """Model-based standard error of the moment estimator (deterministic segments)."""
    if lam <= 0:
        raise NumericsError(
            "model-based SE requires lam > 0; use se_m_general (SE_G) near zero"
        )
    if n < 1:
        raise ValueError("n must be >= 1")
    x = lam * mu
    return lam * math.sqrt(model._var_dsl_core(x)) / _psi_slope(x) / math.sqrt(n)


def se_m_general(lam: float, mu: float, n: int, s2y: float) -> float:
    """Sample-variance (sandwich) standard error, valid under either segment model."""
    if lam <= 0:
        raise NumericsError("sandwich SE requires lam > 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    if s2y < 0:
        raise ValueError("s2y must be nonnegative")
    return lam ** 2 * math.sqrt(s2y) / _psi_slope(lam * mu) / math.sqrt(n)


def m_estimate(sample: ClumpSample) -> EstimateReport:
    """Moment estimator: the root of ybar = (e^(lam mu) - 1)/lam.

    The mean clump length is increasing in lam, so the root is unique; it is
    located by a bracketed Brent search seeded at (ybar - mu)/(2 mu^2). The
    root is negative exactly when ybar < mu (flagged in diagnostics, with no
    standard errors since the variance formulas require lam > 0) and zero
    when ybar = mu.
    """
    ybar, mu = sample.ybar, sample.mu
    if ybar <= 0:
        raise DataError("mean clump length must be positive")
    diagnostics: dict = {}
    if ybar == mu:
        lam = 0.0
    else:
        def g(l: float) -> float:
            return model.mean_clump_length(l, mu) - ybar

        lam = find_root(g, expand_bracket(g, (ybar - mu) / (2.0 * mu * mu)), tol=1e-14)
    se_dsl = se_g = None
    if lam > 0:
        se_dsl = se_m_dsl(lam, mu, sample.n)
        se_g = se_m_general(lam, mu, sample.n, sample.s2y)
    else:
        diagnostics["nonpositive_lambda"] = True
    return EstimateReport(
        method="M", lambda_hat=lam, se_dsl=se_dsl, se_g=se_g, diagnostics=diagnostics
    )


def wald_interval(report: EstimateReport, level: float = 0.95,
                  which_se: str = "G") -> tuple[float, float]:
    """Normal-approximation interval lambda_hat +/- z * SE."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    se = {"G": report.se_g, "DSL": report.se_dsl}.get(which_se.upper())
    if which_se.upper() not in ("G", "DSL"):
        raise ValueError(f"which_se must be 'DSL' or 'G', got {which_se!r}")
    if se is None:
        raise NumericsError(f"report has no {which_se} standard error")
    z = normal_quantile((1.0 + level) / 2.0)
    return report.lambda_hat - z * se, report.lambda_hat + z * se


def singleton_mom(sample: ClumpSample, t0: float) -> EstimateReport:
    """Moment estimator from the singleton fraction: -log(M1/N)/t0."""
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    if sample.m1 is None:
        raise DataError("sample has no singleton count")
    if sample.m1 == 0:
        raise DataError("singleton estimator is undefined when M1 = 0")
    lam = -math.log(sample.m1 / sample.n) / t0
    return EstimateReport(method="SingletonMOM", lambda_hat=lam)


class _PartialLogLikelihood:
    """Log of the deterministic-segment partial likelihood of a sample.

    log L(lam) = -m1 lam t0 + sum over multi-particle clumps of
    log f(y_i; lam, t0), optionally plus the exponential-spacings factor
    N log lam - lam * sum z_i. The lam-independent structure of the density
    series (term offsets, masks, log-factorials) is precomputed once, since
    maximization and interval inversion evaluate the profile many times.
    """

    def __init__(self, sample: ClumpSample, use_spacings: bool = False):
        if sample.lengths is None:
            raise DataError("maximum likelihood requires raw clump lengths")
        t0 = sample.mu
        y = sample.lengths
        singles = y <= t0 * (1.0 + sample.singleton_rtol)
        self.t0 = t0
        self.m1 = int(np.count_nonzero(singles))
        if sample.m1 is not None and sample.m1 != self.m1:
            raise DataError(
                f"stored singleton count {sample.m1} disagrees with classifier {self.m1}; "
                "lengths at or below t0 must be singletons"
            )
        self.multi = y[~singles]
        self.n = sample.n
        self.use_spacings = use_spacings and sample.spacings is not None
        self.sum_spacings = float(sample.spacings.sum()) if self.use_spacings else 0.0

        s = np.atleast_1d(model.whole_segments(self.multi, t0))
        self._s = s
        jmax = max(int(s.max()) - 1, 0) if s.size else 0
        if jmax:
            j = np.arange(1, jmax + 1)
            active = j[None, :] <= (s - 1)[:, None]
            u = np.maximum(self.multi[:, None] - (j + 1)[None, :] * t0, 0.0)
            with np.errstate(divide="ignore"):
                self._logu = np.where(active, np.log(np.maximum(u, 0.0)), -np.inf)
            self._u = np.where(active, u, np.nan)
            self._j = j[None, :].astype(float)
            self._sign = np.where(j % 2 == 1, -1.0, 1.0)[None, :]
            self._lgam = special.gammaln(j + 1)[None, :]
            self._active = active
        else:
            self._active = None

    def _log_density_sum(self, lam: float) -> float:
        """sum_i log f(y_i; lam, t0) over the multi-particle clumps."""
        n = self.multi.size
        base = n * (math.log(lam) - lam * self.t0)
        if self._active is None:
            return base
        j, u = self._j, self._u
        with np.errstate(invalid="ignore", divide="ignore"):
            lt = (
                (j - 1.0) * (math.log(lam) + self._logu)
                - j * (lam * self.t0)
                + np.log(lam * u + j)
                - self._lgam
            )
        # u == 0 contributes e^(-lam t0) at j == 1 and nothing for j >= 2
        zero_u = self._u == 0.0
        if zero_u.any():
            lt = np.where(zero_u & (j == 1.0), -lam * self.t0, lt)
            lt = np.where(zero_u & (j > 1.0), -np.inf, lt)
        lt = np.where(self._active, lt, -np.inf)
        row_max = np.maximum(lt.max(axis=1), 0.0)
        scaled = np.exp(lt - row_max[:, None])
        total = np.exp(-row_max) + (self._sign * scaled).sum(axis=1)
        abs_total = np.exp(-row_max) + scaled.sum(axis=1)
        cancel = abs_total / np.maximum(np.abs(total), np.finfo(float).tiny)
        bad = (np.finfo(float).eps * cancel > model.CANCEL_RTOL) | (total <= 0.0)
        for i in np.flatnonzero(bad):
            dps = 40 + int(math.log10(max(cancel[i], 1.0)))
            bracket = model._bracket_mp(
                float(self.multi[i]), lam, self.t0, int(self._s[i]), "density", dps
            )
            row_max[i] = 0.0
            total[i] = bracket
        return base + float(np.sum(np.log(total) + row_max))

    def __call__(self, lam: float) -> float:
        if lam <= 0:
            return -np.inf
        ll = -self.m1 * lam * self.t0
        if self.multi.size:
            ll += self._log_density_sum(lam)
        if self.use_spacings:
            ll += self.n * math.log(lam) - lam * self.sum_spacings
        return ll


def mle_dsl(sample: ClumpSample, use_spacings: bool = False,
            level: float = 0.95) -> EstimateReport:
    """Maximum likelihood under the deterministic-segment partial likelihood.

    The likelihood is maximized by bounded derivative-free search on a
    bracket around the moment estimate (expanded by doubling whenever the
    maximum lands on an edge), after a unimodality scan of the profile; the
    interval is the likelihood-ratio region at the given level, with
    endpoints located by root finding on the profile drop.

    Returns a report whose diagnostics record singleton/multi counts and any
    boundary condition (e.g. an all-singleton sample pushes the maximizer to
    the lower search bound).
    """
    loglik = _PartialLogLikelihood(sample, use_spacings=use_spacings)
    diagnostics: dict = {"m1": loglik.m1, "n_multi": int(loglik.multi.size)}

    lam0 = m_estimate(sample).lambda_hat
    if lam0 <= 0:
        lo, hi = 1e-6, 1.0
    else:
        lo, hi = max(1e-6, lam0 / 10.0), lam0 * 10.0

    lam_hat = None
    for _ in range(60):
        _check_unimodal(loglik, lo, hi)
        res = optimize.minimize_scalar(
            lambda l: -loglik(l), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-11},
        )
        lam_hat = float(res.x)
        span = hi - lo
        if lam_hat <= lo + 1e-4 * span:
            if lo <= 1e-8:
                diagnostics["boundary"] = "lower"
                lam_hat = lo
                break
            lo /= 10.0
        elif lam_hat >= hi - 1e-4 * span:
            hi *= 2.0
        else:
            break
    else:
        raise NumericsError("likelihood maximization did not settle on a bracket")

    ci = None
    if "boundary" not in diagnostics:
        ci = _lrt_interval(loglik, lam_hat, level)
    return EstimateReport(
        method="MLE", lambda_hat=lam_hat, ci_lrt=ci, diagnostics=diagnostics
    )


def _check_unimodal(loglik, lo: float, hi: float, points: int = 25) -> None:
    grid = np.geomspace(lo, hi, points)
    values = np.array([loglik(l) for l in grid])
    slopes = np.diff(values)
    tol = 1e-9 * max(1.0, float(np.max(np.abs(values))))
    signs = np.sign(np.where(np.abs(slopes) <= tol, 0.0, slopes))
    signs = signs[signs != 0]
    descents = int(np.count_nonzero(np.diff(signs) < 0))
    if descents > 1:
        err = NumericsError(
            "likelihood profile is not unimodal on the search bracket"
        )
        err.profile = (grid, values)
        raise err


def _lrt_interval(loglik, lam_hat: float, level: float) -> tuple[float, float]:
    target = loglik(lam_hat) - chi2_quantile_1df(level) / 2.0

    def drop(l: float) -> float:
        return loglik(l) - target

    lo_ci = 0.0
    probe = lam_hat
    for _ in range(60):
        probe /= 2.0
        if probe < 1e-12:
            break
        if drop(probe) < 0:
            lo_ci = find_root(drop, (probe, lam_hat), tol=1e-10)
            break
    hi_ci = math.inf
    probe = lam_hat
    for _ in range(60):
        probe *= 2.0
        if drop(probe) < 0:
            hi_ci = find_root(drop, (lam_hat, probe), tol=1e-10)
            break
    return lo_ci, hi_ci


class MEstimator(BaseEstimator):
    """Moment estimator of flow intensity, scikit-learn style.

    Parameters
    ----------
    mu : float
        Known mean segment length (passage time of a single particle).
    singleton_rtol : float
        Relative window above ``mu`` within which a length is a singleton.

    Attributes (after fit)
    ----------------------
    lambda_ : float
        Estimated flow intensity.
    se_dsl_, se_g_ : float or None
        Model-based and sandwich standard errors.
    report_ : EstimateReport
    """

    def __init__(self, mu: float = 1.0, singleton_rtol: float = DEFAULT_SINGLETON_RTOL):
        self.mu = mu
        self.singleton_rtol = singleton_rtol

    def fit(self, y, spacings=None):
        self.sample_ = ClumpSample.from_lengths(
            y, mu=self.mu, spacings=spacings, singleton_rtol=self.singleton_rtol
        )
        self.report_ = m_estimate(self.sample_)
        self.lambda_ = self.report_.lambda_hat
        self.se_dsl_ = self.report_.se_dsl
        self.se_g_ = self.report_.se_g
        return self

    def confidence_interval(self, level: float = 0.95, which_se: str = "G"):
        check_is_fitted(self, "report_")
        return wald_interval(self.report_, level=level, which_se=which_se)


class BooleanMLE(BaseEstimator):
    """Partial-likelihood MLE under the deterministic-segment model.

    Attributes after fit: ``lambda_``, ``ci_lrt_``, ``report_``.
    """

    def __init__(self, t0: float = 1.0, use_spacings: bool = False,
                 level: float = 0.95,
                 singleton_rtol: float = DEFAULT_SINGLETON_RTOL):
        self.t0 = t0
        self.use_spacings = use_spacings
        self.level = level
        self.singleton_rtol = singleton_rtol

    def fit(self, y, spacings=None):
        self.sample_ = ClumpSample.from_lengths(
            y, mu=self.t0, spacings=spacings, singleton_rtol=self.singleton_rtol
        )
        self.report_ = mle_dsl(self.sample_, use_spacings=self.use_spacings,
                               level=self.level)
        self.lambda_ = self.report_.lambda_hat
        self.ci_lrt_ = self.report_.ci_lrt
        return self


class SingletonMoment(BaseEstimator):
    """Moment estimator from the singleton fraction; attribute ``lambda_``."""

    def __init__(self, t0: float = 1.0,
                 singleton_rtol: float = DEFAULT_SINGLETON_RTOL):
        self.t0 = t0
        self.singleton_rtol = singleton_rtol

    def fit(self, y, spacings=None):
        self.sample_ = ClumpSample.from_lengths(
            y, mu=self.t0, singleton_rtol=self.singleton_rtol
        )
        self.report_ = singleton_mom(self.sample_, self.t0)
        self.lambda_ = self.report_.lambda_hat
        return self
