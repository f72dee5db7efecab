"""Residual distributions and IRLS weights (Gaussian, Student-t, Huber)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import stdtr

from .errors import FitFailure, InsufficientData

log = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826
HUBER_K = 1.345
MIN_SAMPLES = 50
NU_INIT = 5.0
NU_MIN, NU_MAX = 0.5, 300.0


def weight_gaussian(r, sigma):
    return np.full(np.shape(r), 1.0 / (sigma * sigma)) if np.ndim(r) else 1.0 / (sigma * sigma)


def weight_tdist(r, nu, sigma):
    r = np.asarray(r, dtype=float)
    return (nu + 1.0) / (nu + (r / sigma) ** 2)


def weight_huber(r, sigma, lam):
    a = np.abs(np.asarray(r, dtype=float))
    inv = 1.0 / (sigma * sigma)
    return np.where(a < lam, inv, lam * inv / np.maximum(a, lam))


def mad_scale(samples):
    r = np.asarray(samples, dtype=float).ravel()
    if len(r) < 2:
        raise InsufficientData("MAD needs at least two samples")
    return MAD_TO_SIGMA * float(np.median(np.abs(r - np.median(r))))


def prefilter(samples, return_bound=False):
    """Drop gross outliers: keep |r| <= 3 * 1.4826 * MAD."""
    r = np.asarray(samples, dtype=float).ravel()
    bound = 3.0 * mad_scale(r)
    keep = r[np.abs(r) <= bound]
    if len(keep) == 0:
        raise InsufficientData("prefilter rejected every sample")
    return (keep, bound) if return_bound else keep


def t_logpdf(r, nu, sigma):
    """Log density of a zero-mean Student-t with scale ``sigma``."""
    r = np.asarray(r, dtype=float)
    const = (math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
             - 0.5 * math.log(nu * math.pi) - math.log(sigma))
    with np.errstate(over="ignore", divide="ignore"):
        return const - 0.5 * (nu + 1.0) * np.log1p((r / sigma) ** 2 / nu)


def t_nll(samples, nu, sigma):
    return -float(np.sum(t_logpdf(samples, nu, sigma)))


def t_nll_truncated(samples, nu, sigma, bound):
    """NLL of samples known to satisfy |r| <= bound."""
    mass = 2.0 * stdtr(nu, bound / sigma) - 1.0
    return t_nll(samples, nu, sigma) + len(samples) * math.log(max(mass, 1e-300))


def fit_tdist(samples, prefiltered=False, bound=None, max_iter=200, xatol=1e-4):
    """Fit (nu, sigma) of a zero-mean t-distribution by Nelder-Mead on the NLL.

    Unless ``prefiltered``, gross outliers are removed first and the
    likelihood is the t density truncated to the kept interval (fitting the
    plain density to clipped samples overestimates nu several-fold).  A
    ``bound`` may be passed for samples already clipped to |r| <= bound.
    Searches in (log nu, log sigma) starting from (5, MAD scale).  Raises
    :class:`FitFailure` carrying the fallback ``(5, MAD scale)`` when the
    simplex has not collapsed after ``max_iter`` iterations.
    """
    r = np.asarray(samples, dtype=float).ravel()
    if not prefiltered:
        r, bound = prefilter(r, return_bound=True)
    if len(r) < MIN_SAMPLES:
        raise InsufficientData(f"{len(r)} samples, need {MIN_SAMPLES}")
    s0 = mad_scale(r)
    if s0 <= 0:
        s0 = float(np.sqrt(np.mean(r * r)))
    if s0 <= 0:
        raise InsufficientData("all residuals are zero")
    lo, hi = math.log(NU_MIN), math.log(NU_MAX)
    n = len(r)

    def objective(x):
        ln_nu = min(max(x[0], lo), hi)
        # quadratic wall outside the nu range keeps the simplex in bounds
        wall = (x[0] - ln_nu) ** 2 * n
        nu, sigma = math.exp(ln_nu), math.exp(x[1])
        nll = t_nll(r, nu, sigma) if bound is None else t_nll_truncated(r, nu, sigma, bound)
        return nll / n + wall

    x0 = np.array([math.log(NU_INIT), math.log(s0)])
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": 1e-10, "maxiter": max_iter})
    if not res.success:
        raise FitFailure(f"Nelder-Mead did not converge in {max_iter} iterations: {res.message}",
                         fallback=(NU_INIT, s0))
    ln_nu = min(max(res.x[0], lo), hi)
    return math.exp(ln_nu), math.exp(res.x[1])


@dataclass(frozen=True)
class ErrorModel:
    kind: str
    sigma: float
    nu: float = NU_INIT
    lam: float = 0.0
    percentile95: float = np.inf

    def __post_init__(self):
        if self.kind not in ("gaussian", "tdist", "huber"):
            raise ValueError(f"unknown error model {self.kind!r}")
        if not self.sigma > 0 or not self.nu > 0:
            raise ValueError("sigma and nu must be positive")

    def weight(self, r):
        if self.kind == "tdist":
            return weight_tdist(r, self.nu, self.sigma)
        if self.kind == "huber":
            return weight_huber(r, self.sigma, self.lam)
        return weight_gaussian(np.asarray(r, dtype=float), self.sigma)

    def cost(self, r):
        """Robust cost rho(r) with rho'(r) = r * weight(r), scaled so rho(r) ~ w(0) r^2 near 0."""
        r = np.asarray(r, dtype=float)
        if self.kind == "tdist":
            s2 = self.sigma ** 2
            return (self.nu + 1.0) * s2 * np.log1p(r * r / (self.nu * s2))
        if self.kind == "huber":
            a = np.abs(r)
            inv = 1.0 / self.sigma ** 2
            return np.where(a < self.lam, inv * r * r, inv * (2.0 * self.lam * a - self.lam ** 2))
        return r * r / self.sigma ** 2


def fit_error_model(samples, kind="tdist", huber_lambda=None):
    """Fit an :class:`ErrorModel` to one residual population.

    ``percentile95`` is the 95th percentile of |r| over all given samples.
    """
    r = np.asarray(samples, dtype=float).ravel()
    if len(r) < MIN_SAMPLES:
        raise InsufficientData(f"{len(r)} samples, need {MIN_SAMPLES}")
    p95 = float(np.percentile(np.abs(r), 95))
    try:
        filtered, bound = prefilter(r, return_bound=True)
    except InsufficientData:
        # every sample beyond 3 MAD of zero: a biased population, keep it whole
        log.debug("prefilter rejected all %d samples", len(r))
        filtered, bound = r, float(np.max(np.abs(r)))
    scale = max(mad_scale(r), 1e-6)
    if kind == "tdist":
        try:
            nu, sigma = fit_tdist(filtered, prefiltered=True, bound=bound) \
                if len(filtered) >= MIN_SAMPLES else (NU_INIT, scale)
        except FitFailure as exc:
            log.debug("t fit failed, using fallback: %s", exc)
            nu, sigma = exc.fallback
        except InsufficientData:
            nu, sigma = NU_INIT, scale
        return ErrorModel("tdist", max(sigma, 1e-6), nu=nu, percentile95=p95)
    if kind == "gaussian":
        sigma = float(np.sqrt(np.mean(filtered ** 2)))
        return ErrorModel("gaussian", max(sigma, 1e-6), percentile95=p95)
    if kind == "huber":
        sigma = max(scale, 1e-6)
        lam = HUBER_K * sigma if huber_lambda is None else huber_lambda
        return ErrorModel("huber", sigma, lam=lam, percentile95=p95)
    raise ValueError(f"unknown error model {kind!r}")


def fit_keyframe_models(residuals, targets, kind="tdist", huber_lambda=None):
    """One :class:`ErrorModel` per target keyframe id.

    Keyframes with fewer than 50 samples fall back to a model fitted on the
    pooled residuals of all keyframes.
    """
    residuals = np.asarray(residuals, dtype=float).ravel()
    targets = np.asarray(targets).ravel()
    models = {}
    pooled = None
    for kf in np.unique(targets):
        sel = residuals[targets == kf]
        if len(sel) >= MIN_SAMPLES:
            models[int(kf)] = fit_error_model(sel, kind, huber_lambda)
        else:
            if pooled is None:
                pooled = fit_error_model(residuals, kind, huber_lambda)
            models[int(kf)] = pooled
    return models
