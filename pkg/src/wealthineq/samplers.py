"""Seedable elementary draws: truncated normal, multivariate normal, inverse-Wishart."""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtr, ndtri

# purpose-specific sub-streams
STREAM_INIT = 0
STREAM_COVARIANCE = 1
STREAM_COEFFICIENTS = 2
STREAM_WEALTH = 3
STREAM_ERROR = 4
STREAM_POPULATION = 10
STREAM_SAMPLE = 11
STREAM_CENSORING = 12

# regime switches for the truncated normal
INVERSE_CDF_MIN_MASS = 1e-10
TAIL_START = 5.0
EMPTY_MASS = 1e-300
_LOG_EMPTY_MASS = math.log(EMPTY_MASS)


class NumericallyEmptyTruncation(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, stream_id)``.

    The same pair always yields the same sequence on every platform.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


def _log_diff(log_hi, log_lo):
    """log(exp(log_hi) - exp(log_lo)) for log_hi >= log_lo."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return log_hi + np.log1p(-np.exp(log_lo - log_hi))


def truncated_normal(rng: np.random.Generator, mu, sigma, a, b) -> np.ndarray:
    """Vectorized exact draws from N(mu, sigma^2) restricted to [a, b].

    Inverse CDF when the interval mass is at least 1e-10; otherwise
    exponential rejection (Robert 1995) in a far tail, or uniform rejection
    on a band narrow relative to the tail scale. Draws always lie in [a, b].
    """
    mu, sigma, a, b = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (mu, sigma, a, b)))
    shape = mu.shape
    mu, sigma, a, b = (x.ravel() for x in (mu, sigma, a, b))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if np.any(~(a < b)):
        raise ValueError("truncation interval must satisfy a < b")
    alpha = (a - mu) / sigma
    beta = (b - mu) / sigma
    # reflect so that the interval sits in the upper half or straddles zero
    flip = beta <= 0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)
    upper = lo >= 0  # one-sided: 0 <= lo < hi

    # upper case works with survival functions, the straddling case with CDFs
    c_lo = np.where(upper, ndtr(-lo), ndtr(lo))
    c_hi = np.where(upper, ndtr(-hi), ndtr(hi))
    mass = np.where(upper, c_lo - c_hi, c_hi - c_lo)
    inv = mass >= INVERSE_CDF_MIN_MASS
    if not inv.all():
        t = ~inv
        log_mass = np.where(
            upper[t],
            _log_diff(log_ndtr(-lo[t]), log_ndtr(-hi[t])),
            _log_diff(log_ndtr(hi[t]), log_ndtr(lo[t])),
        )
        if np.any(log_mass < _LOG_EMPTY_MASS):
            raise NumericallyEmptyTruncation("numerically empty truncation")

    z = np.empty_like(mu)
    u = rng.random(mu.size)
    p = c_lo + u * (c_hi - c_lo)
    z[inv] = np.where(upper[inv], -ndtri(p[inv]), ndtri(p[inv]))

    rej = ~inv
    if rej.any():
        idx = np.nonzero(rej)[0]
        z[idx] = _reject(rng, lo[idx], hi[idx])

    z = np.clip(z, lo, hi)
    x = mu + sigma * np.where(flip, -z, z)
    return np.clip(x, a, b).reshape(shape)


def _reject(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    out = np.empty_like(lo)
    pending = np.arange(lo.size)
    # exponential proposals for far tails unless the band is narrow relative to 1/lo
    expo = (lo >= TAIL_START) & ((hi - lo) * np.maximum(lo, 1e-300) > 1.0)
    while pending.size:
        l, h = lo[pending], hi[pending]
        e = expo[pending]
        z = np.empty_like(l)
        acc_logp = np.empty_like(l)
        if e.any():
            lam = 0.5 * (l[e] + np.sqrt(l[e] ** 2 + 4.0))
            ze = l[e] + rng.exponential(1.0, e.sum()) / lam
            z[e] = ze
            acc_logp[e] = np.where(ze <= h[e], -0.5 * (ze - lam) ** 2, -np.inf)
        ne = ~e
        if ne.any():
            zu = l[ne] + rng.random(ne.sum()) * (h[ne] - l[ne])
            z[ne] = zu
            # density ratio to its maximum on the band (at lo if lo >= 0, else at 0)
            peak = np.maximum(l[ne], 0.0)
            acc_logp[ne] = 0.5 * (peak ** 2 - zu ** 2)
        ok = np.log(rng.random(pending.size)) <= acc_logp
        out[pending[ok]] = z[ok]
        pending = pending[~ok]
    return out


def draw_truncated_normal(rng: np.random.Generator, mu: float, sigma: float, a: float, b: float) -> float:
    return float(truncated_normal(rng, mu, sigma, a, b))


def draw_mvn(rng: np.random.Generator, mean, cov) -> np.ndarray:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("covariance not SPD") from exc
    return mean + L @ rng.standard_normal(mean.size)


def draw_inverse_wishart(rng: np.random.Generator, nu: float, scale) -> np.ndarray:
    """One draw from the inverse-Wishart with `nu` degrees of freedom and scale matrix `scale`.

    Bartlett decomposition of a standard Wishart, inverted and rescaled by the
    Cholesky factor of `scale`.
    The density is proportional to ``|X|^{-(nu+p+1)/2} exp(-tr(scale X^-1)/2)``.
    """
    S = np.atleast_2d(np.asarray(scale, dtype=float))
    p = S.shape[0]
    if not nu > p - 1:
        raise ValueError(f"inverse-Wishart needs nu > p - 1, got nu={nu}, p={p}")
    try:
        R = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("inverse-Wishart scale not SPD") from exc
    # W = A A' ~ Wishart(nu, I) gives X = R W^-1 R' ~ IW(nu, R R')
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(nu - np.arange(p)))
    if p > 1:
        A[np.tril_indices(p, -1)] = rng.standard_normal(p * (p - 1) // 2)
    B = linalg.solve_triangular(A, R.T, lower=True)
    X = B.T @ B
    return 0.5 * (X + X.T)
