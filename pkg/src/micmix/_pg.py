"""Polya-Gamma PG(1, c) sampling, vectorized.

Devroye's exact alternating-series method: propose from a mixture of a
truncated inverse-Gaussian body and an exponential tail, then accept with
the partial sums of the Jacobi-theta series. Used for the logistic-likelihood
augmentation in the GWAS sampler.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr

_T = 0.64
_PI2_8 = math.pi * math.pi / 8.0


def _series_coef(n, x):
    # a_n(x) of the alternating series, piecewise around the threshold t
    half = n + 0.5
    left = x <= _T
    out = np.empty_like(x)
    with np.errstate(over="ignore", under="ignore"):
        xl = x[left]
        out[left] = (
            math.pi * half * np.power(2.0 / (math.pi * xl), 1.5)
            * np.exp(-2.0 * half * half / xl)
        )
        xr = x[~left]
        out[~left] = math.pi * half * np.exp(-0.5 * half * half * math.pi**2 * xr)
    return out


def _trunc_inverse_gaussian(z, rng):
    """IG(1/z, 1) truncated to (0, t]; z may be 0 (the Levy limit)."""
    m = z.size
    out = np.empty(m)
    big_mu = z < 1.0 / _T
    idx = np.flatnonzero(big_mu)
    while idx.size:
        e1 = rng.exponential(size=idx.size)
        e2 = rng.exponential(size=idx.size)
        ok = e1 * e1 <= 2.0 * e2 / _T
        x = _T / (1.0 + _T * e1) ** 2
        zi = z[idx]
        accept = ok & (rng.random(idx.size) <= np.exp(-0.5 * zi * zi * x))
        out[idx[accept]] = x[accept]
        idx = idx[~accept]
    idx = np.flatnonzero(~big_mu)
    while idx.size:
        x = rng.wald(1.0 / z[idx], 1.0)
        accept = x <= _T
        out[idx[accept]] = x[accept]
        idx = idx[~accept]
    return out


def _propose(z, rng):
    k = _PI2_8 + 0.5 * z * z
    log_p = math.log(math.pi / 2.0) - np.log(k) - k * _T
    sq = 1.0 / math.sqrt(_T)
    log_term1 = log_ndtr(sq * (_T * z - 1.0)) - z
    log_term2 = z + log_ndtr(-sq * (_T * z + 1.0))
    log_q = math.log(2.0) + np.logaddexp(log_term1, log_term2)
    prob_exp = 1.0 / (1.0 + np.exp(log_q - log_p))
    use_tail = rng.random(z.size) < prob_exp
    x = np.empty(z.size)
    if np.any(use_tail):
        x[use_tail] = _T + rng.exponential(size=int(use_tail.sum())) / k[use_tail]
    body = ~use_tail
    if np.any(body):
        x[body] = _trunc_inverse_gaussian(z[body], rng)
    return x


def _series_accept(x, rng):
    """Alternating-series accept/reject; True where the candidate is kept."""
    s = _series_coef(0, x)
    y = rng.random(x.size) * s
    accepted = np.zeros(x.size, dtype=bool)
    active = np.ones(x.size, dtype=bool)
    n = 0
    while np.any(active):
        n += 1
        idx = np.flatnonzero(active)
        coef = _series_coef(n, x[idx])
        if n % 2 == 1:
            s[idx] -= coef
            done = y[idx] <= s[idx]
            accepted[idx[done]] = True
            active[idx[done]] = False
        else:
            s[idx] += coef
            done = y[idx] > s[idx]
            active[idx[done]] = False
    return accepted


def sample_pg1(c, rng: np.random.Generator) -> np.ndarray:
    """Draws omega_i ~ PG(1, c_i)."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    z = 0.5 * np.abs(c)
    out = np.empty(z.shape)
    pending = np.arange(z.size)
    while pending.size:
        zp = z[pending]
        x = _propose(zp, rng)
        keep = _series_accept(x, rng)
        out[pending[keep]] = 0.25 * x[keep]
        pending = pending[~keep]
    return out


def pg_mean(c) -> np.ndarray:
    """E[PG(1, c)] = tanh(c/2) / (2c), continuous at 0."""
    c = np.asarray(c, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.tanh(c / 2.0) / (2.0 * c)
    return np.where(np.abs(c) < 1e-8, 0.25 - c * c / 48.0, out)


def pg_var(c) -> np.ndarray:
    """Var[PG(1, c)] = (sinh(c) - c) / (4 c^3 cosh^2(c/2)), continuous at 0."""
    c = np.asarray(c, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        out = (np.sinh(c) - c) / (4.0 * c**3 * np.cosh(c / 2.0) ** 2)
    return np.where(np.abs(c) < 1e-4, 1.0 / 24.0, out)
