"""Censored Gaussian mixture model with a prior on the number of components.

The sampler is a data-augmented Gibbs scheme: allocations are drawn from
interval cell probabilities with the latent values marginalized out, latent
values are refreshed by truncated-normal draws, component parameters and
weights use conjugate updates, and the number of components is resampled
exactly from its conditional under the mixture-of-finite-mixtures partition
law, telescoping style. After every sweep occupied components sit first (in
stable order) followed by freshly drawn empty ones.

One chain is one sequential worker with its own RNG stream; chains may run
concurrently over shared read-only data.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np
from scipy.special import betaln, gammaln, log_ndtr, ndtr, ndtri

from .data import MicDataset
from .errors import ConfigError, DataError, FitError
from .traces import TraceSet

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# Standardized one-sided bounds beyond this fall back to exponential
# rejection; two-sided tail cells stay on the survival-scale inverse CDF.
_TAIL_LIMIT = 6.0


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the mixture prior.

    Means are Normal(mu0, tau2), precisions are Gamma(prec_shape, prec_rate),
    weights are symmetric Dirichlet(delta) and the component count follows a
    beta-negative-binomial (one success, shapes bnb_alpha / bnb_beta) shifted
    onto {1, 2, ...} and truncated at k_max.
    """

    mu0: float = 0.0
    tau2: float = 100.0
    prec_shape: float = 1.5
    prec_rate: float = 0.5
    delta: float = 1.0
    bnb_alpha: float = 1.0
    bnb_beta: float = 1.0
    k_max: int = 30

    def __post_init__(self):
        for name in ("tau2", "prec_shape", "prec_rate", "delta", "bnb_alpha", "bnb_beta"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 1 <= self.k_max <= 120:
            raise ConfigError("k_max must be in 1..120")


@dataclass(frozen=True)
class FitConfig:
    """MCMC run settings."""

    iterations: int = 1_000_000
    burnin: int = 100_000
    thin: int = 10
    seed: int = 0
    chains: int = 4
    strain_effects: bool = False
    strain_sd: float = 1.0
    k_init: int | None = None  # None: dispersed default min(k_max, 10)

    def __post_init__(self):
        if self.burnin >= self.iterations:
            raise ConfigError("burnin must be smaller than iterations")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")
        if self.chains < 1:
            raise ConfigError("chains must be at least 1")
        if self.strain_effects and self.strain_sd <= 0:
            raise ConfigError("strain_sd must be positive")
        if self.k_init is not None and self.k_init < 1:
            raise ConfigError("k_init must be at least 1")


@dataclass
class MixtureState:
    """One MCMC state: component count, weights, parameters, allocations and
    latent values. Allocations are 0-based internally."""

    k: int
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    z: np.ndarray
    latent: np.ndarray
    strain_effects: np.ndarray | None = None

    def validate(self, lower: np.ndarray | None = None, upper: np.ndarray | None = None):
        """Check structural invariants, and latent-in-cell when bounds given."""
        if not (self.k == len(self.weights) == len(self.means) == len(self.sds)):
            raise ValueError("component array lengths disagree with k")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("weights must form a probability simplex")
        if np.any(self.sds <= 0):
            raise ValueError("component sds must be positive")
        if self.z.min() < 0 or self.z.max() >= self.k:
            raise ValueError("allocations out of range")
        if lower is not None and upper is not None:
            if np.any(self.latent < lower) or np.any(self.latent > upper):
                raise ValueError("latent values escaped their censoring intervals")


def log_prior_k(k, alpha: float = 1.0, beta: float = 1.0):
    """Log pmf of the component-count prior at k in {1, 2, ...}.

    Beta-negative-binomial with a single success and shapes (alpha, beta),
    shifted by one; for alpha = beta = 1 this is log(1 / (k (k+1))).
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    arr = np.asarray(k)
    if np.any(arr < 1):
        raise ValueError("k must be at least 1")
    out = betaln(alpha + 1.0, beta + arr - 1.0) - betaln(alpha, beta)
    return float(out) if np.isscalar(k) else out


def normal_interval_prob(a, b) -> np.ndarray:
    """Phi(b) - Phi(a) for standardized bounds, complementary in the right tail."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def normal_interval_logprob(a, b) -> np.ndarray:
    """log(Phi(b) - Phi(a)) computed stably far into either tail."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    right = a > 0
    hi = np.where(right, log_ndtr(-a), log_ndtr(b))
    lo = np.where(right, log_ndtr(-b), log_ndtr(a))
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = lo - hi
        out = hi + np.log1p(-np.exp(diff))
    return np.where(np.isneginf(hi), -np.inf, out)


def cell_probability(mu: float, sigma: float, lower: float, upper: float) -> float:
    """Mass a Normal(mu, sigma^2) latent places on (lower, upper)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not lower < upper:
        raise ValueError("lower bound must be below upper bound")
    a = -math.inf if lower == -math.inf else (lower - mu) / sigma
    b = math.inf if upper == math.inf else (upper - mu) / sigma
    return float(normal_interval_prob(a, b))


def observation_pmf(state: MixtureState, lower: float, upper: float) -> float:
    """Mixture mass on one censoring cell: sum_k pi_k * cell_probability."""
    a = (lower - state.means) / state.sds
    b = (upper - state.means) / state.sds
    return float(np.sum(state.weights * normal_interval_prob(a, b)))


def _tail_rejection(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # One-sided standardized truncation to (a, inf) with a large: exponential
    # proposal tilted at lam = (a + sqrt(a^2 + 4)) / 2.
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    pending = np.arange(a.size)
    while pending.size:
        ap = a[pending]
        lp = lam[pending]
        x = ap + rng.exponential(size=pending.size) / lp
        accept = rng.random(pending.size) < np.exp(-0.5 * (x - lp) ** 2)
        out[pending[accept]] = x[accept]
        pending = pending[~accept]
    return out


def sample_truncated_normal(mean, sd, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Normal(mean, sd^2) draws conditioned on (lower, upper), vectorized.

    Uses the inverse CDF on whichever tail is nearer; one-sided intervals with
    the standardized bound beyond 6 switch to exponential rejection.
    """
    mean, sd, lower, upper = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(sd, float), lower, upper
    )
    a = np.where(np.isneginf(lower), -np.inf, (lower - mean) / sd)
    b = np.where(np.isposinf(upper), np.inf, (upper - mean) / sd)

    flip = b < 0.0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)

    u = rng.random(a2.shape)
    x = np.empty_like(a2)

    upper_half = a2 >= 0.0
    if np.any(upper_half):
        sa = ndtr(-a2[upper_half])
        sb = ndtr(-b2[upper_half])
        x[upper_half] = -ndtri(sb + u[upper_half] * (sa - sb))
    lower_half = ~upper_half
    if np.any(lower_half):
        ca = ndtr(a2[lower_half])
        cb = ndtr(b2[lower_half])
        x[lower_half] = ndtri(ca + u[lower_half] * (cb - ca))

    deep = (a2 > _TAIL_LIMIT) & np.isposinf(b2)
    if np.any(deep):
        x[deep] = _tail_rejection(a2[deep], rng)

    x = np.clip(x, a2, b2)
    x = np.where(flip, -x, x)
    return mean + sd * x


def _allocation_logweights(
    state: MixtureState, lower, upper, offsets=None, cell_of: np.ndarray | None = None
) -> np.ndarray:
    """Per-observation, per-component log(pi_k * cell mass).

    With ``cell_of`` given, ``lower``/``upper`` hold the distinct grid cells
    and the result is gathered per observation; special functions then run on
    (cells x components) instead of (observations x components).
    """
    lo = lower if offsets is None else lower - offsets
    hi = upper if offsets is None else upper - offsets
    a = (lo[:, None] - state.means[None, :]) / state.sds[None, :]
    b = (hi[:, None] - state.means[None, :]) / state.sds[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights)[None, :] + normal_interval_logprob(a, b)
    if cell_of is not None:
        logw = logw[cell_of]
    return logw


def sample_allocations(
    state: MixtureState,
    lower,
    upper,
    rng: np.random.Generator,
    offsets=None,
    cell_of: np.ndarray | None = None,
) -> np.ndarray:
    """Draw allocations from pi_k * cell_probability, latent marginalized out.

    Computed in log space; an observation whose every component cell mass
    underflows is a hard error rather than a silent renormalization.
    """
    if cell_of is not None:
        # One categorical distribution per distinct grid cell; observations in
        # the same cell share it, so invert the cell CDFs with one uniform each.
        logw = _allocation_logweights(state, lower, upper, offsets)
        peak = logw.max(axis=1)
        if np.any(np.isneginf(peak)):
            bad = np.isneginf(peak)[cell_of]
            if np.any(bad):
                raise FitError("allocation probabilities underflowed for an observation")
            peak = np.where(np.isneginf(peak), 0.0, peak)
        p = np.exp(logw - peak[:, None])
        cum = np.cumsum(p, axis=1)
        cum /= cum[:, -1:]
        u = rng.random(cell_of.shape[0])
        z = np.sum(cum[cell_of] < u[:, None], axis=1)
        return np.minimum(z, logw.shape[1] - 1)
    logw = _allocation_logweights(state, lower, upper, offsets)
    if np.any(np.all(np.isneginf(logw), axis=1)):
        raise FitError("allocation probabilities underflowed for an observation")
    return np.argmax(logw + rng.gumbel(size=logw.shape), axis=1)


def sample_latent(
    state: MixtureState, z, lower, upper, rng: np.random.Generator, offsets=None
) -> np.ndarray:
    """Refresh latent values: truncated normals on each observation's cell."""
    mu = state.means[z] if offsets is None else state.means[z] + offsets
    return sample_truncated_normal(mu, state.sds[z], lower, upper, rng)


def update_component_params(
    latent, z, means, priors: PriorConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate per-component draws; empty components draw from the prior.

    Precision first, Gamma(c + n_k/2, d + sum (y - mu_k)^2 / 2) against the
    current mean, then the mean from its Normal posterior under the new
    precision.
    """
    k = len(means)
    counts = np.bincount(z, minlength=k).astype(float)
    s1 = np.bincount(z, weights=latent, minlength=k)
    s2 = np.bincount(z, weights=latent * latent, minlength=k)
    ss = s2 - 2.0 * means * s1 + counts * means * means
    ss = np.maximum(ss, 0.0)

    prec = rng.gamma(priors.prec_shape + 0.5 * counts, 1.0 / (priors.prec_rate + 0.5 * ss))
    post_prec = 1.0 / priors.tau2 + counts * prec
    post_mean = (priors.mu0 / priors.tau2 + prec * s1) / post_prec
    new_means = rng.normal(post_mean, np.sqrt(1.0 / post_prec))
    return new_means, 1.0 / np.sqrt(prec)


def update_weights(z, delta: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """pi ~ Dirichlet(delta + n_1, ..., delta + n_K)."""
    counts = np.bincount(z, minlength=k)
    return rng.dirichlet(delta + counts)


@lru_cache(maxsize=512)
def _log_k_conditional_cached(kplus, n, delta, alpha, beta, k_max):
    ks = np.arange(kplus, k_max + 1)
    logp = (
        log_prior_k(ks, alpha, beta)
        + gammaln(ks + 1.0)
        - gammaln(ks - kplus + 1.0)
        + gammaln(delta * ks)
        - gammaln(n + delta * ks)
    )
    ks.setflags(write=False)
    logp.setflags(write=False)
    return ks, logp


def log_k_conditional(kplus: int, n: int, priors: PriorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized log conditional of K given K+ occupied clusters and n points:

        p(K | z) propto p(K) * K! / (K - K+)! * Gamma(delta K) / Gamma(n + delta K)

    on K+ <= K <= k_max.
    """
    if kplus > priors.k_max:
        raise FitError("occupied clusters exceed k_max; raise the cap")
    return _log_k_conditional_cached(
        int(kplus), int(n), priors.delta, priors.bnb_alpha, priors.bnb_beta, priors.k_max
    )


def update_k(
    z, means, sds, priors: PriorConfig, rng: np.random.Generator
) -> tuple[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Resample K: compact occupied components, draw K from its conditional,
    append prior-drawn empty components and refresh the weights.

    Returns (k, z, weights, means, sds) with occupied components first in
    stable original order.
    """
    occupied, z_new = np.unique(z, return_inverse=True)
    kplus = occupied.size
    n = z_new.size
    means_occ = means[occupied]
    sds_occ = sds[occupied]

    ks, logp = log_k_conditional(kplus, n, priors)
    k_new = int(ks[np.argmax(logp + rng.gumbel(size=logp.shape))])

    n_empty = k_new - kplus
    prec = rng.gamma(priors.prec_shape, 1.0 / priors.prec_rate, size=n_empty)
    means_new = np.concatenate(
        [means_occ, rng.normal(priors.mu0, math.sqrt(priors.tau2), size=n_empty)]
    )
    sds_new = np.concatenate([sds_occ, 1.0 / np.sqrt(prec)])

    counts = np.bincount(z_new, minlength=kplus).astype(float)
    alpha = np.concatenate([priors.delta + counts, np.full(n_empty, priors.delta)])
    weights = rng.dirichlet(alpha)
    return k_new, z_new, weights, means_new, sds_new


def _update_strain_effects(
    latent, z, means, sds, strain_idx, n_strains, prior_sd, rng
) -> np.ndarray:
    # Conjugate Normal(0, prior_sd^2) intercepts shared across components.
    prec_obs = 1.0 / (sds[z] ** 2)
    resid = latent - means[z]
    prec = 1.0 / prior_sd**2 + np.bincount(strain_idx, weights=prec_obs, minlength=n_strains)
    mean = np.bincount(strain_idx, weights=prec_obs * resid, minlength=n_strains) / prec
    return rng.normal(mean, np.sqrt(1.0 / prec))


def gibbs_sweep(
    state: MixtureState,
    lower,
    upper,
    priors: PriorConfig,
    rng: np.random.Generator,
    strain_idx=None,
    strain_sd: float = 1.0,
    cells: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> MixtureState:
    """One full sweep: allocations, latent, component parameters, weights, K.

    ``cells`` optionally carries (cell_lower, cell_upper, cell_of) so the
    allocation step runs on distinct grid cells; ignored when strain offsets
    are active.
    """
    offsets = None
    effects = state.strain_effects
    if strain_idx is not None:
        offsets = effects[strain_idx]

    if cells is not None and offsets is None:
        z = sample_allocations(state, cells[0], cells[1], rng, cell_of=cells[2])
    else:
        z = sample_allocations(state, lower, upper, rng, offsets)
    latent = sample_latent(state, z, lower, upper, rng, offsets)

    if strain_idx is not None:
        effects = _update_strain_effects(
            latent, z, state.means, state.sds, strain_idx, effects.size, strain_sd, rng
        )
        offsets = effects[strain_idx]

    centered = latent if offsets is None else latent - offsets
    means, sds = update_component_params(centered, z, state.means, priors, rng)
    weights = update_weights(z, priors.delta, state.k, rng)
    k, z, weights, means, sds = update_k(z, means, sds, priors, rng)
    return MixtureState(
        k=k, weights=weights, means=means, sds=sds, z=z, latent=latent,
        strain_effects=effects,
    )


def _cell_midpoints(lower, upper):
    mid = 0.5 * (lower + upper)
    mid = np.where(np.isneginf(lower), upper - 0.5, mid)
    mid = np.where(np.isposinf(upper), lower + 0.5, mid)
    return mid


def initial_state(
    values, k_init: int, priors: PriorConfig, n_strains: int | None = None
) -> MixtureState:
    """Deterministic dispersed start: means at equally spaced empirical
    quantiles (1e-6 jitter breaks ties), common sd from the data, allocations
    by nearest mean."""
    k0 = min(k_init, priors.k_max)
    q = (np.arange(k0) + 0.5) / k0
    means = np.quantile(values, q) + np.arange(k0) * 1e-6
    sd = max(float(np.std(values)), 0.25)
    sds = np.full(k0, sd)
    z = np.argmin(np.abs(values[:, None] - means[None, :]), axis=1)
    weights = np.full(k0, 1.0 / k0)
    effects = np.zeros(n_strains) if n_strains is not None else None
    return MixtureState(
        k=k0, weights=weights, means=means, sds=sds, z=z,
        latent=np.asarray(values, dtype=float).copy(), strain_effects=effects,
    )


def _mixture_loglik(state: MixtureState, lower, upper, offsets=None, cell_of=None) -> float:
    logw = _allocation_logweights(state, lower, upper, offsets, cell_of)
    m = logw.max(axis=1)
    return float(np.sum(m + np.log(np.sum(np.exp(logw - m[:, None]), axis=1))))


def _strain_index(dataset: MicDataset) -> tuple[np.ndarray, int]:
    ids = [o.strain_id for o in dataset.observations]
    uniq = sorted(set(ids))
    lookup = {s: i for i, s in enumerate(uniq)}
    return np.array([lookup[s] for s in ids], dtype=np.int64), len(uniq)


def run_chain(
    data: MicDataset, priors: PriorConfig, fit: FitConfig, seed: int | None = None
) -> TraceSet:
    """Run one chain on a single-drug dataset and return the thinned trace.

    Deterministic for a given seed (default: fit.seed).
    """
    grid = data.single_grid()
    n = len(data)
    if n == 0:
        raise DataError("empty dataset")
    seed = fit.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    lower, upper = data.bounds_arrays()
    cells_lo = np.concatenate(([-np.inf], grid.tested_log2))
    cells_hi = np.concatenate((grid.tested_log2, [np.inf]))
    cell_of = data.index_array() - 1
    cells = (cells_lo, cells_hi, cell_of)

    strain_idx = None
    n_strains = None
    if fit.strain_effects:
        strain_idx, n_strains = _strain_index(data)

    k0 = fit.k_init if fit.k_init is not None else min(priors.k_max, 10)
    state = initial_state(_cell_midpoints(lower, upper), k0, priors, n_strains)

    n_keep = (fit.iterations - fit.burnin) // fit.thin
    k_rec = np.empty(n_keep, dtype=np.int64)
    kplus_rec = np.empty(n_keep, dtype=np.int64)
    loglik_rec = np.empty(n_keep)
    iters_rec = np.empty(n_keep, dtype=np.int64)
    weights_rec: list[np.ndarray] = []
    means_rec: list[np.ndarray] = []
    sds_rec: list[np.ndarray] = []
    alloc_rec = np.empty((n_keep, n), dtype=np.int8)

    t0 = time.perf_counter()
    kept = 0
    for it in range(1, fit.iterations + 1):
        state = gibbs_sweep(state, lower, upper, priors, rng, strain_idx, fit.strain_sd, cells)
        if it > fit.burnin and (it - fit.burnin) % fit.thin == 0 and kept < n_keep:
            iters_rec[kept] = it
            k_rec[kept] = state.k
            kplus_rec[kept] = int(state.z.max()) + 1
            if strain_idx is None:
                loglik_rec[kept] = _mixture_loglik(state, cells_lo, cells_hi, None, cell_of)
            else:
                offsets = state.strain_effects[strain_idx]
                loglik_rec[kept] = _mixture_loglik(state, lower, upper, offsets)
            weights_rec.append(state.weights.copy())
            means_rec.append(state.means.copy())
            sds_rec.append(state.sds.copy())
            alloc_rec[kept] = state.z
            kept += 1

    return TraceSet(
        method="cgmm",
        iters=iters_rec,
        k=k_rec,
        kplus=kplus_rec,
        weights=weights_rec,
        means=means_rec,
        sds=sds_rec,
        allocations=alloc_rec,
        loglik=loglik_rec,
        seed=seed,
        drug_code=grid.drug_code,
        n_obs=n,
        runtime_s=time.perf_counter() - t0,
        meta={"priors": asdict(priors), "fit": asdict(fit)},
    )


def chain_seeds(base_seed: int, chains: int) -> list[int]:
    """Deterministic per-chain seeds derived from one base seed."""
    seqs = np.random.SeedSequence(base_seed).spawn(chains)
    return [int(s.generate_state(1)[0]) for s in seqs]
