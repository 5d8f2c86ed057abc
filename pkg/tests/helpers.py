"""Shared test utilities: Geweke joint-distribution harness for the censored
mixture kernel, plus small statistical helpers."""

import math

import numpy as np
from scipy.special import logsumexp

from micmix.cgmm import MixtureState, gibbs_sweep, log_prior_k
from micmix.data import DrugGrid, censor_many


def _canonicalize(k, weights, means, sds, z):
    occupied = np.unique(z)
    empty = np.setdiff1d(np.arange(k), occupied)
    perm = np.concatenate([occupied, empty])
    inv = np.empty(k, dtype=np.int64)
    inv[perm] = np.arange(k)
    return weights[perm], means[perm], sds[perm], inv[z]


def prior_joint_draw(priors, grid: DrugGrid, n: int, rng):
    """Draw (state, dilution indices) from the prior and its data model,
    relabeled so occupied components come first (the kernel's convention)."""
    ks = np.arange(1, priors.k_max + 1)
    logp = log_prior_k(ks, priors.bnb_alpha, priors.bnb_beta)
    p = np.exp(logp - logsumexp(logp))
    k = int(rng.choice(ks, p=p / p.sum()))
    weights = rng.dirichlet(np.full(k, priors.delta))
    means = rng.normal(priors.mu0, math.sqrt(priors.tau2), size=k)
    sds = 1.0 / np.sqrt(rng.gamma(priors.prec_shape, 1.0 / priors.prec_rate, size=k))
    z = rng.choice(k, size=n, p=weights)
    latent = rng.normal(means[z], sds[z])
    indices = censor_many(latent, grid)
    weights, means, sds, z = _canonicalize(k, weights, means, sds, z)
    state = MixtureState(k=k, weights=weights, means=means, sds=sds, z=z, latent=latent)
    return state, indices


def _bounds_from_indices(indices, grid):
    edges_lo = np.concatenate(([-np.inf], grid.tested_log2))
    edges_hi = np.concatenate((grid.tested_log2, [np.inf]))
    return edges_lo[indices - 1], edges_hi[indices - 1]


def geweke_samples(priors, grid, n, sweeps, seed, thin=10):
    """Marginal-conditional vs successive-conditional samples of
    (mu_1, sigma_1, K, mean latent) for the censored-mixture Gibbs kernel."""
    rng = np.random.default_rng(seed)
    kept = sweeps // thin

    marginal = np.empty((kept, 4))
    for i in range(kept):
        state, _ = prior_joint_draw(priors, grid, n, rng)
        marginal[i] = (state.means[0], state.sds[0], state.k, state.latent.mean())

    successive = np.empty((kept, 4))
    state, indices = prior_joint_draw(priors, grid, n, rng)
    row = 0
    for it in range(1, sweeps + 1):
        # data block: re-simulate observations from the current parameters
        z = rng.choice(state.k, size=n, p=state.weights)
        latent = rng.normal(state.means[z], state.sds[z])
        indices = censor_many(latent, grid)
        lo, hi = _bounds_from_indices(indices, grid)
        state = gibbs_sweep(state, lo, hi, priors, rng)
        if it % thin == 0 and row < kept:
            successive[row] = (state.means[0], state.sds[0], state.k, state.latent.mean())
            row += 1

    return marginal, successive


def adjusted_rand_index(a, b) -> float:
    """Clustering agreement between two label vectors."""
    from sklearn.metrics import adjusted_rand_score

    return float(adjusted_rand_score(a, b))
