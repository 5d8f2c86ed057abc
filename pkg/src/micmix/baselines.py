"""Comparison methods: an uncensored Gaussian mixture over the recorded
dilution values and a Dirichlet-process mixture over the censored-latent
augmentation.

The GM baseline reuses the censored model's machinery but treats each
recorded log2 value as an exact continuous observation; boundary labels map
to their recorded values (d_1 and d_T + 1), mirroring naive analyses. It
keeps the same prior on the number of components, so the contrast against
the censored fit isolates the censoring treatment.

The DP baseline shares the Normal/Gamma base measure with the finite model,
so the contrast isolates the clustering prior. Allocations follow the
auxiliary-parameter scheme with m fresh prior draws per update; the
concentration gets the usual beta-augmented gamma update unless fixed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict

import numpy as np

from .cgmm import (
    FitConfig,
    MixtureState,
    PriorConfig,
    initial_state,
    normal_interval_logprob,
    sample_truncated_normal,
    update_component_params,
    update_k,
    update_weights,
)
from .data import MicDataset
from .errors import ConfigError, DataError
from .traces import TraceSet

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DpConfig:
    """Dirichlet-process run settings.

    The concentration has a Gamma(conc_shape, conc_rate) prior updated each
    sweep, unless ``fixed_concentration`` pins it. ``m_aux`` is the number of
    fresh prior draws offered to every observation.
    """

    conc_shape: float = 1.0
    conc_rate: float = 1.0
    m_aux: int = 3
    iterations: int = 1_000_000
    burnin: int = 100_000
    thin: int = 10
    seed: int = 0
    fixed_concentration: float | None = None

    def __post_init__(self):
        if self.conc_shape <= 0 or self.conc_rate <= 0:
            raise ConfigError("concentration prior parameters must be positive")
        if self.m_aux < 1:
            raise ConfigError("m_aux must be at least 1")
        if self.burnin >= self.iterations:
            raise ConfigError("burnin must be smaller than iterations")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")
        if self.fixed_concentration is not None and self.fixed_concentration <= 0:
            raise ConfigError("fixed concentration must be positive")


def recorded_values(data: MicDataset) -> np.ndarray:
    """Recorded log2 values per observation (censor labels at the boundaries)."""
    grid = data.single_grid()
    table = np.array(
        [grid.index_value_log2(j) for j in range(1, grid.censor_index + 1)]
    )
    return table[data.index_array() - 1]


def _gm_logweights(state: MixtureState, values: np.ndarray) -> np.ndarray:
    a = (values[:, None] - state.means[None, :]) / state.sds[None, :]
    with np.errstate(divide="ignore"):
        return (
            np.log(state.weights)[None, :]
            - 0.5 * a * a
            - np.log(state.sds)[None, :]
            - _LOG_SQRT_2PI
        )


def run_gm_chain(
    data: MicDataset, priors: PriorConfig, fit: FitConfig, seed: int | None = None
) -> TraceSet:
    """Uncensored Gaussian mixture chain on the recorded dilution values."""
    grid = data.single_grid()
    n = len(data)
    if n == 0:
        raise DataError("empty dataset")
    seed = fit.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    values = recorded_values(data)

    k0 = fit.k_init if fit.k_init is not None else min(priors.k_max, 10)
    state = initial_state(values, k0, priors)

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
        logw = _gm_logweights(state, values)
        z = np.argmax(logw + rng.gumbel(size=logw.shape), axis=1)
        means, sds = update_component_params(values, z, state.means, priors, rng)
        weights = update_weights(z, priors.delta, state.k, rng)
        k, z, weights, means, sds = update_k(z, means, sds, priors, rng)
        state = MixtureState(k=k, weights=weights, means=means, sds=sds, z=z, latent=values)
        if it > fit.burnin and (it - fit.burnin) % fit.thin == 0 and kept < n_keep:
            iters_rec[kept] = it
            k_rec[kept] = state.k
            kplus_rec[kept] = int(z.max()) + 1
            lw = _gm_logweights(state, values)
            peak = lw.max(axis=1)
            loglik_rec[kept] = float(
                np.sum(peak + np.log(np.sum(np.exp(lw - peak[:, None]), axis=1)))
            )
            weights_rec.append(state.weights.copy())
            means_rec.append(state.means.copy())
            sds_rec.append(state.sds.copy())
            alloc_rec[kept] = z
            kept += 1

    return TraceSet(
        method="gm",
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


def _dp_concentration_update(alpha, kplus, n, cfg: DpConfig, rng) -> float:
    # beta-augmented gamma update for the DP concentration
    eta = rng.beta(alpha + 1.0, n)
    rate = cfg.conc_rate - math.log(eta)
    odds = (cfg.conc_shape + kplus - 1.0) / (n * rate)
    if rng.random() < odds / (1.0 + odds):
        return float(rng.gamma(cfg.conc_shape + kplus, 1.0 / rate))
    return float(rng.gamma(cfg.conc_shape + kplus - 1.0, 1.0 / rate))


def run_dp_chain(
    data: MicDataset,
    dp_config: DpConfig,
    priors: PriorConfig,
    seed: int | None = None,
) -> TraceSet:
    """Dirichlet-process mixture chain over the censored-latent augmentation.

    Per sweep: latent values are redrawn on their cells, every observation is
    reallocated against existing clusters (weight n_k) and m auxiliary prior
    draws (weight alpha/m each), cluster parameters are refreshed conjugately
    and the concentration is updated. K+ is the number of occupied clusters.
    """
    grid = data.single_grid()
    n = len(data)
    if n == 0:
        raise DataError("empty dataset")
    seed = dp_config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    lower, upper = data.bounds_arrays()

    mid = np.where(np.isfinite(lower), lower, upper - 1.0) * 0.5 + np.where(
        np.isfinite(upper), upper, lower + 1.0
    ) * 0.5
    mus = [float(np.mean(mid))]
    sds = [max(float(np.std(mid)), 0.25)]
    counts = [n]
    z = np.zeros(n, dtype=np.int64)
    alpha = (
        dp_config.fixed_concentration
        if dp_config.fixed_concentration is not None
        else dp_config.conc_shape / dp_config.conc_rate
    )

    m_aux = dp_config.m_aux
    prior_sd_mu = math.sqrt(priors.tau2)
    n_keep = (dp_config.iterations - dp_config.burnin) // dp_config.thin
    k_rec = np.empty(n_keep, dtype=np.int64)
    loglik_rec = np.empty(n_keep)
    iters_rec = np.empty(n_keep, dtype=np.int64)
    weights_rec: list[np.ndarray] = []
    means_rec: list[np.ndarray] = []
    sds_rec: list[np.ndarray] = []
    alloc_rec = np.empty((n_keep, n), dtype=np.int8)

    t0 = time.perf_counter()
    kept = 0
    for it in range(1, dp_config.iterations + 1):
        mu_arr = np.array(mus)
        sd_arr = np.array(sds)
        latent = sample_truncated_normal(mu_arr[z], sd_arr[z], lower, upper, rng)

        # auxiliary-parameter reallocation pass; plain floats beat numpy at
        # the handful of live clusters this loop sees
        aux_mu_all = rng.normal(priors.mu0, prior_sd_mu, size=(n, m_aux)).tolist()
        aux_sd_all = (
            1.0 / np.sqrt(rng.gamma(priors.prec_shape, 1.0 / priors.prec_rate, size=(n, m_aux)))
        ).tolist()
        uni = rng.random(n).tolist()
        lat = latent.tolist()
        zl = z.tolist()
        alpha_m = alpha / m_aux
        exp = math.exp
        for i in range(n):
            c = zl[i]
            counts[c] -= 1
            aux_mu = aux_mu_all[i]
            aux_sd = aux_sd_all[i]
            if counts[c] == 0:
                # singleton: its parameters become the first auxiliary
                aux_mu[0], aux_sd[0] = mus[c], sds[c]
                last = len(mus) - 1
                if c != last:
                    mus[c], sds[c], counts[c] = mus[last], sds[last], counts[last]
                    for j in range(n):
                        if zl[j] == last:
                            zl[j] = c
                mus.pop(), sds.pop(), counts.pop()
            kc = len(mus)
            y = lat[i]
            tot = 0.0
            cum = []
            for k in range(kc):
                r = (y - mus[k]) / sds[k]
                tot += counts[k] * exp(-0.5 * r * r) / sds[k]
                cum.append(tot)
            for j in range(m_aux):
                r = (y - aux_mu[j]) / aux_sd[j]
                tot += alpha_m * exp(-0.5 * r * r) / aux_sd[j]
                cum.append(tot)
            u = uni[i] * tot
            pick = kc + m_aux - 1
            for k, edge in enumerate(cum):
                if u < edge:
                    pick = k
                    break
            if pick < kc:
                zl[i] = pick
                counts[pick] += 1
            else:
                mus.append(aux_mu[pick - kc])
                sds.append(aux_sd[pick - kc])
                counts.append(1)
                zl[i] = kc
        z = np.array(zl, dtype=np.int64)

        # conjugate refresh of cluster parameters
        kc = len(mus)
        new_means, new_sds = update_component_params(
            latent, z, np.array(mus), priors, rng
        )
        mus = list(new_means)
        sds = list(new_sds)

        if dp_config.fixed_concentration is None:
            alpha = _dp_concentration_update(alpha, kc, n, dp_config, rng)

        if it > dp_config.burnin and (it - dp_config.burnin) % dp_config.thin == 0 and kept < n_keep:
            weights = np.array(counts, dtype=float) / n
            mu_arr = np.array(mus)
            sd_arr = np.array(sds)
            a = (lower[:, None] - mu_arr[None, :]) / sd_arr[None, :]
            b = (upper[:, None] - mu_arr[None, :]) / sd_arr[None, :]
            with np.errstate(divide="ignore"):
                lw = np.log(weights)[None, :] + normal_interval_logprob(a, b)
            peak = lw.max(axis=1)
            iters_rec[kept] = it
            k_rec[kept] = kc
            loglik_rec[kept] = float(
                np.sum(peak + np.log(np.sum(np.exp(lw - peak[:, None]), axis=1)))
            )
            weights_rec.append(weights)
            means_rec.append(mu_arr)
            sds_rec.append(sd_arr)
            alloc_rec[kept] = z
            kept += 1

    return TraceSet(
        method="dp",
        iters=iters_rec,
        k=k_rec,
        kplus=k_rec.copy(),
        weights=weights_rec,
        means=means_rec,
        sds=sds_rec,
        allocations=alloc_rec,
        loglik=loglik_rec,
        seed=seed,
        drug_code=grid.drug_code,
        n_obs=n,
        runtime_s=time.perf_counter() - t0,
        meta={"priors": asdict(priors), "dp": asdict(dp_config)},
    )
