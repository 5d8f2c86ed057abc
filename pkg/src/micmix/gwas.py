"""Spike-and-slab multinomial regression of cluster labels on genome-wide
variants with a polygenic random effect; Manhattan-plot data export.

Model: observation i with class y_i in {1..K} (class 1, the susceptible
cluster, is the softmax reference with linear predictor 0). For k >= 2,
eta_ik = x_i' beta_k + u_ik where beta_jk = gamma_j * b_jk shares one
inclusion indicator per variant across classes, b_jk has a Normal slab,
gamma_j ~ Bernoulli(omega) with omega ~ Beta(a, b), and each non-reference
class carries its own polygenic effect u_k ~ Normal(0, sigma_u^2 Sigma)
with a common inverse-gamma variance. A shared effect added to every class
would cancel out of the softmax, so per-class effects are the identifiable
reading of the polygenic term.

Sampling: per class, the conditional likelihood given the other classes is
binary-logistic in eta_k minus an offset, so Polya-Gamma augmentation gives
exact Gaussian updates for the active slab coefficients and u_k. Inclusion
indicators flip against the exact softmax likelihood (coefficients for
excluded variants refresh from the slab), and omega and sigma_u^2 are
conjugate.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from ._pg import sample_pg1
from .errors import ConfigError, DataError
from .postprocess import ClusterAssignments


@dataclass(frozen=True)
class SnpMatrix:
    """Binary genotypes: strains by variants, with genomic positions."""

    strain_ids: tuple[str, ...]
    variant_ids: tuple[str, ...]
    positions: tuple[int, ...]
    genotypes: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.genotypes, dtype=np.uint8)
        if x.shape != (len(self.strain_ids), len(self.variant_ids)):
            raise DataError("genotype matrix shape disagrees with identifiers")
        if len(self.positions) != len(self.variant_ids):
            raise DataError("positions must match variants")
        if x.size and not np.isin(x, (0, 1)).all():
            raise DataError("genotypes must be 0/1")
        object.__setattr__(self, "genotypes", x)

    @property
    def n(self) -> int:
        return len(self.strain_ids)

    @property
    def p(self) -> int:
        return len(self.variant_ids)


def filter_variants(snps: SnpMatrix, maf_min: float = 0.01, max_variants: int = 20_000) -> SnpMatrix:
    """Drop variants with minor-allele frequency below the floor (and
    monomorphic columns); beyond the cap, keep the first variants in
    position order. Deterministic."""
    freq = snps.genotypes.mean(axis=0)
    maf = np.minimum(freq, 1.0 - freq)
    keep = np.flatnonzero(maf >= maf_min)
    if keep.size > max_variants:
        order = np.argsort(np.asarray(snps.positions)[keep], kind="stable")
        keep = np.sort(keep[order[:max_variants]])
    return SnpMatrix(
        strain_ids=snps.strain_ids,
        variant_ids=tuple(snps.variant_ids[j] for j in keep),
        positions=tuple(snps.positions[j] for j in keep),
        genotypes=snps.genotypes[:, keep],
    )


def compute_grm(snps: SnpMatrix) -> np.ndarray:
    """Genetic relationship matrix: column-standardized X X' / p plus a
    1e-6 ridge for positive definiteness. Monomorphic columns are dropped."""
    x = snps.genotypes.astype(float)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    poly = sd > 0
    if not poly.any():
        raise DataError("no polymorphic variants for the relationship matrix")
    xs = (x[:, poly] - mu[poly]) / sd[poly]
    sigma = xs @ xs.T / xs.shape[1]
    sigma[np.diag_indices_from(sigma)] += 1e-6
    return sigma


def softmax_probs(eta) -> np.ndarray:
    """Overflow-safe softmax along the last axis."""
    eta = np.asarray(eta, dtype=float)
    shifted = eta - eta.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class GwasConfig:
    """Spike-and-slab regression settings.

    ``slab_var`` is the slab prior variance; inclusion probability gets a
    Beta(incl_a, incl_b) prior where incl_b defaults to the number of
    variants; ``sigma_u`` priors are inverse-gamma shape/scale.
    """

    slab_var: float = 1.0
    incl_a: float = 1.0
    incl_b: float | None = None
    sigma_u_shape: float = 2.0
    sigma_u_scale: float = 1.0
    iterations: int = 4000
    burnin: int = 1000
    thin: int = 2
    seed: int = 0
    pip_threshold: float = 0.95

    def __post_init__(self):
        for name in ("slab_var", "incl_a", "sigma_u_shape", "sigma_u_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.incl_b is not None and self.incl_b <= 0:
            raise ConfigError("incl_b must be positive")
        if not 0.0 < self.pip_threshold < 1.0:
            raise ConfigError("pip_threshold must lie in (0, 1)")
        if self.burnin >= self.iterations:
            raise ConfigError("burnin must be smaller than iterations")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")


@dataclass
class GwasTrace:
    """Retained draws of the spike-and-slab chain."""

    variant_ids: tuple[str, ...]
    positions: tuple[int, ...]
    n_classes: int
    gamma: np.ndarray       # draws x p, bool
    effects: np.ndarray     # draws x p x (K-1)
    sigma_u2: np.ndarray    # draws
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.gamma.shape[0]


def _align_labels(labels: ClusterAssignments, snps: SnpMatrix) -> np.ndarray:
    by_strain: dict[str, int] = {}
    for strain, cluster in zip(labels.strain_ids, labels.map_cluster):
        if strain in by_strain and by_strain[strain] != int(cluster):
            raise DataError(f"conflicting cluster labels for strain {strain}")
        by_strain[strain] = int(cluster)
    missing = [s for s in snps.strain_ids if s not in by_strain]
    if missing:
        raise DataError(f"strains missing cluster labels: {missing[:5]}")
    return np.array([by_strain[s] - 1 for s in snps.strain_ids], dtype=np.int64)


def _row_loglik(eta, y):
    return eta[np.arange(eta.shape[0]), y] - logsumexp(eta, axis=1)


def run_gwas_chain(
    labels: ClusterAssignments,
    snps: SnpMatrix,
    grm: np.ndarray,
    config: GwasConfig,
    seed: int | None = None,
    prior_only: bool = False,
) -> GwasTrace:
    """Run the spike-and-slab multinomial chain; deterministic given seed.

    ``prior_only`` disables the likelihood so the Gibbs plumbing targets the
    prior (validation hook: inclusion probabilities must then reproduce
    a / (a + b)).
    """
    y = _align_labels(labels, snps)
    n, p = snps.n, snps.p
    n_classes = int(y.max()) + 1
    if np.unique(y).size < 2:
        raise DataError("need at least two classes present in the labels")
    if grm.shape != (n, n):
        raise DataError("relationship matrix shape disagrees with strains")
    if p < 1:
        raise DataError("no variants")

    rng = np.random.default_rng(config.seed if seed is None else seed)
    x = snps.genotypes.astype(float)
    carriers = [np.flatnonzero(x[:, j]) for j in range(p)]
    incl_b = float(p) if config.incl_b is None else config.incl_b
    tau2 = config.slab_var
    kk = n_classes - 1  # non-reference classes

    sigma_chol = cho_factor(grm, lower=True)
    sigma_inv = cho_solve(sigma_chol, np.eye(n))
    d_onehot = np.zeros((n, n_classes))
    d_onehot[np.arange(n), y] = 1.0

    gamma = np.zeros(p, dtype=bool)
    b = rng.normal(0.0, math.sqrt(tau2), size=(p, kk))
    u = np.zeros((n, kk))
    omega = config.incl_a / (config.incl_a + incl_b)
    sigma_u2 = config.sigma_u_scale / max(config.sigma_u_shape - 1.0, 0.5)
    grm_chol_l = np.linalg.cholesky(grm)

    n_keep = (config.iterations - config.burnin) // config.thin
    gamma_rec = np.zeros((n_keep, p), dtype=bool)
    eff_rec = np.zeros((n_keep, p, kk))
    su2_rec = np.zeros(n_keep)

    def eta_matrix():
        eta = np.zeros((n, n_classes))
        active = np.flatnonzero(gamma)
        eta[:, 1:] = u if not active.size else x[:, active] @ b[active] + u
        return eta

    t0 = time.perf_counter()
    kept = 0
    for it in range(1, config.iterations + 1):
        if prior_only:
            gamma = rng.random(p) < omega
            b = rng.normal(0.0, math.sqrt(tau2), size=(p, kk))
            sigma_u2 = 1.0 / rng.gamma(config.sigma_u_shape, 1.0 / config.sigma_u_scale)
            u = math.sqrt(sigma_u2) * (grm_chol_l @ rng.standard_normal((n, kk)))
            omega = rng.beta(config.incl_a + gamma.sum(), incl_b + p - gamma.sum())
        else:
            eta = eta_matrix()
            scaled_prior_prec = sigma_inv / sigma_u2
            for k in range(1, n_classes):
                cols = [c for c in range(n_classes) if c != k]
                sub = eta[:, cols]
                peak = sub.max(axis=1)
                offset = peak + np.log(np.exp(sub - peak[:, None]).sum(axis=1))
                psi = eta[:, k] - offset
                om = sample_pg1(psi, rng)
                zres = (d_onehot[:, k] - 0.5) / om + offset

                active = np.flatnonzero(gamma)
                r = zres - u[:, k - 1]
                if active.size:
                    xa = x[:, active]
                    prec = xa.T @ (om[:, None] * xa) + np.eye(active.size) / tau2
                    rhs = xa.T @ (om * r)
                    lf = cho_factor(prec, lower=True, check_finite=False)[0]
                    tmp = solve_triangular(lf, rhs, lower=True, check_finite=False)
                    mean = solve_triangular(lf.T, tmp, lower=False, check_finite=False)
                    noise = solve_triangular(
                        lf.T, rng.standard_normal(active.size), lower=False, check_finite=False
                    )
                    b[active, k - 1] = mean + noise
                    xb = xa @ b[active, k - 1]
                else:
                    xb = np.zeros(n)
                inactive = np.flatnonzero(~gamma)
                b[inactive, k - 1] = rng.normal(0.0, math.sqrt(tau2), size=inactive.size)

                q = scaled_prior_prec.copy()
                q[np.diag_indices_from(q)] += om
                rhs = om * (zres - xb)
                lf = cho_factor(q, lower=True, check_finite=False)[0]
                tmp = solve_triangular(lf, rhs, lower=True, check_finite=False)
                mean = solve_triangular(lf.T, tmp, lower=False, check_finite=False)
                noise = solve_triangular(
                    lf.T, rng.standard_normal(n), lower=False, check_finite=False
                )
                u[:, k - 1] = mean + noise
                eta[:, k] = xb + u[:, k - 1]

            # inclusion flips against the exact softmax likelihood; work on a
            # cached exp(eta) so each flip is a rank-one update over carriers
            log_prior_odds = math.log(omega) - math.log1p(-omega)
            exp_eta = np.exp(eta[:, 1:])
            row_sum = 1.0 + exp_eta.sum(axis=1)
            uniforms = rng.random(p)
            for j in range(p):
                rows = carriers[j]
                if rows.size == 0:
                    gamma[j] = uniforms[j] < omega
                    continue
                delta = b[j]
                grow = np.exp(delta) - 1.0
                yr = y[rows]
                picked = yr > 0
                lin = float(delta[yr[picked] - 1].sum())
                if not gamma[j]:
                    on_sum = row_sum[rows] + exp_eta[rows] @ grow
                    ll_delta = lin - float(
                        np.sum(np.log(on_sum)) - np.sum(np.log(row_sum[rows]))
                    )
                    logit_on = log_prior_odds + ll_delta
                    if math.log(uniforms[j]) < -np.logaddexp(0.0, -logit_on):
                        gamma[j] = True
                        exp_eta[rows] *= np.exp(delta)
                        row_sum[rows] = on_sum
                        eta[np.ix_(rows, np.arange(1, n_classes))] += delta
                else:
                    shrink = np.exp(-delta) - 1.0
                    off_sum = row_sum[rows] + exp_eta[rows] @ shrink
                    ll_delta = lin - float(
                        np.sum(np.log(row_sum[rows])) - np.sum(np.log(off_sum))
                    )
                    logit_on = log_prior_odds + ll_delta
                    if not (math.log(uniforms[j]) < -np.logaddexp(0.0, -logit_on)):
                        gamma[j] = False
                        exp_eta[rows] *= np.exp(-delta)
                        row_sum[rows] = off_sum
                        eta[np.ix_(rows, np.arange(1, n_classes))] -= delta

            omega = rng.beta(config.incl_a + gamma.sum(), incl_b + p - gamma.sum())
            quad = float(np.sum(u * (sigma_inv @ u)))
            sigma_u2 = 1.0 / rng.gamma(
                config.sigma_u_shape + 0.5 * kk * n,
                1.0 / (config.sigma_u_scale + 0.5 * quad),
            )

        if it > config.burnin and (it - config.burnin) % config.thin == 0 and kept < n_keep:
            gamma_rec[kept] = gamma
            eff = np.where(gamma[:, None], b, 0.0)
            eff_rec[kept] = eff
            su2_rec[kept] = sigma_u2
            kept += 1

    return GwasTrace(
        variant_ids=snps.variant_ids,
        positions=snps.positions,
        n_classes=n_classes,
        gamma=gamma_rec,
        effects=eff_rec,
        sigma_u2=su2_rec,
        seed=config.seed if seed is None else seed,
        meta={
            "config": asdict(config),
            "prior_only": prior_only,
            "runtime_s": time.perf_counter() - t0,
            "significance_rule": "posterior inclusion probability >= threshold",
        },
    )


@dataclass
class GwasResult:
    """Per-variant posterior summaries, ordered by genomic position."""

    variant_ids: tuple[str, ...]
    positions: tuple[int, ...]
    pip: np.ndarray
    effects: np.ndarray          # p x (K-1), conditional on inclusion
    significant: np.ndarray
    score: np.ndarray            # -log10(1 - PIP), clipped at 6
    threshold: float
    threshold_line: float
    n_classes: int
    sigma_u2_mean: float
    sigma_u2_sd: float

    def to_results_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["variant_id", "position", "pip"]
                + [f"effect_class{k}" for k in range(2, self.n_classes + 1)]
                + ["significant"]
            )
            for i in range(len(self.variant_ids)):
                writer.writerow(
                    [self.variant_ids[i], self.positions[i], f"{self.pip[i]:.6f}"]
                    + [repr(float(v)) for v in self.effects[i]]
                    + [str(bool(self.significant[i])).lower()]
                )

    def to_manhattan_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["variant_id", "position", "score", "threshold_line"])
            for i in range(len(self.variant_ids)):
                writer.writerow(
                    [
                        self.variant_ids[i],
                        self.positions[i],
                        f"{self.score[i]:.6f}",
                        f"{self.threshold_line:.6f}",
                    ]
                )


def summarize_gwas(trace: GwasTrace, config: GwasConfig) -> GwasResult:
    """PIPs, effects conditional on inclusion, significance calls and
    Manhattan scores, rows ordered by genomic position."""
    if len(trace) == 0:
        raise DataError("empty GWAS trace")
    order = np.argsort(np.asarray(trace.positions), kind="stable")
    pip = trace.gamma.mean(axis=0)
    kk = trace.n_classes - 1
    effects = np.zeros((trace.gamma.shape[1], kk))
    counts = trace.gamma.sum(axis=0)
    for j in np.flatnonzero(counts):
        effects[j] = trace.effects[trace.gamma[:, j], j].mean(axis=0)
    score = -np.log10(np.maximum(1.0 - pip, 1e-6))
    significant = pip >= config.pip_threshold
    return GwasResult(
        variant_ids=tuple(trace.variant_ids[i] for i in order),
        positions=tuple(trace.positions[i] for i in order),
        pip=pip[order],
        effects=effects[order],
        significant=significant[order],
        score=score[order],
        threshold=config.pip_threshold,
        threshold_line=float(-math.log10(max(1.0 - config.pip_threshold, 1e-6))),
        n_classes=trace.n_classes,
        sigma_u2_mean=float(trace.sigma_u2.mean()),
        sigma_u2_sd=float(trace.sigma_u2.std()),
    )


def load_snp_csv(path) -> SnpMatrix:
    """Read genotypes from long form (``strain_id,variant_id,position,allele``)
    or wide form (``strain_id`` then one 0/1 column per variant; positions
    default to the column order)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty SNP file")
        header = [h.strip() for h in header]
        if {"strain_id", "variant_id", "position", "allele"}.issubset(header):
            si, vi, pi, ai = (
                header.index("strain_id"),
                header.index("variant_id"),
                header.index("position"),
                header.index("allele"),
            )
            strains: list[str] = []
            strain_pos: dict[str, int] = {}
            variants: dict[str, int] = {}
            positions: dict[str, int] = {}
            entries: list[tuple[int, str, int]] = []
            for lineno, row in enumerate(reader, start=2):
                strain, variant = row[si].strip(), row[vi].strip()
                if strain not in strain_pos:
                    strain_pos[strain] = len(strains)
                    strains.append(strain)
                try:
                    pos = int(row[pi])
                    allele = int(row[ai])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad position or allele") from exc
                if allele not in (0, 1):
                    raise DataError(f"{path}:{lineno}: allele must be 0 or 1")
                if variant in positions and positions[variant] != pos:
                    raise DataError(f"{path}:{lineno}: conflicting positions for {variant}")
                positions[variant] = pos
                variants.setdefault(variant, len(variants))
                entries.append((strain_pos[strain], variant, allele))
            x = np.zeros((len(strains), len(variants)), dtype=np.uint8)
            for srow, variant, allele in entries:
                x[srow, variants[variant]] = allele
            ids = tuple(variants)
            return SnpMatrix(
                strain_ids=tuple(strains),
                variant_ids=ids,
                positions=tuple(positions[v] for v in ids),
                genotypes=x,
            )
        if header and header[0] == "strain_id":
            ids = tuple(h for h in header[1:])
            strains = []
            rows = []
            for lineno, row in enumerate(reader, start=2):
                strains.append(row[0].strip())
                try:
                    rows.append([int(v) for v in row[1:]])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: alleles must be 0/1") from exc
            return SnpMatrix(
                strain_ids=tuple(strains),
                variant_ids=ids,
                positions=tuple(range(1, len(ids) + 1)),
                genotypes=np.asarray(rows, dtype=np.uint8),
            )
        raise DataError(f"{path}: unrecognized SNP CSV header")
