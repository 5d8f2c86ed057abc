"""Epidemiological-cutoff baseline: fit a log-normal cumulative curve to the
wild-type mode by nonlinear least squares and emit quantile cutoffs.

The wild-type subset is chosen automatically: candidate subset ends run from
one past the count mode to five past it (clamped to the grid top), each is
fitted by Levenberg-Marquardt on cumulative counts, and the candidate with
the smallest per-point residual sum of squares wins. The tool this mirrors
publishes no subset rule, so cutoffs from other implementations may differ
by a dilution; the criterion here is documented and deterministic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import ndtr, ndtri

from .data import DrugGrid, MicDataset
from .errors import DataError, FitError

DEFAULT_QUANTILES = (0.95, 0.99, 0.999)

_MAX_NFEV = 200


@dataclass
class EcoffFit:
    """Fitted wild-type log-normal component and derived cutoffs.

    ``mu`` and ``sigma`` are on the log2 scale, ``n_fit`` is the implied
    wild-type population size, ``subset_end`` the 1-based dilution index the
    fit used, and ``cutoffs`` maps quantiles to mg/L values.
    """

    mu: float
    sigma: float
    n_fit: float
    subset_end: int
    rss: float
    cutoffs: dict[float, float] = field(default_factory=dict)


def counts_from_dataset(data: MicDataset, drug_code: str) -> np.ndarray:
    """Counts per dilution index 1..T+1 for the ECOFF fit."""
    return data.counts_per_dilution(drug_code)


def _fit_candidate(dil: np.ndarray, cum: np.ndarray, end: int):
    # end: number of leading cells used (1-based subset end)
    d = dil[:end]
    c = cum[:end]
    total = c[-1]
    centers = d - 0.5
    weights = np.diff(np.concatenate(([0.0], c)))
    mean0 = float(np.sum(weights * centers) / total)
    sd0 = float(math.sqrt(max(np.sum(weights * (centers - mean0) ** 2) / total, 0.09)))
    frac = min(max(ndtr((d[-1] - mean0) / sd0), 0.3), 0.999)
    n0 = total / frac

    def resid(theta):
        log_n, mu, log_sd = theta
        return c - math.exp(log_n) * ndtr((d - mu) / math.exp(log_sd))

    result = least_squares(
        resid,
        x0=[math.log(n0), mean0, math.log(sd0)],
        method="lm",
        max_nfev=_MAX_NFEV,
    )
    rss = float(np.sum(result.fun**2))
    if not result.success:
        raise FitError(
            "curve fit did not converge within "
            f"{_MAX_NFEV} evaluations; best iterate mu={result.x[1]:.4f}, "
            f"sigma={math.exp(result.x[2]):.4f}, rss={rss:.4g}"
        )
    return result.x, rss


def fit_wildtype_lognormal(
    counts, grid: DrugGrid, quantiles=DEFAULT_QUANTILES
) -> EcoffFit:
    """Fit the wild-type mode on cumulative counts over tested dilutions.

    ``counts`` has one entry per dilution index (the right-censor cell may be
    included; it never enters the fit). Requires an interior count mode and
    at least three populated cells in some candidate subset.
    """
    counts = np.asarray(counts, dtype=float)
    t = grid.n_dilutions
    if counts.ndim != 1 or len(counts) not in (t, t + 1):
        raise DataError("counts length must match the grid (T or T+1 cells)")
    if np.any(counts < 0):
        raise DataError("counts must be nonnegative")
    tested = counts[:t]
    if tested.sum() <= 0:
        raise DataError("no observations in tested cells")

    dil = np.asarray(grid.tested_log2)
    cum = np.cumsum(tested)
    mode = int(np.argmax(tested))  # first maximum
    if mode >= t - 1:
        raise FitError(
            "no interior count mode (monotone counts); supply a manual subset"
        )

    best = None
    for end in range(mode + 2, min(mode + 6, t) + 1):  # 1-based subset ends
        if np.count_nonzero(tested[:end]) < 3 or end < 3:
            continue
        try:
            theta, rss = _fit_candidate(dil, cum, end)
        except FitError:
            continue
        score = rss / end
        if best is None or score < best[0]:
            best = (score, end, theta, rss)
    if best is None:
        raise FitError(
            "no admissible wild-type subset (need an interior mode and at "
            "least 3 populated cells); supply a manual subset"
        )
    _, end, theta, rss = best
    sigma = math.exp(theta[2])
    n_fit = math.exp(theta[0])
    if sigma < 1e-3:
        raise FitError("degenerate wild-type fit (sigma collapsed)")
    fit = EcoffFit(mu=float(theta[1]), sigma=sigma, n_fit=n_fit, subset_end=end, rss=rss)
    for q in quantiles:
        fit.cutoffs[q] = ecoff_cutoff(fit, q, grid)
    return fit


def ecoff_cutoff(fit: EcoffFit, q: float, grid: DrugGrid) -> float:
    """mg/L cutoff at quantile q: the smallest tested dilution at or above
    mu + z_q sigma, conservatively rounded up; past the grid top the censor
    label is returned with a warning."""
    if not 0.0 < q < 1.0:
        raise DataError("quantile must lie strictly between 0 and 1")
    x_q = fit.mu + ndtri(q) * fit.sigma
    tested = np.asarray(grid.tested_log2)
    pos = int(np.searchsorted(tested, x_q, side="left"))
    if pos >= grid.n_dilutions:
        warnings.warn(
            f"{grid.drug_code}: quantile {q} exceeds the top tested dilution; "
            "returning the censor label",
            stacklevel=2,
        )
        return float(2.0 ** float(grid.censor_label_log2))
    return float(2.0 ** tested[pos])


@dataclass(frozen=True)
class BinaryLabels:
    """Per-observation resistant/susceptible calls from a cutoff."""

    drug_code: str
    strain_ids: tuple[str, ...]
    replicate_ids: tuple[int | None, ...]
    resistant: np.ndarray
    method: str = "ecoff"

    @property
    def susceptible(self) -> np.ndarray:
        return ~self.resistant


def classify_by_cutoff(data: MicDataset, drug_code: str, cutoff_mgl: float) -> BinaryLabels:
    """Resistant iff the recorded MIC in mg/L strictly exceeds the cutoff.

    Censor-label observations carry one doubling above the top tested well,
    so they are resistant whenever the cutoff is at or below the grid top.
    """
    ds = data.restrict(drug_code)
    grid = ds.single_grid()
    if cutoff_mgl <= 0:
        raise DataError("cutoff must be positive")
    mgl = np.array(
        [2.0 ** grid.index_value_log2(o.dilution_index) for o in ds.observations]
    )
    return BinaryLabels(
        drug_code=drug_code,
        strain_ids=tuple(o.strain_id for o in ds.observations),
        replicate_ids=tuple(o.replicate_id for o in ds.observations),
        resistant=mgl > cutoff_mgl,
    )
