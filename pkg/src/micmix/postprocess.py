"""Relabeling, point estimation and chain diagnostics.

Components have a natural susceptible-to-resistant ordering on the log2
scale, so label switching is removed by sorting occupied components by
ascending mean within every draw (stable tie-break on the original index,
empty components last). Cluster 1 is then the susceptible group.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MicDataset
from .errors import DataError
from .traces import TraceSet


def relabel_trace(trace: TraceSet) -> TraceSet:
    """Sort occupied components by ascending mean within each draw, permuting
    weights, sds and allocations consistently; idempotent."""
    weights, means, sds = [], [], []
    alloc = trace.allocations.copy()
    has_alloc = alloc.shape[1] > 0
    for i in range(len(trace)):
        k = int(trace.k[i])
        m = trace.means[i]
        if has_alloc:
            occupied = np.unique(alloc[i])
        else:
            occupied = np.arange(int(trace.kplus[i]))
        empty = np.setdiff1d(np.arange(k), occupied)
        order = occupied[np.lexsort((occupied, m[occupied]))]
        perm = np.concatenate([order, empty])
        inv = np.empty(k, dtype=np.int64)
        inv[perm] = np.arange(k)
        weights.append(trace.weights[i][perm])
        means.append(m[perm])
        sds.append(trace.sds[i][perm])
        if has_alloc:
            alloc[i] = inv[alloc[i]]
    return TraceSet(
        method=trace.method,
        iters=trace.iters.copy(),
        k=trace.k.copy(),
        kplus=trace.kplus.copy(),
        weights=weights,
        means=means,
        sds=sds,
        allocations=alloc,
        loglik=trace.loglik.copy(),
        seed=trace.seed,
        drug_code=trace.drug_code,
        n_obs=trace.n_obs,
        runtime_s=trace.runtime_s,
        meta={**trace.meta, "relabeled": True},
    )


def concat_traces(traces: list[TraceSet]) -> TraceSet:
    """Pool retained draws of several chains (deterministic chain order)."""
    if not traces:
        raise DataError("no traces to pool")
    first = traces[0]
    if len({t.n_obs for t in traces}) != 1 or len({t.method for t in traces}) != 1:
        raise DataError("chains disagree on method or dataset size")
    return TraceSet(
        method=first.method,
        iters=np.concatenate([t.iters for t in traces]),
        k=np.concatenate([t.k for t in traces]),
        kplus=np.concatenate([t.kplus for t in traces]),
        weights=[w for t in traces for w in t.weights],
        means=[m for t in traces for m in t.means],
        sds=[s for t in traces for s in t.sds],
        allocations=np.concatenate([t.allocations for t in traces], axis=0),
        loglik=np.concatenate([t.loglik for t in traces]),
        seed=first.seed,
        drug_code=first.drug_code,
        n_obs=first.n_obs,
        runtime_s=float(sum(t.runtime_s for t in traces)),
        meta={**first.meta, "pooled_chains": len(traces)},
    )


@dataclass(frozen=True)
class PosteriorK:
    """Empirical posterior of the occupied-cluster count."""

    values: np.ndarray
    probs: np.ndarray
    mode: int

    def as_dict(self) -> dict[int, float]:
        return {int(v): float(p) for v, p in zip(self.values, self.probs)}


def posterior_k(trace: TraceSet) -> PosteriorK:
    """Pmf of K+ across draws; ties on the mode break toward smaller K+."""
    if len(trace) == 0:
        raise DataError("empty trace")
    counts = np.bincount(trace.kplus)
    values = np.nonzero(counts)[0]
    probs = counts[values] / len(trace)
    # mode with ties broken toward the smaller cluster count
    mode = int(values[np.flatnonzero(probs == probs.max())[0]])
    return PosteriorK(values=values.astype(np.int64), probs=probs, mode=mode)


@dataclass
class ClusterAssignments:
    """Per-observation MAP clusters and class probabilities for one drug.

    ``map_cluster`` is 1-based with cluster 1 the lowest-mean (susceptible)
    group; probabilities are fractions of modal-K+ draws.
    """

    drug_code: str
    strain_ids: tuple[str, ...]
    replicate_ids: tuple[int | None, ...]
    k_mode: int
    probs: np.ndarray
    map_cluster: np.ndarray
    method: str = "cgmm"

    def __post_init__(self):
        if len(self.strain_ids) != self.probs.shape[0]:
            raise DataError("probability rows must match observations")
        if self.probs.shape[1] != self.k_mode:
            raise DataError("probability columns must match the modal K+")
        sums = self.probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise DataError("class probabilities must sum to 1 within 1e-9")
        if np.any((self.map_cluster < 1) | (self.map_cluster > self.k_mode)):
            raise DataError("map_cluster out of range")

    @property
    def susceptible(self) -> np.ndarray:
        return self.map_cluster == 1

    @property
    def resistant(self) -> np.ndarray:
        return self.map_cluster >= 2

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["strain_id", "drug", "map_cluster", "susceptible"]
                + [f"p_{c + 1}" for c in range(self.k_mode)]
            )
            for i, strain in enumerate(self.strain_ids):
                writer.writerow(
                    [strain, self.drug_code, int(self.map_cluster[i]),
                     str(bool(self.map_cluster[i] == 1)).lower()]
                    + [f"{p:.6f}" for p in self.probs[i]]
                )

    @classmethod
    def from_csv(cls, path, method: str = "unknown") -> "ClusterAssignments":
        strains, rows, maps = [], [], []
        drug = ""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            pcols = [f for f in fields if f.startswith("p_")]
            if "strain_id" not in fields or "map_cluster" not in fields or not pcols:
                raise DataError(f"{path}: not an assignment CSV")
            for row in reader:
                strains.append(row["strain_id"])
                drug = row["drug"]
                maps.append(int(row["map_cluster"]))
                rows.append([float(row[c]) for c in pcols])
        return cls(
            drug_code=drug,
            strain_ids=tuple(strains),
            replicate_ids=tuple([None] * len(strains)),
            k_mode=len(rows[0]) if rows else 0,
            probs=np.asarray(rows),
            map_cluster=np.asarray(maps, dtype=np.int64),
            method=method,
        )


def map_allocations(trace: TraceSet, data: MicDataset) -> ClusterAssignments:
    """Point-estimate clusters: restrict to draws at the modal K+, take each
    observation's allocation frequencies, MAP with ties toward the lower
    cluster. The trace is relabeled first if it was not already."""
    if not trace.meta.get("relabeled"):
        trace = relabel_trace(trace)
    if trace.allocations.shape[1] == 0:
        raise DataError("trace carries no allocation samples")
    if trace.allocations.shape[1] != len(data.observations):
        raise DataError("trace allocations and dataset size disagree")
    k_mode = posterior_k(trace).mode
    keep = trace.kplus == k_mode
    sub = trace.allocations[keep]
    n = sub.shape[1]
    probs = np.empty((n, k_mode))
    for c in range(k_mode):
        probs[:, c] = np.mean(sub == c, axis=0)
    map_cluster = np.argmax(probs, axis=1) + 1  # argmax takes the lower index on ties
    grid = data.single_grid()
    return ClusterAssignments(
        drug_code=grid.drug_code,
        strain_ids=tuple(o.strain_id for o in data.observations),
        replicate_ids=tuple(o.replicate_id for o in data.observations),
        k_mode=k_mode,
        probs=probs,
        map_cluster=map_cluster.astype(np.int64),
        method=trace.method,
    )


def effective_sample_size(x: np.ndarray) -> float:
    """ESS by Geyer's initial monotone positive sequence, capped at n."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    gamma0 = float(np.dot(x, x)) / n
    if gamma0 == 0.0:
        return float(n)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f))[:n].real / n

    sigma2 = -gamma0
    prev = math.inf
    for m in range(n // 2):
        pair = acov[2 * m] + acov[2 * m + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev)
        sigma2 += 2.0 * pair
        prev = pair
    if sigma2 <= 0.0:
        return float(n)
    return float(min(n, n * gamma0 / sigma2))


def potential_scale_reduction(chains: list[np.ndarray]) -> float:
    """PSR across whole chains: sqrt(1 + between-chain variance / within).

    Identical chains give exactly 1; stuck chains inflate it.
    """
    if len(chains) < 2:
        raise DataError("potential scale reduction needs at least two chains")
    w = float(np.mean([np.var(c, ddof=1) for c in chains]))
    vb = float(np.var([np.mean(c) for c in chains], ddof=1))
    if w == 0.0:
        return 1.0 if vb == 0.0 else math.inf
    return math.sqrt(1.0 + vb / w)


def geweke_z(x: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """Z-score comparing the mean of the first 10% against the last 50%,
    with ESS-adjusted standard errors."""
    x = np.asarray(x, dtype=float)
    n = x.size
    a = x[: max(2, int(first * n))]
    b = x[-max(2, int(last * n)):]
    va = np.var(a, ddof=1) / max(effective_sample_size(a), 1.0)
    vb = np.var(b, ddof=1) / max(effective_sample_size(b), 1.0)
    denom = math.sqrt(va + vb)
    if denom == 0.0:
        return 0.0
    return float((a.mean() - b.mean()) / denom)


@dataclass
class DiagnosticsReport:
    """Per-parameter convergence summaries and per-chain run facts."""

    params: dict[str, dict[str, float]]
    chains: list[dict[str, float]]
    n_draws: int

    def to_json(self, path) -> None:
        # wall-clock runtimes stay out of artifacts so reruns with the same
        # seed are byte-identical; they remain on the in-memory report
        chains = [
            {k: v for k, v in chain.items() if k != "runtime_s"} for chain in self.chains
        ]
        payload = {"params": self.params, "chains": chains, "n_draws": self.n_draws}
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _scalar_series(trace: TraceSet) -> dict[str, np.ndarray]:
    mean_mu = np.empty(len(trace))
    for i in range(len(trace)):
        if trace.allocations.shape[1]:
            occ = np.unique(trace.allocations[i])
        else:
            occ = np.arange(int(trace.kplus[i]))
        mean_mu[i] = trace.means[i][occ].mean()
    return {
        "mean_mu": mean_mu,
        "kplus": trace.kplus.astype(float),
        "loglik": trace.loglik.astype(float),
    }


def diagnostics(traces: list[TraceSet]) -> DiagnosticsReport:
    """ESS, potential scale reduction and Geweke z on scalar chain summaries
    (mean of occupied means, K+, log-likelihood) across two or more chains."""
    if len(traces) < 2:
        raise DataError("diagnostics needs at least two chains")
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise DataError("chains must have equal length")
    m = lengths.pop()
    if m < 10:
        raise DataError("need at least 10 retained draws per chain")

    series = [_scalar_series(t) for t in traces]
    params: dict[str, dict[str, float]] = {}
    for name in ("mean_mu", "kplus", "loglik"):
        per_chain = [s[name] for s in series]
        ess = float(sum(effective_sample_size(c) for c in per_chain))
        psr = potential_scale_reduction(per_chain)
        gz = max((geweke_z(c) for c in per_chain), key=abs)
        params[name] = {"ess": ess, "psr": psr, "geweke_z": float(gz)}
    chains = [
        {"n_draws": float(len(t)), "runtime_s": float(t.runtime_s), "seed": float(t.seed)}
        for t in traces
    ]
    return DiagnosticsReport(params=params, chains=chains, n_draws=m)
