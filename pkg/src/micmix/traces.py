"""Thinned MCMC traces and their on-disk layout.

Trace CSV rows are one retained draw each:
``iter,K,Kplus,weights,means,sds,loglik`` with the variable-width lists
serialized as semicolon-joined fields. Allocation samples go to a separate
CSV on request (``iter,allocations``, 1-based component labels). Run
metadata (method, seed, configuration echo) lives in a JSON sidecar so the
numeric artifacts stay byte-identical across reruns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class TraceSet:
    """Retained draws of one chain, plus run metadata."""

    method: str
    iters: np.ndarray
    k: np.ndarray
    kplus: np.ndarray
    weights: list[np.ndarray]
    means: list[np.ndarray]
    sds: list[np.ndarray]
    allocations: np.ndarray
    loglik: np.ndarray
    seed: int
    drug_code: str
    n_obs: int
    runtime_s: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.iters)

    def validate(self):
        m = len(self.iters)
        if not (
            m == len(self.k) == len(self.kplus) == len(self.weights)
            == len(self.means) == len(self.sds) == len(self.loglik)
            == self.allocations.shape[0]
        ):
            raise ValueError("trace record lengths disagree")
        for i in range(m):
            if not (self.k[i] == len(self.weights[i]) == len(self.means[i]) == len(self.sds[i])):
                raise ValueError(f"draw {i}: component array lengths disagree with K")
            if abs(self.weights[i].sum() - 1.0) > 1e-12 or np.any(self.weights[i] < 0):
                raise ValueError(f"draw {i}: weights are not a simplex")
            if np.any(self.sds[i] <= 0):
                raise ValueError(f"draw {i}: non-positive sd")
            if self.kplus[i] > self.k[i]:
                raise ValueError(f"draw {i}: more occupied clusters than components")


def _join(values) -> str:
    return ";".join(repr(float(v)) for v in values)


def _split(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(";")]) if text else np.empty(0)


def save_trace_csv(trace: TraceSet, path, allocations_path=None) -> None:
    """Write the trace CSV (and optionally the allocation CSV) plus the
    metadata sidecar ``<path>.meta.json``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "K", "Kplus", "weights", "means", "sds", "loglik"])
        for i in range(len(trace)):
            writer.writerow(
                [
                    int(trace.iters[i]),
                    int(trace.k[i]),
                    int(trace.kplus[i]),
                    _join(trace.weights[i]),
                    _join(trace.means[i]),
                    _join(trace.sds[i]),
                    repr(float(trace.loglik[i])),
                ]
            )
    meta = {
        "method": trace.method,
        "seed": trace.seed,
        "drug_code": trace.drug_code,
        "n_obs": trace.n_obs,
        "meta": _jsonable(trace.meta),
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    if allocations_path is not None:
        save_allocations_csv(trace, allocations_path)


def save_allocations_csv(trace: TraceSet, path) -> None:
    """Per-draw allocation samples, component labels written 1-based."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "allocations"])
        for i in range(len(trace)):
            writer.writerow(
                [int(trace.iters[i]), ";".join(str(int(z) + 1) for z in trace.allocations[i])]
            )


def load_trace_csv(path, allocations_path=None) -> TraceSet:
    """Read a trace CSV back; allocations are filled from the companion CSV
    when given, otherwise left empty."""
    iters, ks, kplus, loglik = [], [], [], []
    weights, means, sds = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"iter", "K", "Kplus", "weights", "means", "sds", "loglik"}
        if not required.issubset(reader.fieldnames or set()):
            raise DataError(f"{path}: not a trace CSV")
        for row in reader:
            iters.append(int(row["iter"]))
            ks.append(int(row["K"]))
            kplus.append(int(row["Kplus"]))
            weights.append(_split(row["weights"]))
            means.append(_split(row["means"]))
            sds.append(_split(row["sds"]))
            loglik.append(float(row["loglik"]))
    m = len(iters)

    alloc = np.empty((m, 0), dtype=np.int8)
    if allocations_path is not None:
        rows = []
        with open(allocations_path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                rows.append([int(v) - 1 for v in row["allocations"].split(";")])
        if len(rows) != m:
            raise DataError(f"{allocations_path}: draw count differs from {path}")
        alloc = np.array(rows, dtype=np.int8)

    method, seed, drug, n_obs, meta = "unknown", 0, "", alloc.shape[1], {}
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        info = json.loads(meta_path.read_text())
        method = info.get("method", method)
        seed = info.get("seed", seed)
        drug = info.get("drug_code", drug)
        n_obs = info.get("n_obs", n_obs)
        meta = info.get("meta", {})

    return TraceSet(
        method=method,
        iters=np.array(iters, dtype=np.int64),
        k=np.array(ks, dtype=np.int64),
        kplus=np.array(kplus, dtype=np.int64),
        weights=weights,
        means=means,
        sds=sds,
        allocations=alloc,
        loglik=np.array(loglik),
        seed=seed,
        drug_code=drug,
        n_obs=n_obs,
        meta=meta,
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
