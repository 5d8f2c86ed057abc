"""Accuracy tables: true-positive rates against known-resistance truth sets
and true-negative rates against replicated susceptible control strains.

A strain counts as predicted resistant when any of its observations falls in
a cluster above the first (or carries a resistant binary label). True
negatives are counted per replicate row, since control strains are tested
repeatedly. Percentages are reported to three decimals and the table layout
is byte-stable across runs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

TRUTH_KINDS = ("resistant_by_variant", "susceptible_control")


@dataclass(frozen=True)
class TruthSet:
    """Strain identifiers asserted resistant (or susceptible) per drug."""

    kind: str
    strains: dict[str, tuple[str, ...]]

    def __post_init__(self):
        if self.kind not in TRUTH_KINDS:
            raise DataError(f"unknown truth kind {self.kind!r}")


def load_truth_csv(path) -> dict[str, TruthSet]:
    """Read a truth CSV (``drug,strain_id,kind``) into one TruthSet per kind."""
    per_kind: dict[str, dict[str, list[str]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if not {"drug", "strain_id", "kind"}.issubset(fields):
            raise DataError(f"{path}: header must contain drug,strain_id,kind")
        for lineno, row in enumerate(reader, start=2):
            kind = row["kind"].strip()
            if kind not in TRUTH_KINDS:
                raise DataError(f"{path}:{lineno}: unknown truth kind {kind!r}")
            per_kind.setdefault(kind, {}).setdefault(row["drug"].strip(), []).append(
                row["strain_id"].strip()
            )
    return {
        kind: TruthSet(kind=kind, strains={d: tuple(s) for d, s in drugs.items()})
        for kind, drugs in per_kind.items()
    }


def _strain_resistance(labels) -> dict[str, bool]:
    # a strain is predicted resistant when any of its observations is
    flags: dict[str, bool] = {}
    resistant = np.asarray(labels.resistant)
    for strain, flag in zip(labels.strain_ids, resistant):
        flags[strain] = flags.get(strain, False) or bool(flag)
    return flags


def true_positive_rate(labels_by_drug, truth: TruthSet) -> dict[str, float]:
    """Percentage of truth strains predicted resistant, per drug.

    ``labels_by_drug`` is an iterable of per-drug label objects (cluster
    assignments or binary labels). Truth drugs without labels are omitted
    with a warning; truth strains missing from the labels are an error.
    """
    if truth.kind != "resistant_by_variant":
        raise DataError("true_positive_rate needs a resistant_by_variant truth set")
    by_drug = {lab.drug_code: lab for lab in labels_by_drug}
    out: dict[str, float] = {}
    for drug in sorted(truth.strains):
        labels = by_drug.get(drug)
        if labels is None:
            warnings.warn(f"no labels supplied for drug {drug}; row omitted", stacklevel=2)
            continue
        flags = _strain_resistance(labels)
        strains = truth.strains[drug]
        if not strains:
            warnings.warn(f"empty truth set for drug {drug}; row omitted", stacklevel=2)
            continue
        missing = [s for s in strains if s not in flags]
        if missing:
            raise DataError(
                f"{drug}: truth strains absent from the labelled data: {missing[:5]}"
            )
        hits = sum(1 for s in strains if flags[s])
        out[drug] = 100.0 * hits / len(strains)
    return out


def true_negative_rate(labels_by_drug, truth: TruthSet) -> dict[str, float]:
    """Percentage of control replicates classified susceptible, per drug."""
    if truth.kind != "susceptible_control":
        raise DataError("true_negative_rate needs a susceptible_control truth set")
    by_drug = {lab.drug_code: lab for lab in labels_by_drug}
    out: dict[str, float] = {}
    for drug in sorted(truth.strains):
        labels = by_drug.get(drug)
        if labels is None:
            warnings.warn(f"no labels supplied for drug {drug}; row omitted", stacklevel=2)
            continue
        wanted = set(truth.strains[drug])
        if not wanted:
            warnings.warn(f"empty truth set for drug {drug}; row omitted", stacklevel=2)
            continue
        resistant = np.asarray(labels.resistant)
        mask = np.array([s in wanted for s in labels.strain_ids])
        if not mask.any():
            raise DataError(f"{drug}: no observations of the control strains found")
        kept = resistant[mask]
        out[drug] = 100.0 * float(np.mean(~kept))
    return out


def format_rate_table(rates_by_method: dict[str, dict[str, float]]) -> str:
    """Render per-drug percentage columns side by side, three decimals,
    method columns in insertion order, drugs sorted; byte-stable."""
    methods = list(rates_by_method)
    drugs = sorted({d for rates in rates_by_method.values() for d in rates})
    lines = [",".join(["drug"] + methods)]
    for drug in drugs:
        cells = [drug]
        for m in methods:
            value = rates_by_method[m].get(drug)
            cells.append("" if value is None else f"{value:.3f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_rate_table(rates_by_method: dict[str, dict[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_rate_table(rates_by_method))
