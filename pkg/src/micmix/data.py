"""Dilution grids, censored MIC observations, and synthetic dataset generation.

Everything is modelled on the log2(MIC) scale; mg/L values appear only at
I/O boundaries. A recorded MIC is a 1-based index into a drug's dilution
ladder: index 1 means growth was inhibited in every well (left censored),
indices 2..T pick the interval between adjacent tested concentrations, and
T+1 means growth was observed in every well (right censored). The T+1 label
carries the conventional log2 value of one doubling above the top tested
well, so the latent intervals tile the whole real line.

All types are immutable after construction and safe to share across
concurrently running chains.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class DrugGrid:
    """Ascending log2(mg/L) ladder of tested concentrations for one drug.

    ``censor_label_log2`` is the value recorded when growth occurs at every
    tested concentration; when omitted it defaults to one doubling above the
    top tested well.
    """

    drug_code: str
    tested_log2: tuple[float, ...]
    censor_label_log2: float | None = None

    def __post_init__(self):
        if not self.drug_code:
            raise DataError("drug code must be non-empty")
        d = tuple(float(x) for x in self.tested_log2)
        if len(d) == 0:
            raise DataError(f"{self.drug_code}: empty dilution list")
        if any(not math.isfinite(x) for x in d):
            raise DataError(f"{self.drug_code}: non-finite dilution value")
        diffs = np.diff(d)
        if diffs.size and np.any(diffs <= 0):
            raise DataError(f"{self.drug_code}: dilutions must be strictly increasing")
        object.__setattr__(self, "tested_log2", d)
        if self.censor_label_log2 is None:
            object.__setattr__(self, "censor_label_log2", d[-1] + 1.0)
        if self.censor_label_log2 <= d[-1]:
            raise DataError(
                f"{self.drug_code}: censor label must exceed the top tested dilution"
            )
        if diffs.size and np.any(np.abs(diffs - 1.0) > _GRID_TOL):
            warnings.warn(
                f"{self.drug_code}: irregular dilution steps (not double dilutions)",
                stacklevel=2,
            )

    @property
    def n_dilutions(self) -> int:
        """Number of tested concentrations T."""
        return len(self.tested_log2)

    @property
    def censor_index(self) -> int:
        """The right-censor label index T+1."""
        return len(self.tested_log2) + 1

    def index_value_log2(self, index: int) -> float:
        """log2 value recorded for a dilution index (censor label at T+1)."""
        if not 1 <= index <= self.censor_index:
            raise DataError(f"{self.drug_code}: dilution index {index} out of range")
        if index == self.censor_index:
            return float(self.censor_label_log2)
        return self.tested_log2[index - 1]

    def interval(self, index: int) -> tuple[float, float]:
        """Latent log2 interval for a dilution index; see interval_bounds."""
        if not 1 <= index <= self.censor_index:
            raise DataError(f"{self.drug_code}: dilution index {index} out of range")
        d = self.tested_log2
        if index == 1:
            return (-math.inf, d[0])
        if index == self.censor_index:
            return (d[-1], math.inf)
        return (d[index - 2], d[index - 1])


@dataclass(frozen=True)
class MicObservation:
    """One recorded MIC: strain, drug, dilution index, optional replicate."""

    strain_id: str
    drug_code: str
    dilution_index: int
    replicate_id: int | None = None


@dataclass(frozen=True)
class MicDataset:
    """Censored MIC observations bound to their dilution grids."""

    observations: tuple[MicObservation, ...]
    grids: dict[str, DrugGrid]

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        for obs in self.observations:
            grid = self.grids.get(obs.drug_code)
            if grid is None:
                raise DataError(f"no dilution grid for drug {obs.drug_code!r}")
            if not 1 <= obs.dilution_index <= grid.censor_index:
                raise DataError(
                    f"{obs.strain_id}/{obs.drug_code}: dilution index "
                    f"{obs.dilution_index} outside 1..{grid.censor_index}"
                )

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def drug_codes(self) -> tuple[str, ...]:
        return tuple(sorted(self.grids))

    def counts(self) -> dict[str, int]:
        """Per-drug observation counts."""
        out: dict[str, int] = {code: 0 for code in self.grids}
        for obs in self.observations:
            out[obs.drug_code] += 1
        return out

    def restrict(self, drug_code: str) -> "MicDataset":
        """Dataset view restricted to a single drug."""
        if drug_code not in self.grids:
            raise DataError(f"no dilution grid for drug {drug_code!r}")
        obs = tuple(o for o in self.observations if o.drug_code == drug_code)
        return MicDataset(observations=obs, grids={drug_code: self.grids[drug_code]})

    def single_grid(self) -> DrugGrid:
        """The grid of a single-drug dataset."""
        if len(self.grids) != 1:
            raise DataError("expected a dataset restricted to a single drug")
        return next(iter(self.grids.values()))

    def index_array(self, drug_code: str | None = None) -> np.ndarray:
        """Dilution indices as an int array (single drug)."""
        ds = self if drug_code is None else self.restrict(drug_code)
        ds.single_grid()
        return np.array([o.dilution_index for o in ds.observations], dtype=np.int64)

    def bounds_arrays(self, drug_code: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-observation latent (lower, upper) log2 bounds (single drug)."""
        ds = self if drug_code is None else self.restrict(drug_code)
        grid = ds.single_grid()
        edges_lo = np.concatenate(([-np.inf], grid.tested_log2))
        edges_hi = np.concatenate((grid.tested_log2, [np.inf]))
        idx = ds.index_array() - 1
        return edges_lo[idx], edges_hi[idx]

    def counts_per_dilution(self, drug_code: str) -> np.ndarray:
        """Observation counts per dilution index 1..T+1 for one drug."""
        grid = self.grids.get(drug_code)
        if grid is None:
            raise DataError(f"no dilution grid for drug {drug_code!r}")
        idx = np.array(
            [o.dilution_index for o in self.observations if o.drug_code == drug_code],
            dtype=np.int64,
        )
        return np.bincount(idx - 1, minlength=grid.censor_index)


def censor_to_grid(log2_value: float, grid: DrugGrid) -> int:
    """Map a latent log2 value onto its recorded dilution index.

    Left-closed intervals: values in [d_{j-1}, d_j) map to index j, values
    below d_1 to index 1 and values at or above d_T to the censor index T+1.
    """
    if math.isnan(log2_value):
        raise DataError("cannot map NaN onto a dilution grid")
    j = int(np.searchsorted(grid.tested_log2, log2_value, side="right"))
    return min(j + 1, grid.censor_index)


def censor_many(log2_values: np.ndarray, grid: DrugGrid) -> np.ndarray:
    """Vectorized censor_to_grid."""
    values = np.asarray(log2_values, dtype=float)
    if np.any(np.isnan(values)):
        raise DataError("cannot map NaN onto a dilution grid")
    j = np.searchsorted(grid.tested_log2, values, side="right")
    return np.minimum(j + 1, grid.censor_index).astype(np.int64)


def interval_bounds(obs: MicObservation | int, grid: DrugGrid) -> tuple[float, float]:
    """Latent log2 interval revealed by an observation (or raw index).

    Index 1 maps to (-inf, d_1), interior index j to (d_{j-1}, d_j) and the
    censor index T+1 to (d_T, +inf); the intervals partition the real line.
    """
    index = obs.dilution_index if isinstance(obs, MicObservation) else int(obs)
    return grid.interval(index)


@dataclass(frozen=True)
class SimSpec:
    """Generative description of a censored Gaussian mixture dataset.

    When ``strain_count`` and ``replicates_per_strain`` are given they must
    multiply to ``n`` and each strain receives a shared Normal(0, strain_sd^2)
    intercept added to every replicate's latent value.
    """

    grid: DrugGrid
    n: int
    weights: tuple[float, ...]
    means_log2: tuple[float, ...]
    sds_log2: tuple[float, ...]
    strain_count: int | None = None
    replicates_per_strain: int | None = None
    strain_sd: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "means_log2", tuple(float(m) for m in self.means_log2))
        object.__setattr__(self, "sds_log2", tuple(float(s) for s in self.sds_log2))
        if not (len(self.weights) == len(self.means_log2) == len(self.sds_log2)):
            raise DataError("weights, means and sds must have equal lengths")
        if len(self.weights) == 0:
            raise DataError("at least one mixture component required")
        if any(w < 0 for w in self.weights):
            raise DataError("weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise DataError("weights must sum to 1 within 1e-12")
        if any(s <= 0 for s in self.sds_log2):
            raise DataError("component sds must be positive")
        if self.n < 1:
            raise DataError("n must be at least 1")
        if (self.strain_count is None) != (self.replicates_per_strain is None):
            raise DataError("strain_count and replicates_per_strain go together")
        if self.strain_count is not None:
            if self.strain_count * self.replicates_per_strain != self.n:
                raise DataError("strain_count * replicates_per_strain must equal n")
            if self.strain_sd < 0:
                raise DataError("strain_sd must be nonnegative")


def simulate_dataset(spec: SimSpec, seed: int, return_components: bool = False):
    """Draw a censored mixture dataset, reproducibly for a given seed.

    With ``return_components`` the generating component index of every
    observation is returned alongside (for recovery experiments).
    """
    rng = np.random.default_rng(seed)
    k = len(spec.weights)
    comp = rng.choice(k, size=spec.n, p=np.asarray(spec.weights))
    latent = np.asarray(spec.means_log2)[comp] + rng.standard_normal(spec.n) * np.asarray(
        spec.sds_log2
    )[comp]

    width = max(5, len(str(spec.n)))
    if spec.strain_count is not None:
        reps = spec.replicates_per_strain
        strain_of = np.repeat(np.arange(spec.strain_count), reps)
        effects = rng.normal(0.0, spec.strain_sd, size=spec.strain_count)
        latent = latent + effects[strain_of]
        strain_ids = [f"S{s + 1:0{width}d}" for s in strain_of]
        replicate_ids: list[int | None] = [int(i % reps) + 1 for i in range(spec.n)]
    else:
        strain_ids = [f"S{i + 1:0{width}d}" for i in range(spec.n)]
        replicate_ids = [None] * spec.n

    indices = censor_many(latent, spec.grid)
    obs = tuple(
        MicObservation(
            strain_id=strain_ids[i],
            drug_code=spec.grid.drug_code,
            dilution_index=int(indices[i]),
            replicate_id=replicate_ids[i],
        )
        for i in range(spec.n)
    )
    dataset = MicDataset(observations=obs, grids={spec.grid.drug_code: spec.grid})
    if return_components:
        return dataset, comp
    return dataset


def load_dilution_grids(path) -> dict[str, DrugGrid]:
    """Read a grids CSV: one row per drug, code followed by ascending log2 values.

    A header row whose first field is 'drug' is skipped; if that header ends
    with a 'censor_label' column, the last field of each row is taken as the
    right-censor label instead of a tested concentration.
    """
    grids: dict[str, DrugGrid] = {}
    has_censor_col = False
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not f.strip() for f in row):
                continue
            first = row[0].strip()
            if lineno == 1 and first.lower() == "drug":
                has_censor_col = bool(row) and row[-1].strip().lower() == "censor_label"
                continue
            fields = [f.strip() for f in row[1:] if f.strip() != ""]
            censor = None
            if has_censor_col and fields:
                censor_field, fields = fields[-1], fields[:-1]
                try:
                    censor = float(censor_field)
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad censor label {censor_field!r}") from exc
            try:
                values = tuple(float(f) for f in fields)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable dilution value") from exc
            if first in grids:
                raise DataError(f"{path}:{lineno}: duplicate drug code {first!r}")
            try:
                grids[first] = DrugGrid(
                    drug_code=first, tested_log2=values, censor_label_log2=censor
                )
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not grids:
        raise DataError(f"{path}: no grid rows found")
    return grids


def _log2_to_index(grid: DrugGrid, value: float) -> int:
    # Recorded concentrations sit exactly on grid points; snap those to the
    # index of the matching point (plate recording convention: the value names
    # the lowest inhibiting concentration, so the latent lies just below).
    # Off-grid values are treated as latent draws and binned by interval.
    if math.isnan(value):
        raise DataError("MIC value is NaN")
    if abs(value - grid.censor_label_log2) <= _GRID_TOL:
        return grid.censor_index
    pos = int(np.searchsorted(grid.tested_log2, value))
    for j in (pos - 1, pos):
        if 0 <= j < grid.n_dilutions and abs(grid.tested_log2[j] - value) <= _GRID_TOL:
            return j + 1
    return censor_to_grid(value, grid)


def load_mic_dataset(path, grids: dict[str, DrugGrid]) -> MicDataset:
    """Read a MIC CSV into a dataset bound to the given grids.

    The header declares the value column: one of ``mic_mgL`` (positive mg/L),
    ``log2_mic`` or ``dilution_index``; ``strain_id`` and ``drug`` are always
    required and ``replicate_id`` is optional.
    """
    observations: list[MicObservation] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        modes = [m for m in ("mic_mgL", "log2_mic", "dilution_index") if m in fields]
        if "strain_id" not in fields or "drug" not in fields or len(modes) != 1:
            raise DataError(
                f"{path}: header must contain strain_id, drug and exactly one of "
                "mic_mgL / log2_mic / dilution_index"
            )
        mode = modes[0]
        for lineno, row in enumerate(reader, start=2):
            drug = (row["drug"] or "").strip()
            strain = (row["strain_id"] or "").strip()
            grid = grids.get(drug)
            if grid is None:
                raise DataError(f"{path}:{lineno}: unknown drug code {drug!r}")
            raw = (row[mode] or "").strip()
            try:
                if mode == "dilution_index":
                    index = int(raw)
                    if not 1 <= index <= grid.censor_index:
                        raise DataError(
                            f"{path}:{lineno}: dilution index {index} outside "
                            f"1..{grid.censor_index} for {drug}"
                        )
                elif mode == "log2_mic":
                    index = _log2_to_index(grid, float(raw))
                else:
                    mgl = float(raw)
                    if not mgl > 0:
                        raise DataError(f"{path}:{lineno}: MIC must be positive in mg/L mode")
                    index = _log2_to_index(grid, math.log2(mgl))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable MIC value {raw!r}") from exc
            rep_raw = (row.get("replicate_id") or "").strip()
            replicate = int(rep_raw) if rep_raw else None
            observations.append(
                MicObservation(
                    strain_id=strain,
                    drug_code=drug,
                    dilution_index=index,
                    replicate_id=replicate,
                )
            )
    return MicDataset(observations=tuple(observations), grids=dict(grids))


def write_mic_csv(dataset: MicDataset, path, value_mode: str = "dilution_index") -> None:
    """Write observations to CSV in one of the loadable header schemas."""
    if value_mode not in ("dilution_index", "log2_mic", "mic_mgL"):
        raise DataError(f"unknown value mode {value_mode!r}")
    with_reps = any(o.replicate_id is not None for o in dataset.observations)
    header = ["strain_id", "drug", value_mode] + (["replicate_id"] if with_reps else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for obs in dataset.observations:
            grid = dataset.grids[obs.drug_code]
            if value_mode == "dilution_index":
                value = str(obs.dilution_index)
            elif value_mode == "log2_mic":
                value = repr(grid.index_value_log2(obs.dilution_index))
            else:
                value = repr(2.0 ** grid.index_value_log2(obs.dilution_index))
            row = [obs.strain_id, obs.drug_code, value]
            if with_reps:
                row.append("" if obs.replicate_id is None else str(obs.replicate_id))
            writer.writerow(row)


def write_grid_csv(grids: dict[str, DrugGrid], path) -> None:
    """Write grids in the loadable CSV layout (with a censor_label column)."""
    width = max(g.n_dilutions for g in grids.values())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["drug"] + [f"d{i + 1}" for i in range(width)] + ["censor_label"])
        for code in sorted(grids):
            grid = grids[code]
            row = [code] + [repr(v) for v in grid.tested_log2]
            row += [""] * (width - grid.n_dilutions)
            row.append(repr(float(grid.censor_label_log2)))
            writer.writerow(row)
