"""Right-censored survival data, the piecewise baseline grid and its Poisson expansion."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from frailscan.spatial import StudyRegion, ValidationError


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Individuals attached to the units of a region.

    ``unit`` holds indices into ``unit_ids`` (the region's unit order).
    """

    unit_ids: tuple[str, ...]
    unit: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        unit = np.asarray(self.unit, dtype=np.intp)
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event, dtype=np.int8)
        n = len(unit)
        cov = np.asarray(self.covariates, dtype=float).reshape(n, -1)
        if time.shape != (n,) or event.shape != (n,):
            raise ValidationError("unit, time and event lengths differ")
        if n and (unit.min() < 0 or unit.max() >= len(self.unit_ids)):
            raise ValidationError("unit index out of range")
        if np.any(~(time > 0)):
            raise ValidationError(f"non-positive time at row {int(np.argmax(~(time > 0))) + 2}")
        if np.any((event != 0) & (event != 1)):
            raise ValidationError("event must be 0 or 1")
        names = tuple(self.covariate_names) or tuple(f"z{j + 1}" for j in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise ValidationError("covariate_names length does not match covariates")
        for name, arr in (("unit", unit), ("time", time), ("event", event), ("covariates", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.unit)

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def unit_counts(self) -> np.ndarray:
        return np.bincount(self.unit, minlength=len(self.unit_ids))

    def replace(self, **changes) -> "SurvivalDataset":
        fields = dict(unit_ids=self.unit_ids, unit=self.unit, time=self.time,
                      event=self.event, covariates=self.covariates,
                      covariate_names=self.covariate_names)
        fields.update(changes)
        return SurvivalDataset(**fields)

    def same_as(self, other: "SurvivalDataset") -> bool:
        return (self.unit_ids == other.unit_ids
                and self.covariate_names == other.covariate_names
                and np.array_equal(self.unit, other.unit)
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.event, other.event)
                and np.array_equal(self.covariates, other.covariates))


def ingest_individuals(path, region: StudyRegion) -> SurvivalDataset:
    """Read a ``unit_id,time,event[,z1..zp]`` CSV against a region.

    Row numbers in error messages count the header as row 1.
    """
    try:
        return _ingest(Path(path), region)
    except ValidationError as exc:
        raise ValidationError(str(exc), source="individuals") from None


def _ingest(path, region):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if header[:3] != ["unit_id", "time", "event"]:
            raise ValidationError(f"{path}: header must start with unit_id,time,event")
        if "weights" in header:
            raise ValidationError(f"{path}: a weights column is not supported")
        cov_names = tuple(header[3:])
        units, times, events, covs = [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(header):
                raise ValidationError(f"ragged covariates at row {row_no}")
            try:
                units.append(region.index(row[0].strip()))
            except ValidationError:
                raise ValidationError(f"unknown unit_id {row[0]!r} at row {row_no}") from None
            try:
                t = float(row[1])
            except ValueError:
                raise ValidationError(f"non-numeric time at row {row_no}") from None
            if not t > 0:
                raise ValidationError(f"non-positive time at row {row_no}")
            if row[2].strip() not in ("0", "1"):
                raise ValidationError(f"event not in {{0,1}} at row {row_no}")
            try:
                covs.append([float(v) for v in row[3:]])
            except ValueError:
                raise ValidationError(f"non-numeric covariate at row {row_no}") from None
            times.append(t)
            events.append(int(row[2]))
    if not units:
        raise ValidationError(f"{path}: no individuals")
    return SurvivalDataset(region.unit_ids, np.array(units), np.array(times),
                           np.array(events), np.array(covs).reshape(len(units), len(cov_names)),
                           cov_names)


def write_individuals(dataset: SurvivalDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "time", "event", *dataset.covariate_names])
        for i in range(dataset.n):
            w.writerow([dataset.unit_ids[dataset.unit[i]], repr(float(dataset.time[i])),
                        int(dataset.event[i]), *(repr(float(z)) for z in dataset.covariates[i])])


@dataclass(frozen=True, eq=False)
class PiecewiseGrid:
    cutpoints: np.ndarray

    @property
    def n_intervals(self) -> int:
        return len(self.cutpoints) - 1


def build_grid(dataset: SurvivalDataset, times_per_interval: int = 20) -> PiecewiseGrid:
    """Quantile cutpoints; one interval per 20 unique observation times (at least one)."""
    uniq = np.unique(dataset.time)
    n_t = max(1, len(uniq) // times_per_interval)
    levels = np.arange(n_t + 1) / n_t
    cuts = np.quantile(uniq, levels)
    cuts[0] = 0.0
    cuts[-1] = uniq[-1]
    cuts = np.unique(cuts)  # coincident quantiles collapse
    return PiecewiseGrid(cuts)


@dataclass(frozen=True, eq=False)
class PoissonRecords:
    """Piecewise-exponential augmentation, one row per (individual, interval at risk)."""

    individual: np.ndarray
    interval: np.ndarray
    exposure: np.ndarray
    event: np.ndarray
    unit: np.ndarray

    def __len__(self) -> int:
        return len(self.individual)


def expand_piecewise(dataset: SurvivalDataset, grid: PiecewiseGrid) -> PoissonRecords:
    """Split follow-up over the grid; an event at time t lies in the interval (t_{I-1}, t_I]."""
    cuts = grid.cutpoints
    t = dataset.time
    if t.max() > cuts[-1] * (1 + 1e-12):
        raise ValidationError("grid does not cover the longest observation time")
    # interval holding each individual's exit time
    last = np.clip(np.searchsorted(cuts, t, side="left") - 1, 0, grid.n_intervals - 1)
    counts = last + 1
    ind = np.repeat(np.arange(dataset.n), counts)
    start = np.cumsum(counts) - counts
    interval = np.arange(len(ind)) - np.repeat(start, counts)
    lo = cuts[interval]
    hi = np.minimum(cuts[interval + 1], t[ind])
    exposure = hi - lo
    event = np.zeros(len(ind), dtype=np.int8)
    event[np.cumsum(counts) - 1] = dataset.event
    return PoissonRecords(ind, interval, exposure, event, dataset.unit[ind])
