"""Synthetic frailty fields, exponential survival data and the experiment runner."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.linalg

from frailscan import baselines, frailty, report
from frailscan.inference import monte_carlo_pvalue
from frailscan.scan import DegenerateFieldError, GaussianScanInput, scan_all
from frailscan.spatial import (StudyRegion, ValidationError, WindowSet, build_neighbor_matrix,
                               enumerate_windows, lattice_region, leroux_matrix, read_region)
from frailscan.survdata import SurvivalDataset, build_grid

log = logging.getLogger(__name__)

METHODS = ("car", "iid", "icar", "exponential", "logrank")
LEVEL = 0.05


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def allocate(total: int, n_units: int) -> np.ndarray:
    """Split ``total`` individuals as evenly as possible; leftovers go to the first units."""
    if n_units < 1 or total < 0:
        raise ValueError("need at least one unit and a non-negative total")
    base, extra = divmod(int(total), int(n_units))
    counts = np.full(n_units, base, dtype=np.intp)
    counts[:extra] += 1
    return counts


@dataclass(frozen=True, eq=False)
class StudyDesign:
    """A region, a planted cluster (unit indices) and the number of individuals per unit."""

    name: str
    region: StudyRegion
    cluster: np.ndarray
    counts: np.ndarray

    @property
    def assignments(self) -> np.ndarray:
        return np.repeat(np.arange(self.region.n_units), self.counts)

    @property
    def n_individuals(self) -> int:
        return int(self.counts.sum())

    def cluster_individuals(self) -> int:
        return int(self.counts[self.cluster].sum())


def _nearest_units(region: StudyRegion, center, k: int) -> np.ndarray:
    d2 = ((region.coords - np.asarray(center, dtype=float)) ** 2).sum(axis=1)
    return np.sort(np.argsort(d2, kind="stable")[:k])


def _design(name, region, cluster, n_total, n_cluster) -> StudyDesign:
    counts = np.zeros(region.n_units, dtype=np.intp)
    inside = np.zeros(region.n_units, dtype=bool)
    inside[cluster] = True
    counts[inside] = allocate(n_cluster, inside.sum())
    counts[~inside] = allocate(n_total - n_cluster, (~inside).sum())
    return StudyDesign(name, region, np.asarray(cluster), counts)


def map169() -> StudyDesign:
    """13x13 rook lattice, 1690 individuals, a contiguous 14-unit cluster holding 135."""
    region = lattice_region(13, 13)
    return _design("map169", region, _nearest_units(region, (4, 3), 14), 1690, 135)


MAP94_DROPPED = ((0, 0), (0, 9), (9, 0), (9, 9), (0, 8), (9, 1))


def map94() -> StudyDesign:
    """10x10 lattice without six border cells, 940 individuals, an 8-unit cluster holding 73."""
    region = lattice_region(10, 10, drop=MAP94_DROPPED)
    return _design("map94", region, _nearest_units(region, (6, 4), 8), 940, 73)


def custom_design(units_path, adjacency_path, cluster_ids, counts=None,
                  per_unit: int = 10) -> StudyDesign:
    region = read_region(units_path, adjacency_path)
    cluster = np.array(sorted(region.index(u) for u in cluster_ids))
    if counts is None:
        counts = np.full(region.n_units, per_unit, dtype=np.intp)
    counts = np.asarray(counts, dtype=np.intp)
    if counts.shape != (region.n_units,) or np.any(counts < 0):
        raise ValidationError("counts must give a non-negative count for every unit")
    return StudyDesign("custom", region, cluster, counts)


DESIGNS = {"map169": map169, "map94": map94}


# -- generators ----------------------------------------------------------

def generate_frailty_field(region: StudyRegion, w, alpha: float, rho: float, sigma2: float,
                           seed=None) -> np.ndarray:
    """One draw of N(alpha 1_w, sigma2 (rho R + (1 - rho) I)^-1)."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    K = region.n_units
    mean = np.zeros(K)
    mean[np.asarray(w, dtype=np.intp)] = alpha
    z = _rng(seed).standard_normal(K)
    if sigma2 == 0:
        return mean
    L = scipy.linalg.cholesky(leroux_matrix(build_neighbor_matrix(region), rho), lower=True)
    return mean + math.sqrt(sigma2) * scipy.linalg.solve_triangular(L, z, lower=True, trans="T")


def generate_survival_times(field_values, assignments, seed=None,
                            unit_ids=None) -> SurvivalDataset:
    """Exponential times with baseline hazard 1/2 and hazard ratio exp(phi) per unit; no censoring."""
    phi = np.asarray(field_values, dtype=float)
    unit = np.asarray(assignments, dtype=np.intp)
    u = _rng(seed).random(len(unit))
    time = -2.0 * np.log1p(-u) * np.exp(-phi[unit])
    ids = tuple(unit_ids) if unit_ids is not None else tuple(str(k) for k in range(len(phi)))
    return SurvivalDataset(ids, unit, time, np.ones(len(unit), dtype=np.int8),
                           np.zeros((len(unit), 0)))


def apply_administrative_censoring(dataset: SurvivalDataset, target: float) -> SurvivalDataset:
    """End the study at the time leaving round(target * N) individuals still under follow-up.

    Those individuals are censored at the end-of-study time; everyone else
    keeps their time and status.
    """
    if not 0.0 <= target < 1.0:
        raise ValueError("censoring target must lie in [0, 1)")
    n_cens = int(round(target * dataset.n))
    if n_cens == 0:
        return dataset
    end = np.sort(dataset.time)[dataset.n - n_cens - 1]
    late = dataset.time > end
    time = np.where(late, end, dataset.time)
    event = np.where(late, 0, dataset.event).astype(np.int8)
    return dataset.replace(time=time, event=event)


# -- experiments ---------------------------------------------------------

@dataclass
class SimulationConfig:
    region: str = "map169"
    alpha: list = field(default_factory=lambda: [0.0])
    rho: list = field(default_factory=lambda: [0.0])
    sigma2: list = field(default_factory=lambda: [1.0])
    censoring: list = field(default_factory=lambda: [0.0])
    replicates: int = 50
    mc_replicates: int = 199
    seed: int = 0
    bf_threshold: float = 30.0
    methods: list = field(default_factory=lambda: ["car"])
    units_path: str | None = None
    adjacency_path: str | None = None
    cluster: list | None = None
    counts: list | None = None

    def __post_init__(self):
        for name in ("alpha", "rho", "sigma2", "censoring"):
            val = getattr(self, name)
            val = [float(v) for v in (val if isinstance(val, (list, tuple)) else [val])]
            if not val:
                raise ValidationError(f"grid {name!r} is empty")
            setattr(self, name, val)
        self.methods = [self.methods] if isinstance(self.methods, str) else list(self.methods)
        if not self.methods:
            raise ValidationError("no methods given")
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}")
        if any(not 0 <= r < 1 for r in self.rho):
            raise ValidationError("rho values must lie in [0, 1)")
        if any(s < 0 for s in self.sigma2):
            raise ValidationError("sigma2 values must be non-negative")
        if any(not 0 <= c < 1 for c in self.censoring):
            raise ValidationError("censoring targets must lie in [0, 1)")
        if self.replicates < 1 or self.mc_replicates < 1:
            raise ValidationError("replicates and mc_replicates must be positive")
        if self.region not in DESIGNS and self.region != "custom":
            raise ValidationError(f"unknown region {self.region!r}")
        if self.region == "custom" and not (self.units_path and self.adjacency_path
                                            and self.cluster):
            raise ValidationError("custom region needs units_path, adjacency_path and cluster")

    def design(self) -> StudyDesign:
        if self.region == "custom":
            return custom_design(self.units_path, self.adjacency_path, self.cluster, self.counts)
        return DESIGNS[self.region]()

    def cells(self) -> list:
        return [(a, r, s, c) for a in self.alpha for r in self.rho for s in self.sigma2
                for c in self.censoring]

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> SimulationConfig:
    """Read a TOML or JSON file whose keys are SimulationConfig field names."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        data = json.loads(raw)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(raw.decode())
    known = {f.name for f in fields(SimulationConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return SimulationConfig(**data)


PRESETS = {
    "figure1": dict(region="map169", alpha=[0.0], rho=[0.0], sigma2=[0.001, 0.051, 0.101],
                    replicates=100, mc_replicates=199, methods=["exponential", "logrank"]),
    "figure3": dict(region="map169", alpha=[0.0, 2.0], rho=[0.0, 0.4, 0.8], sigma2=[1.0],
                    replicates=50, mc_replicates=199, methods=["car"]),
    "censoring": dict(region="map94", alpha=[2.0], rho=[0.4], sigma2=[1.0],
                      censoring=[0.1, 0.2, 0.3, 0.4], replicates=50, mc_replicates=199,
                      methods=["car"]),
}

PAPER_SCALE = {
    "figure1": dict(sigma2=[round(0.001 + 0.01 * i, 3) for i in range(11)]),
    "figure3": dict(alpha=[0.0, 0.5, 1.0, 1.5, 2.0], rho=[0.0, 0.2, 0.4, 0.6, 0.8],
                    methods=["car", "iid", "icar"]),
    "censoring": dict(alpha=[0.0, 0.5, 1.0, 1.5, 2.0], rho=[0.0, 0.2, 0.4, 0.6, 0.8]),
}


def preset(name: str, paper_scale: bool = False, **overrides) -> SimulationConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown study {name!r}; choose from {sorted(PRESETS)}")
    cfg = dict(PRESETS[name])
    if paper_scale:
        cfg.update(PAPER_SCALE[name], replicates=100, mc_replicates=999)
    cfg.update(overrides)
    return SimulationConfig(**cfg)


def cluster_metrics(detected_units, true_units, counts) -> tuple[float, float, float]:
    """Individual-level TPR, FPR and PPV of a detected unit set against the planted one."""
    counts = np.asarray(counts, dtype=float)
    det = np.zeros(len(counts), dtype=bool)
    det[np.asarray(detected_units, dtype=np.intp)] = True
    true = np.zeros(len(counts), dtype=bool)
    true[np.asarray(true_units, dtype=np.intp)] = True
    n_w, n_wc, n_det = counts[true].sum(), counts[~true].sum(), counts[det].sum()
    hit = counts[det & true].sum()
    tpr = hit / n_w if n_w else math.nan
    fpr = counts[det & ~true].sum() / n_wc if n_wc else math.nan
    ppv = hit / n_det if n_det else math.nan
    return float(tpr), float(fpr), float(ppv)


@dataclass
class ReplicateOutcome:
    replicate: int
    p_value: float | None
    detected: tuple | None
    winner: str | None = None
    rho_star: float | None = None
    alpha_hat: float | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def rejected(self) -> bool:
        return not self.failed and self.p_value <= LEVEL


@dataclass
class CellMetrics:
    method: str
    alpha: float
    rho: float
    sigma2: float
    censoring: float
    replicates: int
    failures: int
    rejections: int
    rejection_rate: float
    tpr: float
    fpr: float
    ppv: float
    outcomes: list = field(default_factory=list, repr=False)

    @property
    def rate_label(self) -> str:
        return "type_I_error" if self.alpha == 0 else "power"

    def row(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "outcomes"}
        out["rate_label"] = self.rate_label
        return out


@dataclass
class MetricsReport:
    config: dict
    design: dict
    cells: list

    def cell(self, method=None, alpha=None, rho=None, sigma2=None, censoring=None) -> CellMetrics:
        want = dict(method=method, alpha=alpha, rho=rho, sigma2=sigma2, censoring=censoring)
        hits = [c for c in self.cells
                if all(v is None or getattr(c, k) == v for k, v in want.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} cells match {want}")
        return hits[0]

    def to_json(self) -> dict:
        return {"config": self.config, "design": self.design,
                "cells": [dict(c.row(), outcomes=[asdict(o) for o in c.outcomes])
                          for c in self.cells]}

    @classmethod
    def read(cls, path) -> "MetricsReport":
        """Load a report written by :meth:`write` (path to metrics.json)."""
        data = json.loads(Path(path).read_text())
        cells = []
        for row in data["cells"]:
            row = dict(row)
            row.pop("rate_label", None)
            row.update({k: float(row[k]) for k in ("rejection_rate", "tpr", "fpr", "ppv")})
            outcomes = [ReplicateOutcome(**{**o, "detected": None if o["detected"] is None
                                            else tuple(o["detected"])})
                        for o in row.pop("outcomes")]
            cells.append(CellMetrics(**row, outcomes=outcomes))
        return cls(data["config"], data["design"], cells)

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "metrics.csv", out_dir / "metrics.json"
        rows = [c.row() for c in self.cells]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        json_path.write_text(report.dumps(self.to_json()))
        return csv_path, json_path


def _seed_seq(seed, *key):
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))


def simulate_replicate(design: StudyDesign, alpha, rho, sigma2, censoring, seed, rep,
                       grid_index=0) -> SurvivalDataset:
    """Dataset of one replicate.

    The field and the survival draws depend only on (seed, rho index, rep),
    so cells differing in alpha or censoring are paired on the same draws.
    """
    ss = _seed_seq(seed, rep, grid_index)
    field_ss, time_ss = ss.spawn(2)
    phi = generate_frailty_field(design.region, design.cluster, alpha, rho, sigma2,
                                 np.random.default_rng(field_ss))
    ds = generate_survival_times(phi, design.assignments, np.random.default_rng(time_ss),
                                 design.region.unit_ids)
    return apply_administrative_censoring(ds, censoring)


def analyse_replicate(dataset: SurvivalDataset, design: StudyDesign, windows: WindowSet,
                      method: str, M: int, seed: int, bf_threshold: float = 30.0,
                      R=None) -> dict:
    """Run one method on one dataset and return the MLC units and its p-value."""
    if method in baselines.METHODS:
        scan = baselines.exponential_scan if method == "exponential" else baselines.logrank_scan
        res = scan(dataset, windows, M=M, seed=seed, max_secondary=0)
        return {"p_value": res.p_value, "detected": windows.members(res.mlc)}
    R = build_neighbor_matrix(design.region) if R is None else R
    grid = build_grid(dataset)
    sel = frailty.select_frailties(dataset, design.region, grid, windows,
                                   bf_threshold=bf_threshold, model=method)
    inp = GaussianScanInput(sel.phi_star, leroux_matrix(R, sel.rho_star), windows)
    res = scan_all(inp, max_secondary=0)
    sig = monte_carlo_pvalue(inp, res, M=M, seed=seed)
    alpha_hat = None if sel.alpha_hat_wstar is None else float(sel.alpha_hat_wstar)
    return {"p_value": sig.p_mlc, "detected": windows.members(res.mlc.window),
            "winner": sel.winner, "rho_star": float(sel.rho_star), "alpha_hat": alpha_hat}


_FAILURES = (frailty.FitError, DegenerateFieldError, baselines.MethodError,
             baselines.AdjustmentError, np.linalg.LinAlgError, FloatingPointError)


def _run_task(args):
    design, windows, method, cell, rho_index, rep, cfg = args
    alpha, rho, sigma2, censoring = cell
    ds = simulate_replicate(design, alpha, rho, sigma2, censoring, cfg["seed"], rep, rho_index)
    mc_seed = int(_seed_seq(cfg["seed"], rep, rho_index, 1).generate_state(1)[0])
    try:
        out = analyse_replicate(ds, design, windows, method, cfg["M"], mc_seed,
                                cfg["bf_threshold"])
    except _FAILURES as exc:
        log.warning("replicate %d failed: %s", rep, exc)
        return ReplicateOutcome(rep, None, None, error=f"{type(exc).__name__}: {exc}")
    det = tuple(sorted(int(u) for u in out.pop("detected")))
    return ReplicateOutcome(rep, float(out.pop("p_value")), det, **out)


def summarise(method, cell, outcomes, design: StudyDesign) -> CellMetrics:
    alpha, rho, sigma2, censoring = cell
    ok = [o for o in outcomes if not o.failed]
    rej = [o for o in ok if o.rejected]
    mets = np.array([cluster_metrics(o.detected, design.cluster, design.counts) for o in rej])
    tpr, fpr, ppv = (mets.mean(axis=0).tolist() if len(rej) else [math.nan] * 3)
    rate = len(rej) / len(ok) if ok else math.nan
    return CellMetrics(method, alpha, rho, sigma2, censoring, len(outcomes),
                       len(outcomes) - len(ok), len(rej), rate, tpr, fpr, ppv, list(outcomes))


def run_experiment(config: SimulationConfig, method: str | None = None, threads: int = 1,
                   progress=None) -> MetricsReport:
    """Simulate every grid cell ``config.replicates`` times and summarise each method.

    ``method`` restricts the run to one method; otherwise every method in
    the config is run on the same simulated datasets.
    """
    methods = [method] if method else list(config.methods)
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}")
    design = config.design()
    counts = np.bincount(design.assignments, minlength=design.region.n_units)
    windows = enumerate_windows(design.region, counts)
    cfg = {"seed": config.seed, "M": config.mc_replicates, "bf_threshold": config.bf_threshold}
    tasks = []
    for m in methods:
        for cell in config.cells():
            rho_index = config.rho.index(cell[1]) * len(config.sigma2) + config.sigma2.index(cell[2])
            for rep in range(config.replicates):
                tasks.append((design, windows, m, cell, rho_index, rep, cfg))
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(threads) as ex:
            results = list(ex.map(_run_task, tasks, chunksize=1))
    else:
        results = []
        for i, t in enumerate(tasks):
            results.append(_run_task(t))
            if progress is not None:
                progress(i + 1, len(tasks))
    cells, pos = [], 0
    for m in methods:
        for cell in config.cells():
            chunk = results[pos:pos + config.replicates]
            pos += config.replicates
            cells.append(summarise(m, cell, chunk, design))
    design_info = {"name": design.name, "n_units": design.region.n_units,
                   "n_individuals": design.n_individuals,
                   "cluster": [design.region.unit_ids[k] for k in design.cluster],
                   "cluster_individuals": design.cluster_individuals(),
                   "counts": design.counts.tolist(), "n_windows": len(windows)}
    return MetricsReport(config.to_dict(), design_info, cells)
