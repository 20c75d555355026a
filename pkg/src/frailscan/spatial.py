"""Spatial units, neighbour structure, Leroux precision and circular windows."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse.csgraph

ICAR_RHO = 0.999


class ValidationError(ValueError):
    """Raised for malformed region or survival inputs.

    ``source`` names the offending input (``units``, ``adjacency``,
    ``individuals``, ``config``) when known.
    """

    def __init__(self, message, source=None):
        super().__init__(message)
        self.source = source


@dataclass(frozen=True, eq=False)
class StudyRegion:
    """Spatial units located by planar centroids, with binary adjacency.

    Parameters
    ----------
    unit_ids : sequence of str
        Unique identifiers, in the order used by every index-based array.
    coords : ndarray (K, 2)
        Projected centroid coordinates.
    adjacency : ndarray (K, K)
        Symmetric 0/1 matrix with a zero diagonal.
    """

    unit_ids: tuple[str, ...]
    coords: np.ndarray
    adjacency: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        ids = tuple(str(u) for u in self.unit_ids)
        object.__setattr__(self, "unit_ids", ids)
        if len(ids) < 2:
            raise ValidationError("a region needs at least two units")
        if len(set(ids)) != len(ids):
            dup = sorted({u for u in ids if ids.count(u) > 1})
            raise ValidationError(f"duplicate unit ids: {dup}")
        coords = np.asarray(self.coords, dtype=float).reshape(len(ids), 2)
        adj = np.asarray(self.adjacency)
        if adj.shape != (len(ids), len(ids)):
            raise ValidationError("adjacency shape does not match unit count")
        adj = (adj != 0).astype(np.int8)
        if np.any(np.diag(adj)):
            k = int(np.flatnonzero(np.diag(adj))[0])
            raise ValidationError(f"unit {ids[k]!r} is adjacent to itself")
        asym = np.argwhere(adj != adj.T)
        if len(asym):
            k, l = asym[0]
            raise ValidationError(
                f"adjacency is not symmetric for pair ({ids[k]!r}, {ids[l]!r})")
        coords.setflags(write=False)
        adj.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "_index", {u: i for i, u in enumerate(ids)})

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    def index(self, unit_id: str) -> int:
        try:
            return self._index[str(unit_id)]
        except KeyError:
            raise ValidationError(f"unknown unit_id {unit_id!r}") from None

    def is_connected(self) -> bool:
        n, _ = scipy.sparse.csgraph.connected_components(self.adjacency, directed=False)
        return n == 1

    @classmethod
    def from_edges(cls, unit_ids, coords, edges):
        """Build from an undirected edge list; duplicate edges are ignored."""
        ids = tuple(str(u) for u in unit_ids)
        index = {u: i for i, u in enumerate(ids)}
        adj = np.zeros((len(ids), len(ids)), dtype=np.int8)
        for a, b in edges:
            if a not in index or b not in index:
                bad = a if a not in index else b
                raise ValidationError(f"edge references unknown unit {bad!r}")
            if a == b:
                raise ValidationError(f"self-loop on unit {a!r}")
            adj[index[a], index[b]] = adj[index[b], index[a]] = 1
        return cls(ids, coords, adj)


def _read_units(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"unit_id", "x", "y"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must be unit_id,x,y")
        ids, coords = [], []
        for row_no, row in enumerate(reader, start=2):
            try:
                coords.append((float(row["x"]), float(row["y"])))
            except (TypeError, ValueError):
                raise ValidationError(f"bad coordinate at row {row_no}") from None
            ids.append(row["unit_id"].strip())
    if len(set(ids)) != len(ids):
        dup = sorted({u for u in ids if ids.count(u) > 1})
        raise ValidationError(f"duplicate unit ids: {dup}")
    if len(ids) < 2:
        raise ValidationError("a region needs at least two units")
    return ids, coords


def _read_edges(path):
    edges = []
    with open(path, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}: row {row_no} is not a pair")
            a, b = row[0].strip(), row[1].strip()
            if row_no == 1 and (a, b) == ("unit_id_a", "unit_id_b"):
                continue
            edges.append((a, b))
    return edges


def read_region(units_path, adjacency_path) -> StudyRegion:
    """Read ``unit_id,x,y`` centroids and an ``a,b`` edge list."""
    units_path, adjacency_path = Path(units_path), Path(adjacency_path)
    try:
        ids, coords = _read_units(units_path)
    except ValidationError as exc:
        raise ValidationError(str(exc), source="units") from None
    try:
        edges = _read_edges(adjacency_path)
        region = StudyRegion.from_edges(ids, coords, edges)
    except ValidationError as exc:
        raise ValidationError(str(exc), source=exc.source or "adjacency") from None
    if not region.is_connected():
        warnings.warn("adjacency graph is disconnected", stacklevel=2)
    return region


def write_region(region: StudyRegion, units_path, adjacency_path) -> None:
    with open(units_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "x", "y"])
        for u, (x, y) in zip(region.unit_ids, region.coords):
            w.writerow([u, repr(float(x)), repr(float(y))])
    with open(adjacency_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for k, l in zip(*np.nonzero(np.triu(region.adjacency))):
            w.writerow([region.unit_ids[k], region.unit_ids[l]])


def lattice_region(n_rows: int, n_cols: int, drop=()) -> StudyRegion:
    """Rook-adjacency grid with unit ids ``r{row}c{col}``; ``drop`` removes cells."""
    dropped = set(drop)
    cells = [(r, c) for r in range(n_rows) for c in range(n_cols) if (r, c) not in dropped]
    index = {cell: i for i, cell in enumerate(cells)}
    adj = np.zeros((len(cells), len(cells)), dtype=np.int8)
    for (r, c), i in index.items():
        for nb in ((r + 1, c), (r, c + 1)):
            j = index.get(nb)
            if j is not None:
                adj[i, j] = adj[j, i] = 1
    ids = [f"r{r}c{c}" for r, c in cells]
    coords = np.array([(c, r) for r, c in cells], dtype=float)
    return StudyRegion(ids, coords, adj)


def build_neighbor_matrix(region: StudyRegion) -> np.ndarray:
    """R with the degree on the diagonal and -v_kl off it (a graph Laplacian)."""
    v = region.adjacency.astype(float)
    if not region.is_connected():
        warnings.warn("adjacency graph is disconnected; R has rank < K-1", stacklevel=2)
    R = np.diag(v.sum(axis=1)) - v
    R.setflags(write=False)
    return R


@dataclass(frozen=True, eq=False)
class PrecisionModel:
    """A = rho R + (1 - rho) I; the field covariance is sigma2 * inv(A)."""

    rho: float
    sigma2: float
    A: np.ndarray

    def cholesky(self) -> np.ndarray:
        """Lower factor L with A = L L^T."""
        return scipy.linalg.cholesky(self.A, lower=True)

    def covariance(self) -> np.ndarray:
        return self.sigma2 * np.linalg.inv(self.A)


def leroux_matrix(R: np.ndarray, rho: float) -> np.ndarray:
    K = R.shape[0]
    return rho * np.asarray(R, dtype=float) + (1.0 - rho) * np.eye(K)


def leroux_precision(R: np.ndarray, rho: float, sigma2: float = 1.0) -> PrecisionModel:
    if not 0.0 <= rho < 1.0:
        raise ValueError(
            f"rho must lie in [0, 1), got {rho}; the intrinsic CAR limit is "
            f"approximated with rho = {ICAR_RHO}")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    A = leroux_matrix(R, rho)
    A.setflags(write=False)
    return PrecisionModel(float(rho), float(sigma2), A)


def car_conditional_moments(adjacency: np.ndarray, rho: float, sigma2: float,
                            x: np.ndarray, k: int) -> tuple[float, float]:
    """Leroux full conditional of X_k given the other coordinates."""
    v = np.asarray(adjacency, dtype=float)[k]
    denom = rho * v.sum() + 1.0 - rho
    return rho * float(v @ x) / denom, sigma2 / denom


@dataclass(frozen=True)
class CandidateWindow:
    center_unit: str
    member_units: tuple[str, ...]
    n_individuals: int


@dataclass(frozen=True, eq=False)
class WindowSet:
    """Circular candidate windows stored as prefixes of per-center orderings.

    ``order[c]`` lists every unit by increasing distance from unit ``c``;
    window ``i`` holds ``order[centers[i], :sizes[i]]``. Windows are sorted
    by center index then size.
    """

    region: StudyRegion
    order: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray
    n_individuals: np.ndarray

    def __len__(self) -> int:
        return len(self.centers)

    def members(self, i: int) -> np.ndarray:
        return self.order[self.centers[i], :self.sizes[i]]

    def member_ids(self, i: int) -> tuple[str, ...]:
        return tuple(self.region.unit_ids[k] for k in self.members(i))

    def window(self, i: int) -> CandidateWindow:
        return CandidateWindow(self.region.unit_ids[self.centers[i]],
                               self.member_ids(i), int(self.n_individuals[i]))

    def windows(self) -> list[CandidateWindow]:
        return [self.window(i) for i in range(len(self))]

    def indicator(self) -> np.ndarray:
        """Dense (|W|, K) 0/1 membership matrix."""
        U = np.zeros((len(self), self.region.n_units))
        for i in range(len(self)):
            U[i, self.members(i)] = 1.0
        return U

    def subset(self, keep) -> "WindowSet":
        keep = np.asarray(keep)
        return WindowSet(self.region, self.order, self.centers[keep],
                         self.sizes[keep], self.n_individuals[keep])

    def find(self, member_ids) -> int | None:
        """Index of the window with exactly these members, if any."""
        target = frozenset(self.region.index(u) for u in member_ids)
        for i in range(len(self)):
            if self.sizes[i] == len(target) and frozenset(self.members(i).tolist()) == target:
                return i
        return None


def distance_order(region: StudyRegion) -> tuple[np.ndarray, np.ndarray]:
    """Per-center unit ordering by squared distance (stable on ties)."""
    xy = region.coords
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return np.ascontiguousarray(order, dtype=np.intp), np.take_along_axis(d2, order, axis=1)


def enumerate_windows(region: StudyRegion, unit_counts) -> WindowSet:
    """All discs centred on a unit through another unit, capped at N/2.

    Units tied with the boundary unit are always included together, windows
    with no individuals are dropped and repeated unit sets keep their first
    occurrence in (center, radius) order.
    """
    counts = np.asarray(unit_counts, dtype=np.int64)
    K = region.n_units
    if counts.shape != (K,) or np.any(counts < 0):
        raise ValidationError("unit_counts must be K nonnegative integers")
    N = int(counts.sum())
    order, d2 = distance_order(region)
    seen = set()
    centers, sizes, n_ind = [], [], []
    for c in range(K):
        cum = np.cumsum(counts[order[c]])
        for size in range(1, K):
            # only tie-group boundaries are valid disc radii
            if d2[c, size] == d2[c, size - 1]:
                continue
            n = int(cum[size - 1])
            if 2 * n > N:
                break
            if n < 1:
                continue
            key = np.sort(order[c, :size]).tobytes()
            if key in seen:
                continue
            seen.add(key)
            centers.append(c)
            sizes.append(size)
            n_ind.append(n)
    return WindowSet(region, order, np.asarray(centers, dtype=np.intp),
                     np.asarray(sizes, dtype=np.intp), np.asarray(n_ind, dtype=np.int64))
