"""JSON, GeoJSON and manifest output."""
from __future__ import annotations

import hashlib
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

from frailscan import __version__, kernels
from frailscan.spatial import StudyRegion, WindowSet
from frailscan.survdata import SurvivalDataset


def _clean(obj):
    """Plain JSON types; non-finite floats become strings so output stays strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "NaN" if math.isnan(v) else ("Infinity" if v > 0 else "-Infinity")
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


def cluster_summary(windows: WindowSet, index: int, dataset: SurvivalDataset) -> dict:
    members = np.sort(windows.members(index))
    ids = dataset.unit_ids
    inside = np.isin(dataset.unit, members)
    return {"window": int(index), "center": ids[windows.centers[index]],
            "units": [ids[k] for k in members], "n_units": int(len(members)),
            "n_individuals": int(inside.sum()), "n_events": int(dataset.event[inside].sum())}


def clusters_geojson(region: StudyRegion, clusters: list) -> dict:
    """One Point feature per unit centroid; ``cluster`` is the rank of its cluster (0 = MLC) or null."""
    rank = {}
    for r, c in enumerate(clusters):
        for u in c["units"]:
            rank.setdefault(u, r)
    feats = []
    for u, (x, y) in zip(region.unit_ids, region.coords):
        r = rank.get(u)
        role = None if r is None else ("mlc" if r == 0 else "secondary")
        props = {"unit_id": u, "cluster": r, "role": role}
        if r is not None:
            props["p_value"] = clusters[r].get("p_value")
        feats.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": [x, y]},
                      "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    import scipy

    return {"frailscan": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "kernels": kernels.BACKEND}


def manifest(command: str, config: dict, seed: int, inputs: dict, wall_clock: float) -> dict:
    return {"command": command, "argv": sys.argv[1:], "config": config, "seed": seed,
            "versions": versions(),
            "inputs": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in inputs.items()},
            "wall_clock_seconds": round(wall_clock, 3)}
