"""Readers and writers for tomography datasets and reconstructions.

A dataset holds one record per grid point with the fields ``theta_rad``,
``phi_rad``, ``shots``, ``high_counts``, ``eps01`` and ``eps10``. The CSV form
has exactly these columns; the JSON form stores the same records under
``"points"`` together with top-level ``atom_count`` and ``seed``.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .tomography import DetectionErrorModel, Reconstruction, TomographyDataset, TomographyGrid

DATASET_COLUMNS = ("theta_rad", "phi_rad", "shots", "high_counts", "eps01", "eps10")


def _records(dataset: TomographyDataset):
    th, ph = dataset.grid.points()
    e01, e10 = dataset.errors.for_points(dataset.grid.size)
    for row in zip(th, ph, dataset.shots, dataset.high_counts, e01, e10):
        yield {
            "theta_rad": float(row[0]),
            "phi_rad": float(row[1]),
            "shots": int(row[2]),
            "high_counts": int(row[3]),
            "eps01": float(row[4]),
            "eps10": float(row[5]),
        }


def dataset_to_csv(dataset: TomographyDataset) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=DATASET_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(_records(dataset))
    return buf.getvalue()


def dataset_to_dict(dataset: TomographyDataset) -> dict:
    return {
        "atom_count": dataset.atom_count,
        "seed": dataset.seed,
        "points": list(_records(dataset)),
    }


def _grid_from_points(theta, phi) -> TomographyGrid:
    # records are theta-major over a rectangular grid
    thetas = np.unique(theta)
    phis = np.unique(phi)
    grid = TomographyGrid(thetas, phis)
    gt, gp = grid.points()
    if gt.shape != theta.shape or not (np.allclose(gt, theta) and np.allclose(gp, phi)):
        raise ValueError("dataset records do not form a theta-major rectangular grid")
    return grid


def dataset_from_records(records, atom_count: int, seed=None) -> TomographyDataset:
    records = list(records)
    if not records:
        raise ValueError("dataset has no records")
    missing = set(DATASET_COLUMNS) - set(records[0])
    if missing:
        raise ValueError(f"dataset records miss fields {sorted(missing)}")
    cols = {c: np.array([float(r[c]) for r in records]) for c in DATASET_COLUMNS}
    for c in ("shots", "high_counts"):
        if np.any(cols[c] != np.round(cols[c])):
            raise ValueError(f"{c} must hold integers")
    grid = _grid_from_points(cols["theta_rad"], cols["phi_rad"])
    errors = DetectionErrorModel(cols["eps01"], cols["eps10"])
    return TomographyDataset(grid, cols["high_counts"].astype(int), cols["shots"].astype(int),
                             errors, atom_count, seed)


def dataset_from_dict(d: dict) -> TomographyDataset:
    return dataset_from_records(d["points"], int(d["atom_count"]), d.get("seed"))


def dataset_from_csv(text: str, atom_count: int, seed=None) -> TomographyDataset:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != DATASET_COLUMNS:
        raise ValueError(f"expected CSV columns {DATASET_COLUMNS}, got {reader.fieldnames}")
    return dataset_from_records(reader, atom_count, seed)


def save_dataset(dataset: TomographyDataset, path) -> None:
    """Write ``.csv`` or ``.json`` depending on the suffix."""
    path = Path(path)
    if path.suffix == ".csv":
        path.write_text(dataset_to_csv(dataset), encoding="utf-8")
    elif path.suffix == ".json":
        path.write_text(json.dumps(dataset_to_dict(dataset), indent=2), encoding="utf-8")
    else:
        raise ValueError(f"unsupported dataset file type {path.suffix!r}")


def load_dataset(path, atom_count=None, seed=None) -> TomographyDataset:
    """Read a dataset file; ``atom_count`` is required for CSV input."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return dataset_from_dict(json.loads(text))
    if atom_count is None:
        raise ValueError("atom_count is required to read a CSV dataset")
    return dataset_from_csv(text, atom_count, seed)


def complex_to_pairs(matrix) -> list:
    """Row-major nested ``[re, im]`` pairs."""
    m = np.asarray(matrix, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]


def pairs_to_complex(pairs) -> np.ndarray:
    a = np.asarray(pairs, dtype=float)
    if a.ndim != 3 or a.shape[2] != 2:
        raise ValueError("expected a nested list of [re, im] pairs")
    return a[..., 0] + 1j * a[..., 1]


def reconstruction_to_dict(rec: Reconstruction) -> dict:
    return {
        "atom_count": rec.atom_count,
        "n_max": rec.n_max,
        "matrix": complex_to_pairs(rec.matrix),
        "diagnostics": rec.diagnostics(),
    }


def reconstruction_from_dict(d: dict) -> Reconstruction:
    diag = d.get("diagnostics", {})
    return Reconstruction(
        pairs_to_complex(d["matrix"]), int(d["atom_count"]), int(d["n_max"]),
        float(diag.get("log_likelihood", np.nan)), int(diag.get("iterations", 0)),
        bool(diag.get("converged", False)), float(diag.get("sink_weight", 0.0)),
    )
