"""Reconstruction losses and deformation regularizers evaluated on given states."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import TriMesh

CSV_COLUMNS = ["frame", "silhouette", "rgb", "flow", "shape", "dr", "total"]


@dataclass
class LossWeights:
    silhouette: float = 1.0
    rgb: float = 0.1
    flow: float = 0.5
    perceptual: float = 0.0
    shape: float = 0.1
    dr: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")
        if self.perceptual != 0.0:
            raise ValueError("perceptual loss is not supported; its weight must stay 0")


@dataclass
class LossReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, frame: int, **terms) -> dict:
        row = {"frame": frame}
        row.update({k: float(terms.get(k, 0.0)) for k in CSV_COLUMNS[1:]})
        for k, v in row.items():
            if k != "frame" and not np.isfinite(v):
                raise FloatingPointError(f"non-finite {k} loss at frame {frame}")
        self.rows.append(row)
        return row

    def totals(self) -> dict:
        return {k: float(sum(r[k] for r in self.rows)) for k in CSV_COLUMNS[1:]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (r[k] if k == "frame" else repr(r[k])) for k in CSV_COLUMNS})


def _edge_lengths(pos: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)


def dr_loss(pos_t, pos_t1, edges, R) -> float:
    """sum over edges of R_ij * | |X_i^t - X_j^t| - |X_i^t+1 - X_j^t+1| |.

    Each undirected edge is counted once.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    R = getattr(R, "R", R)
    R = np.broadcast_to(np.asarray(R, dtype=np.float64), (len(edges),))
    diff = np.abs(_edge_lengths(np.asarray(pos_t), edges) - _edge_lengths(np.asarray(pos_t1), edges))
    return float(np.sum(R * diff))


def arap_loss(pos_t, pos_t1, edges) -> float:
    return dr_loss(pos_t, pos_t1, edges, 1.0)


def shape_loss(mesh: TriMesh, vertices: np.ndarray | None = None) -> float:
    """Uniform Laplacian smoothness: sum_i |X_i - mean of neighbours|^2.

    Isolated vertices have no neighbours and are skipped.
    """
    X = mesh.vertices if vertices is None else np.asarray(vertices)
    e = mesh.edges
    n = mesh.n_vertices
    deg = np.bincount(e.ravel(), minlength=n).astype(np.float64)
    acc = np.zeros((n, 3))
    np.add.at(acc, e[:, 0], X[e[:, 1]])
    np.add.at(acc, e[:, 1], X[e[:, 0]])
    has = deg > 0
    centroid = acc[has] / deg[has, None]
    return float(np.sum((X[has] - centroid) ** 2))


def isolated_vertices(mesh: TriMesh) -> np.ndarray:
    deg = np.bincount(mesh.edges.ravel(), minlength=mesh.n_vertices)
    return np.nonzero(deg == 0)[0]


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"raster size mismatch: {a.shape} vs {b.shape}")


def silhouette_loss(rendered, target) -> float:
    r = np.asarray(getattr(rendered, "mask", rendered), dtype=np.float64)
    t = np.asarray(getattr(target, "mask", target), dtype=np.float64)
    _check_same(r, t)
    return float(np.mean((r - t) ** 2))


def flow_loss(rendered, target) -> float:
    """Confidence-weighted mean squared flow difference; confidence from ``target``."""
    rf = np.asarray(rendered.flow, dtype=np.float64)
    tf = np.asarray(target.flow, dtype=np.float64)
    _check_same(rf, tf)
    sigma = np.asarray(target.confidence, dtype=np.float64)
    return float(np.mean(sigma * np.sum((rf - tf) ** 2, axis=-1)))


def rgb_loss(rendered, target) -> float:
    """Mean absolute colour difference (L1)."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_same(r, t)
    return float(np.mean(np.abs(r - t)))


def read_losses_csv(path) -> list[dict]:
    with open(Path(path)) as fh:
        return [
            {k: (int(v) if k == "frame" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
