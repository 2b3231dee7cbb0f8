"""Per-vertex and per-bone 2D motion from an optical-flow raster."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .skinning import SkinningWeights

UNOBSERVED_MASS = 1e-3


@dataclass
class SurfaceFlow:
    flow: np.ndarray
    visible: np.ndarray


@dataclass
class BoneFlow:
    flow: np.ndarray
    mass: np.ndarray
    observed: np.ndarray


def sample_surface_flow(flow, projected, vis) -> SurfaceFlow:
    """Bilinear flow sample at each projected vertex.

    Samples whose 2x2 footprint leaves the image are zeroed and marked
    invisible, as are vertices with ``vis == 0``.
    """
    F = np.asarray(getattr(flow, "flow", flow), dtype=np.float64)
    H, W = F.shape[:2]
    uv = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    visible = np.asarray(vis).astype(bool).copy()
    u, v = uv[:, 0], uv[:, 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= W - 1) & (v <= H - 1)
    visible &= inside
    out = np.zeros((len(uv), 2))
    if visible.any():
        uu, vv = u[visible], v[visible]
        j0 = np.minimum(np.floor(uu).astype(np.int64), W - 1)
        i0 = np.minimum(np.floor(vv).astype(np.int64), H - 1)
        j1 = np.minimum(j0 + 1, W - 1)
        i1 = np.minimum(i0 + 1, H - 1)
        a = (uu - j0)[:, None]
        b = (vv - i0)[:, None]
        out[visible] = (
            (1 - a) * (1 - b) * F[i0, j0]
            + a * (1 - b) * F[i0, j1]
            + (1 - a) * b * F[i1, j0]
            + a * b * F[i1, j1]
        )
    return SurfaceFlow(out, visible.astype(np.int8))


def bone_flow(surface: SurfaceFlow, W: SkinningWeights | np.ndarray, *, normalized: bool = False) -> BoneFlow:
    """F_b = sum_n W[n, b] * F_n * vis_n.

    ``normalized=True`` divides by the visible weight mass (diagnostics only;
    directions are unchanged). Bones whose visible mass is below 1e-3 * N are
    flagged unobserved.
    """
    Wm = W.W if isinstance(W, SkinningWeights) else np.asarray(W, dtype=np.float64)
    vis = surface.visible.astype(np.float64)
    Wv = Wm * vis[:, None]
    F = Wv.T @ surface.flow
    mass = Wv.sum(axis=0)
    observed = mass >= UNOBSERVED_MASS * Wm.shape[0]
    if normalized:
        F = np.where(mass[:, None] > 0, F / np.where(mass > 0, mass, 1.0)[:, None], 0.0)
    return BoneFlow(F, mass, observed)


class ZeroVectorError(ValueError):
    pass


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def write_bone_flow_csv(path, frames: list[tuple[int, BoneFlow]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "bone", "u", "v", "mass"])
        for frame, bf in frames:
            for b, ((u, v), m) in enumerate(zip(bf.flow.tolist(), bf.mass.tolist())):
                w.writerow([frame, b, repr(u), repr(v), repr(m)])
