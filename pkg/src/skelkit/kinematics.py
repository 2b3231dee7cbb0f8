"""Linear blend skinning, its exact inverse, and per-frame pose fitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .geometry import TriMesh
from .losses import LossWeights, dr_loss
from .skinning import SkinningWeights
from .transforms import RigidTransform

if TYPE_CHECKING:
    from .rendering import Camera

__all__ = [
    "RigidTransform",
    "PoseFrame",
    "blend_skin",
    "backward_blend_skin",
    "fit_pose_procrustes",
    "refine_pose_gradient",
]


class SingularBlendError(ValueError):
    pass


class DegeneratePartError(ValueError):
    pass


@dataclass
class PoseFrame:
    root: RigidTransform
    per_bone: list[RigidTransform]
    camera: "Camera | None" = field(default=None, compare=False)

    @classmethod
    def identity(cls, n_bones: int, camera=None) -> "PoseFrame":
        return cls(RigidTransform.identity(), [RigidTransform.identity() for _ in range(n_bones)], camera)

    @property
    def n_bones(self) -> int:
        return len(self.per_bone)

    def bone_matrices(self) -> np.ndarray:
        return np.stack([T.matrix() for T in self.per_bone]) if self.per_bone else np.zeros((0, 4, 4))

    def world_transform(self, bone: int) -> RigidTransform:
        return self.root.compose(self.per_bone[bone])

    def to_json(self) -> dict:
        return {"root": self.root.to_json(), "bones": [T.to_json() for T in self.per_bone]}

    @classmethod
    def from_json(cls, doc, camera=None) -> "PoseFrame":
        return cls(
            RigidTransform.from_json(doc["root"]),
            [RigidTransform.from_json(b) for b in doc["bones"]],
            camera,
        )


def save_poses(poses: list[PoseFrame], path) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in poses], indent=1))


def load_poses(path) -> list[PoseFrame]:
    return [PoseFrame.from_json(d) for d in json.loads(Path(path).read_text())]


def _rest(mesh) -> np.ndarray:
    return mesh.vertices if isinstance(mesh, TriMesh) else np.asarray(mesh, dtype=np.float64)


def _weights(W) -> np.ndarray:
    return W.W if isinstance(W, SkinningWeights) else np.asarray(W, dtype=np.float64)


def blended_matrices(W, pose: PoseFrame) -> np.ndarray:
    """Per-vertex sum_b W[n, b] T_b as N x 4 x 4.

    Evaluated as I + sum_b W[n, b] (T_b - I), equal for row-stochastic W but
    exact when every bone is the identity.
    """
    Wm = _weights(W)
    if Wm.shape[1] != pose.n_bones:
        raise ValueError(f"weights have {Wm.shape[1]} bones, pose has {pose.n_bones}")
    eye = np.eye(4)
    return eye + np.einsum("nb,bij->nij", Wm, pose.bone_matrices() - eye)


def blend_skin(mesh, W, pose: PoseFrame) -> np.ndarray:
    """X_n^t = T_0 (sum_b W[n, b] T_b) X_n^0."""
    X = _rest(mesh)
    M = blended_matrices(W, pose)
    local = np.einsum("nij,nj->ni", M[:, :3, :3], X) + M[:, :3, 3]
    return pose.root.apply(local)


def backward_blend_skin(posed, W, pose: PoseFrame, *, mode: str = "exact", max_cond: float = 1e8) -> np.ndarray:
    """Map posed vertices back to the rest pose.

    ``mode="exact"`` inverts each vertex's blended matrix, so it undoes
    :func:`blend_skin` exactly. ``mode="blend_inverse"`` blends the inverse
    bone transforms instead, which is only approximate for soft weights.
    """
    Y = pose.root.inverse().apply(np.asarray(posed, dtype=np.float64))
    Wm = _weights(W)
    if mode == "blend_inverse":
        inv = PoseFrame(RigidTransform.identity(), [T.inverse() for T in pose.per_bone])
        M = blended_matrices(Wm, inv)
        return np.einsum("nij,nj->ni", M[:, :3, :3], Y) + M[:, :3, 3]
    if mode != "exact":
        raise ValueError(f"unknown backward skinning mode {mode!r}")
    M = blended_matrices(Wm, pose)
    A = M[:, :3, :3]
    rhs = Y - M[:, :3, 3]
    cond = np.linalg.cond(A) if len(A) else np.zeros(0)
    bad = np.nonzero(~np.isfinite(cond) | (cond > max_cond))[0]
    if len(bad):
        raise SingularBlendError(
            f"blended matrix of vertex {int(bad[0])} is singular (condition {cond[bad[0]]:.3g})"
        )
    out = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
    # rows carrying a single bone invert analytically
    rows, cols = np.nonzero(Wm == 1.0)
    for b in np.unique(cols):
        sel = rows[cols == b]
        out[sel] = pose.per_bone[b].inverse().apply(Y[sel])
    return out


def weighted_procrustes(src: np.ndarray, dst: np.ndarray, w: np.ndarray | None = None):
    """Rotation R and translation t minimising sum w |R src + t - dst|^2.

    Returns (R, t, singular_values) so callers can judge degeneracy.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if w is None else np.asarray(w, dtype=np.float64)
    sw = w.sum()
    cs = (w @ src) / sw
    cd = (w @ dst) / sw
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cd - R @ cs
    spread = np.linalg.svd((src - cs) * np.sqrt(w)[:, None], compute_uv=False)
    return R, t, spread


def _degenerate(spread: np.ndarray) -> bool:
    return spread[0] == 0.0 or spread[1] <= 1e-9 * spread[0]


def fit_pose_procrustes(
    mesh,
    W,
    targets,
    *,
    on_degenerate: str = "raise",
    camera=None,
) -> PoseFrame:
    """Fit the root on all vertices, then each bone's residual transform on its part.

    ``W`` is normally one-hot; soft weights act as per-vertex Procrustes weights.
    Parts with fewer than three non-collinear vertices raise, or get the
    identity residual when ``on_degenerate="identity"``.
    """
    X = _rest(mesh)
    Y = np.asarray(targets, dtype=np.float64)
    Wm = _weights(W)
    R0, t0, spread = weighted_procrustes(X, Y)
    if _degenerate(spread):
        raise DegeneratePartError("root fit is degenerate: rest vertices are collinear")
    root = RigidTransform.from_matrix(R0, t0)
    Yl = root.inverse().apply(Y)
    bones = []
    for b in range(Wm.shape[1]):
        w = Wm[:, b]
        sel = w > 0
        if np.count_nonzero(sel) < 3:
            spread = np.zeros(3)
        else:
            Rb, tb, spread = weighted_procrustes(X[sel], Yl[sel], w[sel])
        if _degenerate(spread):
            if on_degenerate == "raise":
                raise DegeneratePartError(f"bone {b}: part has fewer than 3 non-collinear vertices")
            bones.append(RigidTransform.identity())
            continue
        bones.append(RigidTransform.from_matrix(Rb, tb))
    return PoseFrame(root, bones, camera)


# --------------------------------------------------------------------------- gradient refinement


@dataclass
class GradientConfig:
    iters: int = 100
    fd_step: float = 1e-6
    lr: float = 1e-2
    min_lr: float = 1e-12
    tol: float = 1e-14


def _pose_params(pose: PoseFrame) -> int:
    return 6 * (pose.n_bones + 1)


def _perturb(pose: PoseFrame, delta: np.ndarray) -> PoseFrame:
    d = delta.reshape(-1, 6)
    root = pose.root.perturbed(d[0])
    bones = [T.perturbed(di) for T, di in zip(pose.per_bone, d[1:])]
    return PoseFrame(root, bones, pose.camera)


def pose_objective(mesh, W, pose, targets, losses: LossWeights | None = None, R=None, reference=None) -> float:
    """Squared vertex error plus eta * DR loss against ``reference`` (default: rest)."""
    X = _rest(mesh)
    P = blend_skin(X, W, pose)
    val = float(np.sum((P - targets) ** 2))
    if losses is not None and losses.dr > 0 and R is not None and isinstance(mesh, TriMesh):
        ref = X if reference is None else reference
        val += losses.dr * dr_loss(ref, P, mesh.edges, R)
    return val


def numeric_gradient(fn, pose: PoseFrame, h: float) -> np.ndarray:
    n = _pose_params(pose)
    g = np.zeros(n)
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        g[k] = (fn(_perturb(pose, e)) - fn(_perturb(pose, -e))) / (2.0 * h)
    return g


def refine_pose_gradient(
    mesh,
    W,
    pose_init: PoseFrame,
    targets,
    losses: LossWeights | None = None,
    *,
    R=None,
    reference=None,
    config: GradientConfig | None = None,
) -> PoseFrame:
    """Descend the pose objective with central-difference gradients.

    Steps use backtracking, so the returned objective never exceeds the
    initial one.
    """
    cfg = config or GradientConfig()
    targets = np.asarray(targets, dtype=np.float64)

    def fn(p):
        return pose_objective(mesh, W, p, targets, losses, R, reference)

    pose = pose_init
    f = fn(pose)
    if not np.isfinite(f):
        raise FloatingPointError("non-finite pose objective")
    lr = cfg.lr
    for _ in range(cfg.iters):
        g = numeric_gradient(fn, pose, cfg.fd_step)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite pose gradient")
        gn = float(g @ g)
        if gn <= cfg.tol:
            break
        while lr >= cfg.min_lr:
            cand = _perturb(pose, -lr * g)
            fc = fn(cand)
            if np.isfinite(fc) and fc <= f - 1e-4 * lr * gn:
                break
            lr *= 0.5
        else:
            break
        pose, f = cand, fc
        lr *= 2.0
    return pose
