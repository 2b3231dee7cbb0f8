"""Scores for a recovered rig against synthetic ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import TriMesh
from .kinematics import PoseFrame, blend_skin
from .rendering import Camera, project
from .skeleton import Skeleton
from .skinning import SkinningWeights, one_hot_parts

KEYPOINT_FACTOR = 0.2


@dataclass
class EvalMetrics:
    bone_count_error: int
    joint_error: float
    vertex_rms: list[float]
    part_agreement: float
    keypoint_transfer: float
    chamfer: float

    @property
    def mean_vertex_rms(self) -> float:
        return float(np.mean(self.vertex_rms)) if self.vertex_rms else 0.0

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["mean_vertex_rms"] = self.mean_vertex_rms
        return doc


def _wmat(W) -> np.ndarray:
    return W.W if isinstance(W, SkinningWeights) else np.asarray(W, dtype=np.float64)


def _joint_positions(skel: Skeleton) -> np.ndarray:
    return np.array([j.position for j in skel.joints], dtype=np.float64).reshape(-1, 3)


def joint_error(found: Skeleton, truth: Skeleton, diag: float) -> float:
    """Mean distance between optimally matched joints, as a fraction of ``diag``.

    Ground-truth joints left unmatched count as a full diagonal each.
    """
    G = _joint_positions(truth)
    J = _joint_positions(found)
    if len(G) == 0:
        return 0.0
    if len(J) == 0:
        return 1.0
    D = np.linalg.norm(G[:, None] - J[None], axis=2)
    r, c = linear_sum_assignment(D)
    total = D[r, c].sum() + diag * (len(G) - len(r))
    return float(total / (len(G) * diag))


def part_agreement(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of vertices whose part matches under the best one-to-one part pairing."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if len(truth) == 0:
        return 1.0
    C = np.zeros((labels.max() + 1, truth.max() + 1), dtype=np.int64)
    np.add.at(C, (labels, truth), 1)
    r, c = linear_sum_assignment(C, maximize=True)
    return float(C[r, c].sum() / len(truth))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Mean nearest-neighbour distance, averaged over both directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


def truth_keypoints(truth: Skeleton, segments: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions plus segment midpoints, with the bone that carries each."""
    pts, owner = [], []
    for j in truth.joints:
        pts.append(j.position)
        owner.append(j.bone_a)
    for b, (a, e) in enumerate(segments):
        pts.append(0.5 * (np.asarray(a) + np.asarray(e)))
        owner.append(b)
    return np.array(pts, dtype=np.float64).reshape(-1, 3), np.array(owner, dtype=np.int64)


def keypoint_transfer(
    rest: np.ndarray,
    W,
    poses: list[PoseFrame],
    keypoints: np.ndarray,
    truth_tracks: np.ndarray,
    cameras: list[Camera],
    mask_areas: np.ndarray,
    *,
    neighbours: int = 4,
) -> float:
    """Share of keypoints that land within 0.2 sqrt(|S|) pixels of the truth.

    Each rest keypoint borrows the averaged weight rows of its nearest rest
    vertices and is carried through the fitted poses, then projected.
    """
    Wm = _wmat(W)
    k = min(neighbours, len(rest))
    _, idx = cKDTree(rest).query(keypoints, k=k)
    idx = np.asarray(idx).reshape(len(keypoints), k)
    Wk = Wm[idx].mean(axis=1)
    Wk /= Wk.sum(axis=1, keepdims=True)
    hits = 0
    total = 0
    for t, (pose, cam) in enumerate(zip(poses, cameras)):
        moved = blend_skin(keypoints, Wk, pose)
        d = np.linalg.norm(project(cam, moved) - project(cam, truth_tracks[t]), axis=1)
        hits += int(np.count_nonzero(d <= KEYPOINT_FACTOR * np.sqrt(mask_areas[t])))
        total += len(d)
    return hits / total if total else 1.0


def evaluate(
    mesh: TriMesh,
    truth_skeleton: Skeleton,
    truth_labels: np.ndarray,
    truth_poses: list[PoseFrame],
    truth_positions: np.ndarray,
    cameras: list[Camera],
    mask_areas: np.ndarray,
    segments: list[tuple[np.ndarray, np.ndarray]],
    skeleton: Skeleton,
    W,
    poses: list[PoseFrame],
) -> EvalMetrics:
    X = mesh.vertices
    diag = mesh.bbox_diagonal()
    recon = [blend_skin(X, W, p) for p in poses]
    rms = [float(np.sqrt(np.mean(np.sum((r - y) ** 2, axis=1)))) for r, y in zip(recon, truth_positions)]
    kp, owner = truth_keypoints(truth_skeleton, segments)
    tracks = np.array([[p.world_transform(b).apply(q[None])[0] for q, b in zip(kp, owner)] for p in truth_poses])
    tracks = tracks.reshape(len(truth_poses), len(kp), 3)
    return EvalMetrics(
        bone_count_error=abs(skeleton.n_bones - truth_skeleton.n_bones),
        joint_error=joint_error(skeleton, truth_skeleton, diag),
        vertex_rms=rms,
        part_agreement=part_agreement(one_hot_parts(_wmat(W)).labels, truth_labels),
        keypoint_transfer=keypoint_transfer(X, W, poses, kp, tracks, cameras, mask_areas),
        chamfer=float(np.mean([chamfer(r, y) for r, y in zip(recon, truth_positions)])) if recon else 0.0,
    )
