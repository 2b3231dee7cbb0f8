"""Joint localisation, bone-length tracking, merge/split refinement and the
alternating skeleton/shape optimisation loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .contraction import ContractionConfig, connectivity_surgery, contract
from .flowwarp import UNOBSERVED_MASS, bone_flow, sample_surface_flow
from .geometry import TriMesh
from .kinematics import GradientConfig, PoseFrame, blend_skin, fit_pose_procrustes, refine_pose_gradient
from .losses import LossReport, LossWeights, dr_loss, flow_loss, shape_loss, silhouette_loss
from .rendering import Camera, FlowRaster, SilhouetteRaster, flow_from_correspondence, project, rasterize_silhouette, visibility
from .skeleton import Bone, Joint, Skeleton, bone_from_segment, save_skeleton, skeleton_from_graph
from .skinning import SkinningWeights, compute_skinning_weights, one_hot_parts, rigidity_coefficients, save_weights

log = logging.getLogger(__name__)

ZERO_FLOW = 1e-12


@dataclass
class RefineConfig:
    """Thresholds and loop settings.

    ``t_d`` is relative to each bone's mean tracked length unless
    ``t_d_relative`` is False. ``t_o >= 1`` disables merging and
    ``t_d = inf`` disables splitting.
    """

    t_r: float = 0.4
    t_o: float = 0.9
    t_d: float = 0.5
    t_d_relative: bool = True
    H: int | None = None
    seed: int = 0
    max_outer_iters: int = 20
    quiet_iters: int = 2
    robust_percentile: float | None = None
    temperature: float = 1.0
    lam: float = 0.1
    reanchor: bool = True
    far_fraction: float = 0.1
    pose_gradient_iters: int = 0
    motion_sigma: float | None = 0.005
    losses: LossWeights = field(default_factory=LossWeights)
    contraction: ContractionConfig = field(default_factory=ContractionConfig)

    def __post_init__(self):
        if not 0.0 < self.t_r < 1.0:
            raise ValueError("t_r must lie in (0, 1)")
        if not self.t_o > -1.0:
            raise ValueError("t_o must exceed -1")
        if not self.t_d > 0.0:
            raise ValueError("t_d must be positive")
        if self.H is not None and self.H < 2:
            raise ValueError("H must be at least 2")
        if self.max_outer_iters < 1 or self.quiet_iters < 1:
            raise ValueError("iteration counts must be positive")
        if self.robust_percentile is not None and not 0.0 <= self.robust_percentile <= 100.0:
            raise ValueError("robust_percentile must lie in [0, 100]")
        if not 0.0 < self.far_fraction <= 1.0:
            raise ValueError("far_fraction must lie in (0, 1]")
        if self.motion_sigma is not None and not self.motion_sigma > 0.0:
            raise ValueError("motion_sigma must be positive")

    def sample_count(self, n_frames: int) -> int:
        return min(8, n_frames) if self.H is None else min(self.H, n_frames)


# --------------------------------------------------------------------------- joints and lengths


def _wmat(W) -> np.ndarray:
    return W.W if isinstance(W, SkinningWeights) else np.asarray(W, dtype=np.float64)


def joint_support(positions, W, skel: Skeleton, t_r: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean position of each joint's support set and whether the set is non-empty."""
    X = np.asarray(positions, dtype=np.float64)
    Wm = _wmat(W)
    out = np.array([j.position for j in skel.joints]).reshape(-1, 3)
    ok = np.zeros(len(skel.joints), dtype=bool)
    for k, j in enumerate(skel.joints):
        sel = (Wm[:, j.bone_a] >= t_r) & (Wm[:, j.bone_b] >= t_r)
        if sel.any():
            out[k] = X[sel].mean(axis=0)
            ok[k] = True
    return out, ok


def localize_joints(positions, W, skel: Skeleton, t_r: float = 0.4, fallback=None) -> Skeleton:
    """Joints moved to the mean of vertices with both bone weights >= t_r.

    Joints without support keep ``fallback[k]`` (default: their current
    position); :func:`joint_support` reports which those are.
    """
    P, ok = joint_support(positions, W, skel, t_r)
    if fallback is not None:
        fb = np.asarray(fallback, dtype=np.float64).reshape(-1, 3)
        P[~ok] = fb[~ok]
    for k in np.nonzero(~ok)[0]:
        log.debug("joint %d has no vertex above t_r=%.2f; position kept", k, t_r)
    joints = [Joint(j.bone_a, j.bone_b, P[k]) for k, j in enumerate(skel.joints)]
    return Skeleton(list(skel.bones), joints)


@dataclass
class BoneEnds:
    """How a bone's length is measured: between two joints, from one joint
    to the far node, or not at all (no joints)."""

    kind: str
    joints: tuple[int, ...] = ()


def bone_ends(skel: Skeleton) -> list[BoneEnds]:
    out = []
    for b in range(skel.n_bones):
        js = skel.joints_of(b)
        if not js:
            out.append(BoneEnds("free"))
            continue
        best, pair = 0.0, None
        for i in range(len(js)):
            for k in range(i + 1, len(js)):
                d = float(np.linalg.norm(skel.joints[js[i]].position - skel.joints[js[k]].position))
                if d > best:
                    best, pair = d, (js[i], js[k])
        if pair is None:
            out.append(BoneEnds("terminal", (js[0],)))
        else:
            out.append(BoneEnds("joints", pair))
    return out


def far_support(rest, W, skel: Skeleton, fraction: float = 0.1) -> list[np.ndarray]:
    """Vertices standing in for each terminal bone's far node: the part
    vertices in the top ``fraction`` of rest distance from the joint."""
    X = np.asarray(rest, dtype=np.float64)
    labels = one_hot_parts(_wmat(W)).labels
    out = []
    for b, e in enumerate(bone_ends(skel)):
        idx = np.nonzero(labels == b)[0]
        if e.kind != "terminal" or len(idx) == 0:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        d = np.linalg.norm(X[idx] - skel.joints[e.joints[0]].position, axis=1)
        cut = np.quantile(d, 1.0 - fraction)
        out.append(idx[d >= cut])
    return out


def bone_lengths(skel: Skeleton, joints_per_frame, far_points=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame bone lengths (F x B) and a mask of bones whose length is tracked.

    Bones bounded by two joints use the joint distance; terminal bones use
    the joint to ``far_points[f, b]`` (or to the far end of the ellipsoid when
    no far point is given); bones without joints are flagged and keep their
    stored length.
    """
    J = np.asarray(joints_per_frame, dtype=np.float64)
    if J.ndim == 2:
        J = J[None]
    F = len(J)
    L = np.zeros((F, skel.n_bones))
    ok = np.ones(skel.n_bones, dtype=bool)
    for b, e in enumerate(bone_ends(skel)):
        if e.kind == "joints":
            L[:, b] = np.linalg.norm(J[:, e.joints[0]] - J[:, e.joints[1]], axis=1)
        elif e.kind == "terminal":
            j = e.joints[0]
            if far_points is not None and np.all(np.isfinite(far_points[:, b])):
                far = np.asarray(far_points)[:, b]
            else:
                far = np.broadcast_to(_far_end(skel.bones[b], skel.joints[j].position), (F, 3))
            L[:, b] = np.linalg.norm(J[:, j] - far, axis=1)
        else:
            ok[b] = False
            L[:, b] = skel.bones[b].length
    return L, ok


def _far_end(bone: Bone, from_point) -> np.ndarray:
    p0, p1 = bone.endpoints()
    q = np.asarray(from_point, dtype=np.float64)
    return p0 if np.linalg.norm(p0 - q) > np.linalg.norm(p1 - q) else p1


# --------------------------------------------------------------------------- statistics


@dataclass
class MStepStats:
    frames: np.ndarray
    flows: np.ndarray
    observed: np.ndarray
    lengths: np.ndarray
    length_ok: np.ndarray
    pair_similarity: dict = field(default_factory=dict)
    far_rest: np.ndarray | None = None

    def __post_init__(self):
        self.flows = np.asarray(self.flows, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        self.lengths = np.asarray(self.lengths, dtype=np.float64)
        self.length_ok = np.asarray(self.length_ok, dtype=bool)
        if len(self.flows) < 2 or len(self.lengths) < 2:
            raise ValueError("statistics need at least 2 sampled frames")

    @property
    def length_range(self) -> np.ndarray:
        return self.lengths.max(axis=0) - self.lengths.min(axis=0)

    @property
    def mean_length(self) -> np.ndarray:
        return self.lengths.mean(axis=0)

    @classmethod
    def build(cls, skel: Skeleton, frames, flows, observed, lengths, length_ok, *, percentile=None, far_rest=None):
        st = cls(np.asarray(frames), flows, observed, lengths, length_ok, far_rest=far_rest)
        st.pair_similarity = pair_similarities(skel, st.flows, st.observed, percentile)
        return st


def pair_similarities(skel: Skeleton, flows, observed, percentile=None) -> dict:
    """Cosine similarity over sampled frames for each joint-connected pair.

    Frames in which either bone flow vanishes carry no direction and are
    left out. Pairs with an unobserved bone in any frame, or with no usable
    frame, map to None.
    """
    flows = np.asarray(flows, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    out: dict = {}
    for j in skel.joints:
        a, b = j.pair
        if (a, b) in out:
            continue
        if not (observed[:, a].all() and observed[:, b].all()):
            out[(a, b)] = None
            continue
        fa, fb = flows[:, a], flows[:, b]
        na = np.linalg.norm(fa, axis=1)
        nb = np.linalg.norm(fb, axis=1)
        use = (na > ZERO_FLOW) & (nb > ZERO_FLOW)
        if not use.any():
            out[(a, b)] = None
            continue
        cos = np.clip(np.einsum("fi,fi->f", fa[use], fb[use]) / (na[use] * nb[use]), -1.0, 1.0)
        out[(a, b)] = float(cos.min() if percentile is None else np.percentile(cos, percentile))
    return out


# --------------------------------------------------------------------------- refinement


@dataclass
class RefineResult:
    skeleton: Skeleton
    weights: np.ndarray
    merges: list[tuple[int, int]]
    splits: list[int]
    bone_map: np.ndarray

    @property
    def changed(self) -> bool:
        return bool(self.merges or self.splits)


def _spd(Q: np.ndarray) -> np.ndarray:
    Q = 0.5 * (Q + Q.T)
    w, U = np.linalg.eigh(Q)
    top = max(float(w.max()), 1e-300)
    w = np.maximum(w, 1e-12 * top)
    return (U * w) @ U.T


def merge_bones(skel: Skeleton, a: int, b: int, W) -> Bone:
    """Softmax-of-summed-weights blend of centers and precisions; length and
    axis from the far ends of the two bones."""
    Wm = _wmat(W)
    w = softmax(np.array([Wm[:, a].sum(), Wm[:, b].sum()]))
    A, B = skel.bones[a], skel.bones[b]
    C = w[0] * A.center + w[1] * B.center
    Q = _spd(w[0] * A.Q + w[1] * B.Q)
    shared = [j for j in skel.joints if j.pair == (min(a, b), max(a, b))]
    pivot = shared[0].position if shared else 0.5 * (A.center + B.center)
    fa = _far_point(skel, a, pivot)
    fb = _far_point(skel, b, pivot)
    d = fb - fa
    length = float(np.linalg.norm(d))
    axis = d / length if length > 0 else A.axis
    return Bone(C, Q, length, axis)


def _far_point(skel: Skeleton, b: int, pivot) -> np.ndarray:
    """The bone's other joint farthest from ``pivot``, else its far ellipsoid end."""
    pivot = np.asarray(pivot, dtype=np.float64)
    best, pt = 1e-12, None
    for k in skel.joints_of(b):
        p = skel.joints[k].position
        d = float(np.linalg.norm(p - pivot))
        if d > best:
            best, pt = d, p
    return pt if pt is not None else _far_end(skel.bones[b], pivot)


def _choose_merges(stats: MStepStats, t_o: float) -> list[tuple[int, int]]:
    cand = [(s, p) for p, s in stats.pair_similarity.items() if s is not None and s > t_o]
    cand.sort(key=lambda x: (-x[0], x[1]))
    used: set[int] = set()
    out = []
    for _, (a, b) in cand:
        if a in used or b in used:
            continue
        used.update((a, b))
        out.append((a, b))
    return out


def _endpoints(skel: Skeleton, b: int, ends: BoneEnds, far_rest) -> tuple[np.ndarray, np.ndarray] | None:
    if ends.kind == "joints":
        return skel.joints[ends.joints[0]].position, skel.joints[ends.joints[1]].position
    if ends.kind == "terminal":
        p0 = skel.joints[ends.joints[0]].position
        if far_rest is not None and np.all(np.isfinite(far_rest[b])):
            return p0, np.asarray(far_rest[b])
        return p0, _far_end(skel.bones[b], p0)
    return None


def refine_skeleton(skel: Skeleton, stats: MStepStats, cfg: RefineConfig, W, rest=None) -> RefineResult:
    """One M-step: greedy merges of in-sync neighbours, then splits of bones
    whose tracked length fluctuates by more than t_d.

    ``W`` columns of merged bones are summed and those of split bones are
    divided by side of the new joint (using ``rest`` vertex positions; an
    even split without them).
    """
    Wm = _wmat(W).copy()
    nb = skel.n_bones
    merges = _choose_merges(stats, cfg.t_o)
    absorbed = {b: a for a, b in merges}
    merged_into = {a: b for a, b in merges}
    survivors = [b for b in range(nb) if b not in absorbed]
    new_index = {b: k for k, b in enumerate(survivors)}
    for b, a in absorbed.items():
        new_index[b] = new_index[a]

    bones = []
    for b in survivors:
        bones.append(merge_bones(skel, b, merged_into[b], Wm) if b in merged_into else skel.bones[b])
    cols = [Wm[:, b] + (Wm[:, merged_into[b]] if b in merged_into else 0.0) for b in survivors]
    joints: list[Joint] = []
    seen = set()
    for j in skel.joints:
        a, b = new_index[j.bone_a], new_index[j.bone_b]
        if a == b:
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            continue
        seen.add(key)
        joints.append(Joint(a, b, j.position))
    bone_map = np.array([new_index[b] for b in range(nb)], dtype=np.int64)

    # splits: only bones untouched by this step's merges have valid statistics
    splits = []
    if math.isfinite(cfg.t_d):
        rng_ = stats.length_range
        thr = cfg.t_d * stats.mean_length if cfg.t_d_relative else np.full(nb, cfg.t_d)
        ends = bone_ends(skel)
        X = None if rest is None else np.asarray(rest, dtype=np.float64)
        labels = one_hot_parts(Wm).labels
        for b in survivors:
            if b in merged_into or not stats.length_ok[b] or not rng_[b] > thr[b]:
                continue
            seg = _endpoints(skel, b, ends[b], stats.far_rest)
            if seg is None:
                continue
            p0, p1 = (np.asarray(p, dtype=np.float64) for p in seg)
            mid = 0.5 * (p0 + p1)
            k = new_index[b]
            kn = len(bones)
            if X is not None:
                side = (X - mid) @ (p1 - p0) > 0.0
                mine = labels == b
                pts0, pts1 = X[mine & ~side], X[mine & side]
                c = cols[k]
                cols[k] = np.where(side, 0.0, c)
                cols.append(np.where(side, c, 0.0))
            else:
                pts0 = pts1 = None
                cols[k] = 0.5 * cols[k]
                cols.append(cols[k].copy())
            bones[k] = bone_from_segment(p0, mid, pts0)
            bones.append(bone_from_segment(mid, p1, pts1))
            # joints nearer the far end move to the new half
            for i, j in enumerate(joints):
                if k in (j.bone_a, j.bone_b) and np.linalg.norm(j.position - p1) < np.linalg.norm(j.position - p0):
                    joints[i] = Joint(kn if j.bone_a == k else j.bone_a, kn if j.bone_b == k else j.bone_b, j.position)
            joints.append(Joint(k, kn, mid))
            splits.append(b)
    Wn = np.stack(cols, axis=1) if cols else np.zeros((Wm.shape[0], 0))
    return RefineResult(Skeleton(bones, joints), Wn, merges, splits, bone_map)


def prune_dead_bones(skel: Skeleton, W, min_mass: float, min_part: int = 3) -> tuple[Skeleton, list[int]]:
    """Drop bones whose total weight is below ``min_mass`` or whose part has
    fewer than ``min_part`` vertices.

    Such bones gather no flow evidence of their own and cannot be posed;
    their neighbours are reconnected by joints at the dropped bone's center.
    """
    Wm = _wmat(W)
    mass = Wm.sum(axis=0)
    counts = one_hot_parts(Wm).counts
    dead = [b for b in range(skel.n_bones) if mass[b] < min_mass or counts[b] < min_part]
    if not dead or len(dead) == skel.n_bones:
        return skel, []
    keep = [b for b in range(skel.n_bones) if b not in dead]
    idx = {b: k for k, b in enumerate(keep)}
    adj = skel.adjacency()
    joints: list[Joint] = []
    seen = set()

    def add(a, b, pos):
        key = (min(a, b), max(a, b))
        if a != b and key not in seen:
            seen.add(key)
            joints.append(Joint(a, b, pos))

    for j in skel.joints:
        if j.bone_a in idx and j.bone_b in idx:
            add(idx[j.bone_a], idx[j.bone_b], j.position)
    for b in dead:
        # live bones reachable through chains of dead bones
        live, stack, visited = set(), [b], {b}
        while stack:
            for n in adj[stack.pop()]:
                if n in visited:
                    continue
                visited.add(n)
                (live.add(n) if n in idx else stack.append(n))
        live = sorted(live)
        for i in range(len(live)):
            for k in range(i + 1, len(live)):
                add(idx[live[i]], idx[live[k]], skel.bones[b].center)
    return Skeleton([skel.bones[b] for b in keep], joints), dead


# --------------------------------------------------------------------------- bone re-anchoring


def reanchor_bones(skel: Skeleton, W, rest, far_fraction: float = 0.1) -> Skeleton:
    """Rebuild each ellipsoid from its bounding points and its part's radial spread."""
    X = np.asarray(rest, dtype=np.float64)
    labels = one_hot_parts(_wmat(W)).labels
    far = far_support(X, W, skel, far_fraction)
    bones = []
    for b, e in enumerate(bone_ends(skel)):
        part = X[labels == b]
        if len(part) == 0:
            bones.append(skel.bones[b])
            continue
        if e.kind == "joints":
            p0, p1 = skel.joints[e.joints[0]].position, skel.joints[e.joints[1]].position
        elif e.kind == "terminal":
            p0 = skel.joints[e.joints[0]].position
            p1 = X[far[b]].mean(axis=0) if len(far[b]) else _far_end(skel.bones[b], p0)
        else:
            c = part.mean(axis=0)
            _, _, Vt = np.linalg.svd(part - c, full_matrices=False)
            s = (part - c) @ Vt[0]
            p0, p1 = c + s.min() * Vt[0], c + s.max() * Vt[0]
        bones.append(bone_from_segment(p0, p1, part))
    return Skeleton(bones, list(skel.joints))


# --------------------------------------------------------------------------- SIOS^2 driver


@dataclass
class FrameData:
    """Observed sequence: per-frame target vertex positions, cameras and rasters.

    ``flows[t]`` maps frame t to t+1.
    """

    targets: np.ndarray
    cameras: list[Camera]
    silhouettes: list[SilhouetteRaster] = field(default_factory=list)
    flows: list[FlowRaster] = field(default_factory=list)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        T = len(self.targets)
        if T < 2:
            raise ValueError("need at least 2 frames")
        if len(self.cameras) != T:
            raise ValueError("one camera per frame")
        if self.flows and len(self.flows) != T - 1:
            raise ValueError("flows must cover consecutive frame pairs")
        if self.silhouettes and len(self.silhouettes) != T:
            raise ValueError("one silhouette per frame")

    @property
    def n_frames(self) -> int:
        return len(self.targets)


@dataclass
class IterationLog:
    iteration: int
    n_bones: int
    merges: list
    splits: list
    sampled: list
    losses: dict
    pruned: int = 0

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "n_bones": self.n_bones,
            "merges": [list(p) for p in self.merges],
            "splits": list(self.splits),
            "sampled": list(self.sampled),
            "pruned": self.pruned,
            "losses": self.losses,
        }


@dataclass
class SiosResult:
    skeleton: Skeleton
    weights: SkinningWeights
    poses: list[PoseFrame]
    report: LossReport
    history: list[IterationLog]
    initial: Skeleton


def initial_skeleton(mesh: TriMesh, config: ContractionConfig | None = None) -> Skeleton:
    cfg = config or ContractionConfig()
    res = contract(mesh, cfg)
    graph = connectivity_surgery(res.mesh, cfg, original=mesh)
    return skeleton_from_graph(graph, mesh)


@dataclass
class _EState:
    skel: Skeleton
    W: SkinningWeights
    R: object
    poses: list[PoseFrame]
    recon: np.ndarray
    report: LossReport
    pruned: int = 0


def motion_bias(rest, targets, poses: list[PoseFrame], sigma: float) -> np.ndarray:
    """phi[n, b] = -mean_t |T_b^t X_n - Y_n^t|^2 / sigma^2.

    Pulls each vertex toward the bones whose fitted motion reproduces its
    trajectory.
    """
    X = np.asarray(rest, dtype=np.float64)
    B = poses[0].n_bones
    err = np.zeros((len(X), B))
    for pose, Y in zip(poses, targets):
        for b in range(B):
            err[:, b] += np.sum((pose.world_transform(b).apply(X) - Y) ** 2, axis=1)
    return -err / (len(poses) * sigma * sigma)


def _fit_poses(mesh, data: FrameData, W) -> list[PoseFrame]:
    parts = one_hot_parts(W).onehot.astype(np.float64)
    return [
        fit_pose_procrustes(mesh, parts, data.targets[t], on_degenerate="identity", camera=data.cameras[t])
        for t in range(data.n_frames)
    ]


def _e_step(mesh: TriMesh, data: FrameData, skel: Skeleton, cfg: RefineConfig, prev_W=None) -> _EState:
    X = mesh.vertices
    if cfg.reanchor and prev_W is not None:
        skel = localize_joints(X, prev_W, skel, cfg.t_r)
        skel = reanchor_bones(skel, prev_W, X, cfg.far_fraction)
    sigma = None if cfg.motion_sigma is None else cfg.motion_sigma * mesh.bbox_diagonal()
    pruned = []
    while True:
        W = compute_skinning_weights(mesh, skel, temperature=cfg.temperature)
        if sigma is not None:
            phi = motion_bias(X, data.targets, _fit_poses(mesh, data, W), sigma)
            W = compute_skinning_weights(mesh, skel, bias=phi, temperature=cfg.temperature)
        skel, dead = prune_dead_bones(skel, W, UNOBSERVED_MASS * mesh.n_vertices)
        if not dead:
            break
        pruned.append(len(dead))
    skel = localize_joints(X, W, skel, cfg.t_r)
    R = rigidity_coefficients(W, mesh.edges, cfg.lam)
    poses = _fit_poses(mesh, data, W)
    recon = np.empty_like(data.targets)
    gcfg = GradientConfig(iters=cfg.pose_gradient_iters)
    for t in range(data.n_frames):
        if cfg.pose_gradient_iters > 0:
            poses[t] = refine_pose_gradient(mesh, W, poses[t], data.targets[t], cfg.losses, R=R, config=gcfg)
        recon[t] = blend_skin(mesh, W, poses[t])
    report = _losses(mesh, data, recon, R, cfg.losses)
    return _EState(skel, W, R, poses, recon, report, int(sum(pruned)))


def _losses(mesh: TriMesh, data: FrameData, recon: np.ndarray, R, lw: LossWeights) -> LossReport:
    report = LossReport()
    sh = shape_loss(mesh)
    T = data.n_frames
    for t in range(T):
        terms = {"shape": sh}
        if data.silhouettes and lw.silhouette > 0:
            sil = rasterize_silhouette(recon[t], mesh.faces, data.cameras[t])
            terms["silhouette"] = silhouette_loss(sil, data.silhouettes[t])
        if t < T - 1:
            if data.flows and lw.flow > 0:
                fl = flow_from_correspondence(recon[t], recon[t + 1], data.cameras[t], data.cameras[t + 1], mesh.faces)
                terms["flow"] = flow_loss(fl, data.flows[t])
            terms["dr"] = dr_loss(recon[t], recon[t + 1], mesh.edges, R)
        terms["total"] = sum(getattr(lw, k) * v for k, v in terms.items())
        report.add(t, **terms)
    return report


def _m_stats(mesh: TriMesh, data: FrameData, st: _EState, cfg: RefineConfig, rng) -> MStepStats:
    skel = st.skel
    n_flow = len(data.flows)
    if n_flow < 1:
        raise ValueError("the M-step needs flow rasters")
    H = cfg.sample_count(n_flow)
    if H < 2:
        raise ValueError("the M-step needs at least 2 flow frames")
    frames = np.sort(rng.choice(n_flow, size=H, replace=False))
    far = far_support(mesh.vertices, st.W, skel, cfg.far_fraction)
    far_rest = np.full((skel.n_bones, 3), np.nan)
    for b, idx in enumerate(far):
        if len(idx):
            far_rest[b] = mesh.vertices[idx].mean(axis=0)
    rest_joints = np.array([j.position for j in skel.joints]).reshape(-1, 3)
    flows, observed, joints_f, far_f = [], [], [], []
    supported = np.ones(len(skel.joints), dtype=bool)
    for f in frames:
        Y = data.targets[f]
        cam = data.cameras[f]
        vis = visibility(st.recon[f], mesh.faces, cam)
        surf = sample_surface_flow(data.flows[f], project(cam, Y), vis)
        bf = bone_flow(surf, st.W)
        flows.append(bf.flow)
        observed.append(bf.observed)
        pose = st.poses[f]
        fallback = np.array(
            [pose.world_transform(j.bone_a).apply(p) for j, p in zip(skel.joints, rest_joints)]
        ).reshape(-1, 3)
        P, ok = joint_support(Y, st.W, skel, cfg.t_r)
        P[~ok] = fallback[~ok]
        supported &= ok
        joints_f.append(P)
        fp = np.full((skel.n_bones, 3), np.nan)
        for b, idx in enumerate(far):
            if len(idx):
                fp[b] = Y[idx].mean(axis=0)
        far_f.append(fp)
    lengths, ok = bone_lengths(skel, np.stack(joints_f), np.stack(far_f))
    # lengths resting on an unsupported joint or an empty far node are not tracked
    for b, e in enumerate(bone_ends(skel)):
        if any(not supported[j] for j in e.joints) or (e.kind == "terminal" and len(far[b]) == 0):
            ok[b] = False
    return MStepStats.build(
        skel, frames, np.stack(flows), np.stack(observed), lengths, ok,
        percentile=cfg.robust_percentile, far_rest=far_rest,
    )


def _checkpoint(out: Path, name: str, st: _EState) -> None:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    save_skeleton(st.skel, d / "skeleton.json")
    save_weights(st.W, d / "weights.bin")
    st.report.write_csv(d / "losses.csv")


def sios2(
    mesh: TriMesh,
    data: FrameData,
    cfg: RefineConfig | None = None,
    *,
    initial: Skeleton | None = None,
    out_dir=None,
) -> SiosResult:
    """Alternate pose/weight fitting (E) with merge/split refinement (M).

    Stops after ``cfg.quiet_iters`` consecutive iterations without a merge or
    split, or after ``cfg.max_outer_iters``. With ``out_dir`` each iteration
    is checkpointed to ``iter_k/``; on failure the last state goes to
    ``partial/`` before the error propagates.
    """
    cfg = cfg or RefineConfig()
    if data.targets.shape[1:] != mesh.vertices.shape:
        raise ValueError("targets must match the mesh vertex count")
    out = Path(out_dir) if out_dir is not None else None
    skel0 = initial if initial is not None else initial_skeleton(mesh, cfg.contraction)
    skel = skel0
    history: list[IterationLog] = []
    prev_W = None
    st = None
    quiet = 0
    try:
        for it in range(cfg.max_outer_iters):
            st = _e_step(mesh, data, skel, cfg, prev_W)
            if out is not None:
                _checkpoint(out, f"iter_{it}", st)
            rng = np.random.default_rng([cfg.seed, it])
            stats = _m_stats(mesh, data, st, cfg, rng)
            res = refine_skeleton(st.skel, stats, cfg, st.W, mesh.vertices)
            history.append(
                IterationLog(
                    it, st.skel.n_bones, res.merges, res.splits, stats.frames.tolist(), st.report.totals(), st.pruned
                )
            )
            log.info("iteration %d: %d bones, %d merges, %d splits", it, st.skel.n_bones, len(res.merges), len(res.splits))
            skel = res.skeleton
            prev_W = res.weights
            quiet = 0 if (res.changed or st.pruned) else quiet + 1
            if quiet >= cfg.quiet_iters:
                break
        st = _e_step(mesh, data, skel, cfg, prev_W)
    except Exception:
        if out is not None and st is not None:
            _checkpoint(out, "partial", st)
        raise
    if out is not None:
        _checkpoint(out, "final", st)
        (out / "history.json").write_text(json.dumps([h.to_json() for h in history], indent=1))
    return SiosResult(st.skel, st.W, st.poses, st.report, history, skel0)
