"""Procedural articulated capsule objects with exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import TriMesh
from .kinematics import PoseFrame, blend_skin
from .rendering import (
    Camera,
    FlowRaster,
    SilhouetteRaster,
    flow_from_correspondence,
    rasterize_silhouette,
    visibility,
)
from .skeleton import Bone, Joint, Skeleton, bone_from_segment
from .transforms import RigidTransform


class SynthError(ValueError):
    pass


@dataclass
class SynthSpec:
    """Segment ``k > 0`` hangs off ``parents[k]`` at its own start point.

    ``angles[t, k-1]`` is the rotation (radians) of segment k about
    ``joint_axes[k-1]`` relative to its parent. Without ``starts``/``ends``
    the segments form a straight chain along +x starting at the origin.
    """

    lengths: list[float]
    radii: list[float]
    angles: np.ndarray | None = None
    n_frames: int = 1
    joint_axes: list | None = None
    parents: list[int] | None = None
    starts: np.ndarray | None = None
    ends: np.ndarray | None = None
    root_axis: tuple = (0.0, 0.0, 1.0)
    root_pivot: tuple = (0.0, 0.0, 0.0)
    root_angles: np.ndarray | None = None
    root_translation: np.ndarray | None = None
    camera: str = "static"
    orbit_degrees: float = 30.0
    image_size: tuple[int, int] = (96, 96)
    fill: float = 0.75
    ring_spacing: float = 0.1
    n_around: int = 12
    cap_rings: int = 4
    grid_step: float = 0.08
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        n = len(self.lengths)
        if n < 1:
            raise SynthError("need at least one segment")
        if len(self.radii) != n:
            raise SynthError("one radius per segment")
        self.lengths = [float(x) for x in self.lengths]
        self.radii = [float(x) for x in self.radii]
        if any(x <= 0 for x in self.lengths) or any(r <= 0 for r in self.radii):
            raise SynthError("segment lengths and radii must be positive")
        for k, (l, r) in enumerate(zip(self.lengths, self.radii)):
            if r > l:
                raise SynthError(f"segment {k}: radius {r} exceeds length {l} (self-intersecting capsule)")
        if self.parents is None:
            self.parents = [-1] + list(range(n - 1))
        if len(self.parents) != n or self.parents[0] != -1 or any(
            not (0 <= p < k) for k, p in enumerate(self.parents) if k > 0
        ):
            raise SynthError("parents must list -1 for segment 0 and an earlier segment otherwise")
        if self.joint_axes is None:
            self.joint_axes = [(0.0, 0.0, 1.0)] * (n - 1)
        if len(self.joint_axes) != n - 1:
            raise SynthError("one joint axis per non-root segment")
        if self.angles is None:
            self.angles = np.zeros((self.n_frames, n - 1))
        a = np.asarray(self.angles, dtype=np.float64)
        self.angles = a.reshape(len(a), n - 1) if n == 1 else a.reshape(-1, n - 1)
        self.n_frames = len(self.angles)
        if self.n_frames < 1:
            raise SynthError("need at least one frame")
        for name in ("angles", "root_angles", "root_translation"):
            val = getattr(self, name)
            if val is not None and not np.all(np.isfinite(val)):
                raise SynthError(f"{name} must be finite")
        if self.root_angles is not None and len(self.root_angles) != self.n_frames:
            raise SynthError("root_angles needs one entry per frame")
        if self.root_translation is not None and np.shape(self.root_translation) != (self.n_frames, 3):
            raise SynthError("root_translation must be frames x 3")
        if self.camera not in ("static", "orbit"):
            raise SynthError(f"unknown camera path {self.camera!r}")
        if (self.starts is None) != (self.ends is None):
            raise SynthError("starts and ends go together")

    @property
    def n_segments(self) -> int:
        return len(self.lengths)

    def segment_points(self) -> tuple[np.ndarray, np.ndarray]:
        if self.starts is not None:
            s = np.asarray(self.starts, dtype=np.float64).reshape(-1, 3)
            e = np.asarray(self.ends, dtype=np.float64).reshape(-1, 3)
            return s, e
        x = np.concatenate([[0.0], np.cumsum(self.lengths)])
        z = np.zeros(self.n_segments)
        return np.stack([x[:-1], z, z], 1), np.stack([x[1:], z, z], 1)

    @property
    def is_chain(self) -> bool:
        return self.starts is None and self.parents == [-1] + list(range(self.n_segments - 1))


@dataclass
class GroundTruth:
    skeleton: Skeleton
    labels: np.ndarray
    poses: list[PoseFrame]
    positions: np.ndarray
    silhouettes: list[SilhouetteRaster] = field(default_factory=list)
    flows: list[FlowRaster] = field(default_factory=list)
    visibility: np.ndarray | None = None
    cameras: list[Camera] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.positions)

    def onehot(self) -> np.ndarray:
        return np.eye(self.skeleton.n_bones)[self.labels]


# --------------------------------------------------------------------------- meshes


def _chain_mesh(spec: SynthSpec) -> tuple[TriMesh, np.ndarray]:
    L = float(sum(spec.lengths))
    bounds = np.concatenate([[0.0], np.cumsum(spec.lengths)])
    r0, r1 = spec.radii[0], spec.radii[-1]
    # ring stations: every joint boundary is a station
    xs = [0.0]
    for a, b in zip(bounds[:-1], bounds[1:]):
        m = max(1, int(np.ceil((b - a) / spec.ring_spacing - 1e-9)))
        xs.extend(a + (b - a) * np.arange(1, m + 1) / m)
    seg_of = np.searchsorted(bounds[1:-1], np.asarray(xs), side="left")
    rings = []
    c = spec.cap_rings
    for k in range(c, 0, -1):
        phi = k * (np.pi / 2) / (c + 1)
        rings.append((-r0 * np.sin(phi), r0 * np.cos(phi), 0))
    for x, s in zip(xs, seg_of):
        rings.append((x, spec.radii[s], int(s)))
    last = spec.n_segments - 1
    for k in range(1, c + 1):
        phi = k * (np.pi / 2) / (c + 1)
        rings.append((L + r1 * np.sin(phi), r1 * np.cos(phi), last))
    m = spec.n_around
    th = 2 * np.pi * np.arange(m) / m
    V = [(-r0, 0.0, 0.0)]
    lab = [0]
    for x, rr, s in rings:
        V.extend((x, rr * np.cos(t), rr * np.sin(t)) for t in th)
        lab.extend([s] * m)
    V.append((L + r1, 0.0, 0.0))
    lab.append(last)
    nr = len(rings)

    def idx(ring, a):
        return 1 + ring * m + (a % m)

    F = [(0, idx(0, a + 1), idx(0, a)) for a in range(m)]
    for ring in range(nr - 1):
        for a in range(m):
            F.append((idx(ring, a), idx(ring, a + 1), idx(ring + 1, a + 1)))
            F.append((idx(ring, a), idx(ring + 1, a + 1), idx(ring + 1, a)))
    top = len(V) - 1
    F.extend((top, idx(nr - 1, a), idx(nr - 1, a + 1)) for a in range(m))
    return TriMesh(np.asarray(V), np.asarray(F, dtype=np.int64)), np.asarray(lab, dtype=np.int64)


def _segment_distance(X: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    t = np.clip((X - a) @ d / max(float(d @ d), 1e-300), 0.0, 1.0)
    return np.linalg.norm(X - (a + t[:, None] * d), axis=1)


def _capsule_field(X: np.ndarray, spec: SynthSpec) -> np.ndarray:
    s, e = spec.segment_points()
    return np.stack(
        [_segment_distance(X, s[k], e[k]) - spec.radii[k] for k in range(spec.n_segments)], axis=1
    )


def _tree_mesh(spec: SynthSpec) -> tuple[TriMesh, np.ndarray]:
    from skimage.measure import marching_cubes

    s, e = spec.segment_points()
    rmax = max(spec.radii)
    lo = np.minimum(s.min(0), e.min(0)) - rmax - 2 * spec.grid_step
    hi = np.maximum(s.max(0), e.max(0)) + rmax + 2 * spec.grid_step
    axes = [np.arange(lo[i], hi[i] + spec.grid_step, spec.grid_step) for i in range(3)]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = _capsule_field(G, spec).min(axis=1).reshape(len(axes[0]), len(axes[1]), len(axes[2]))
    verts, faces, _, _ = marching_cubes(sdf, 0.0, spacing=(spec.grid_step,) * 3)
    verts = verts + lo
    mesh = TriMesh(verts.astype(np.float64), faces.astype(np.int64))
    labels = np.argmin(_capsule_field(mesh.vertices, spec), axis=1)
    return mesh, labels


def build_mesh(spec: SynthSpec) -> tuple[TriMesh, np.ndarray]:
    mesh, labels = _chain_mesh(spec) if spec.is_chain else _tree_mesh(spec)
    if spec.jitter > 0:
        rng = np.random.default_rng(spec.seed)
        mesh = mesh.with_vertices(mesh.vertices + rng.normal(0.0, spec.jitter, mesh.vertices.shape))
    return mesh, labels


# --------------------------------------------------------------------------- kinematics


def ground_truth_skeleton(spec: SynthSpec, mesh: TriMesh, labels: np.ndarray) -> Skeleton:
    s, e = spec.segment_points()
    bones: list[Bone] = [
        bone_from_segment(s[k], e[k], mesh.vertices[labels == k]) for k in range(spec.n_segments)
    ]
    joints = [Joint(spec.parents[k], k, s[k]) for k in range(1, spec.n_segments)]
    return Skeleton(bones, joints)


def forward_kinematics(spec: SynthSpec, frame: int) -> PoseFrame:
    s, _ = spec.segment_points()
    T = [RigidTransform.identity()]
    for k in range(1, spec.n_segments):
        axis = np.asarray(spec.joint_axes[k - 1], dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        local = RigidTransform.about_point(axis * spec.angles[frame, k - 1], s[k])
        T.append(T[spec.parents[k]].compose(local))
    root = RigidTransform.identity()
    if spec.root_angles is not None:
        axis = np.asarray(spec.root_axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        root = RigidTransform.about_point(axis * float(spec.root_angles[frame]), spec.root_pivot)
    if spec.root_translation is not None:
        root = RigidTransform.translation(spec.root_translation[frame]).compose(root)
    return PoseFrame(root, T)


def camera_path(spec: SynthSpec, positions: np.ndarray) -> list[Camera]:
    """Pinhole cameras at 3x the bounding-box diagonal of the whole motion."""
    P = positions.reshape(-1, 3)
    lo, hi = P.min(0), P.max(0)
    center = 0.5 * (lo + hi)
    diag = float(np.linalg.norm(hi - lo))
    dist = 3.0 * diag
    W, H = spec.image_size
    f = spec.fill * max(W, H) * dist / diag
    cams = []
    T = spec.n_frames
    for t in range(T):
        phi = 0.0
        if spec.camera == "orbit" and T > 1:
            phi = np.deg2rad(spec.orbit_degrees) * t / (T - 1)
        eye = center + dist * np.array([np.sin(phi), 0.0, np.cos(phi)])
        cams.append(Camera.look_at(eye, center, (0.0, 1.0, 0.0), f, W, H))
    return cams


def generate(spec: SynthSpec, *, render: bool = True) -> tuple[TriMesh, GroundTruth]:
    mesh, labels = build_mesh(spec)
    skel = ground_truth_skeleton(spec, mesh, labels)
    onehot = np.eye(spec.n_segments)[labels]
    poses = [forward_kinematics(spec, t) for t in range(spec.n_frames)]
    positions = np.stack([blend_skin(mesh, onehot, p) for p in poses])
    gt = GroundTruth(skel, labels, poses, positions)
    if render:
        gt.cameras = camera_path(spec, positions)
        for p, cam in zip(poses, gt.cameras):
            p.camera = cam
        gt.silhouettes = [rasterize_silhouette(X, mesh.faces, c) for X, c in zip(positions, gt.cameras)]
        gt.flows = [
            flow_from_correspondence(positions[t], positions[t + 1], gt.cameras[t], gt.cameras[t + 1], mesh.faces)
            for t in range(spec.n_frames - 1)
        ]
        gt.visibility = np.stack([visibility(X, mesh.faces, c) for X, c in zip(positions, gt.cameras)])
    return mesh, gt


# --------------------------------------------------------------------------- noise


@dataclass
class NoiseSpec:
    position_sigma: float = 0.0
    flow_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.position_sigma < 0 or self.flow_sigma < 0:
            raise ValueError("noise sigma must be non-negative")


def corrupt(gt: GroundTruth, noise: NoiseSpec) -> GroundTruth:
    """Copy of ``gt`` with seeded Gaussian noise on target positions and flows."""
    rng = np.random.default_rng(noise.seed)
    positions = gt.positions.copy()
    if noise.position_sigma > 0:
        positions = positions + rng.normal(0.0, noise.position_sigma, positions.shape)
    flows = gt.flows
    if noise.flow_sigma > 0:
        flows = []
        for fr in gt.flows:
            cov = fr.confidence > 0
            f = fr.flow.astype(np.float64)
            f[cov] += rng.normal(0.0, noise.flow_sigma, (int(cov.sum()), 2))
            flows.append(FlowRaster(f.astype(np.float32), fr.confidence.copy()))
    return replace(gt, positions=positions, flows=list(flows))


# --------------------------------------------------------------------------- presets


def _ramp(T: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, T)


def _phased(n_frames: int, n_hinges: int, block: int, peak: float) -> np.ndarray:
    """Hinge angles where one hinge moves at a time, in turns of ``block`` steps.

    Each hinge rises during its first half of turns and falls back during the
    second; the largest angle reached is ``peak``.
    """
    steps = n_frames - 1
    inc = np.zeros((steps, n_hinges))
    turns = -(-steps // block)
    per_hinge = -(-turns // n_hinges)
    for s in range(steps):
        turn = s // block
        inc[s, turn % n_hinges] = 1.0 if turn // n_hinges < per_hinge / 2 else -1.0
    A = np.vstack([np.zeros(n_hinges), np.cumsum(inc, axis=0)])
    top = np.abs(A).max()
    return A * (peak / top) if top > 0 else A


def preset(name: str, n_frames: int = 24, **overrides) -> SynthSpec:
    """Named test objects.

    ``arm3``: three segments; the hinges take turns in 3-frame blocks,
    bending in opposite senses up to 40 degrees, while the root drifts slowly
    along the arm. ``arm3_frozen``: same with the second hinge locked.
    ``tube``: three segments translating rigidly. ``hinge2``: two segments,
    hinge 0 -> 45 degrees. ``quadruped``: torso, neck and four two-segment legs.
    """
    T = n_frames
    t = _ramp(T)
    d = np.deg2rad
    if name in ("arm3", "arm3_frozen"):
        angles = _phased(T, 2, block=3, peak=d(40.0))
        angles[:, 1] *= -1.0
        if name == "arm3_frozen":
            angles[:, 1] = 0.0
        drift = np.zeros((T, 3))
        drift[:, 0] = 0.004 * np.arange(T)
        kw = dict(
            lengths=[1.0, 1.0, 1.0],
            radii=[0.2, 0.2, 0.2],
            angles=angles,
            root_translation=drift,
        )
    elif name == "tube":
        kw = dict(
            lengths=[1.0, 1.0, 1.0],
            radii=[0.2, 0.2, 0.2],
            angles=np.zeros((T, 2)),
            root_translation=np.stack([0.3 * t, 0.6 * t, np.zeros(T)], 1),
        )
    elif name == "hinge2":
        kw = dict(lengths=[1.0, 1.0], radii=[0.2, 0.2], angles=(d(45.0) * t)[:, None])
    elif name == "quadruped":
        s = np.array(
            [
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [1.8, 0.0, 0.25], [1.8, -0.6, 0.25],
                [1.8, 0.0, -0.25], [1.8, -0.6, -0.25],
                [0.2, 0.0, 0.25], [0.2, -0.6, 0.25],
                [0.2, 0.0, -0.25], [0.2, -0.6, -0.25],
            ]
        )
        down = np.array([0.0, -0.6, 0.0])
        e = s + np.vstack([[2.0, 0.0, 0.0], [0.4, 0.5, 0.0]] + [down] * 8)
        parents = [-1, 0, 0, 2, 0, 4, 0, 6, 0, 8]
        swing = d(25.0) * np.sin(2 * np.pi * t)
        angles = np.zeros((T, 9))
        angles[:, 0] = d(15.0) * t
        for leg, phase in zip(range(4), (1, -1, -1, 1)):
            angles[:, 1 + 2 * leg] = phase * swing
            angles[:, 2 + 2 * leg] = -np.abs(swing)
        kw = dict(
            lengths=list(np.linalg.norm(e - s, axis=1)),
            radii=[0.3, 0.12] + [0.1] * 8,
            parents=parents,
            starts=s,
            ends=e,
            angles=angles,
            root_translation=np.stack([0.8 * t, np.zeros(T), np.zeros(T)], 1),
        )
    else:
        raise SynthError(f"unknown preset {name!r}")
    kw.update(overrides)
    return SynthSpec(**kw)
