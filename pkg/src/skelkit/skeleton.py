"""Bones as Gaussian ellipsoids plus joints connecting bone pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .contraction import SkeletonGraph
from .geometry import TriMesh

RADIAL_FLOOR = 0.05


class SchemaError(ValueError):
    pass


def orthonormal_frame(axis: np.ndarray) -> np.ndarray:
    """Rotation whose first row is ``axis`` (normalised); rows 2 and 3 complete it."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    a = np.array([1.0, 0.0, 0.0]) if n == 0 else a / n
    helper = np.eye(3)[int(np.argmin(np.abs(a)))]
    b = np.cross(a, helper)
    b /= np.linalg.norm(b)
    c = np.cross(a, b)
    return np.stack([a, b, c])


@dataclass(frozen=True, eq=False)
class Bone:
    """Gaussian bone. ``Q`` is the precision matrix V^T diag(lam) V.

    ``axis`` is the unit direction of the bone segment. It is kept apart from
    ``Q`` because a short, thick bone has its smallest precision across the
    segment rather than along it.
    """

    center: np.ndarray
    Q: np.ndarray
    length: float
    axis: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "length", float(self.length))
        if self.axis is None:
            w, U = np.linalg.eigh(self.Q)
            axis = U[:, 0]
        else:
            axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        object.__setattr__(self, "axis", axis)

    @classmethod
    def from_axes(cls, center, V, lam, length) -> "Bone":
        V = np.asarray(V, dtype=np.float64)
        Q = V.T @ np.diag(np.asarray(lam, dtype=np.float64)) @ V
        return cls(center, 0.5 * (Q + Q.T), length, V[0])

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """(V, lam) by eigendecomposition, rows of V sorted by ascending precision."""
        w, U = np.linalg.eigh(self.Q)
        V = U.T
        if np.linalg.det(V) < 0:
            V[2] *= -1
        return V, w

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.axis * (0.5 * self.length)
        return self.center - d, self.center + d

    def pack(self) -> np.ndarray:
        return np.concatenate([self.center, self.Q.ravel(), [self.length]])

    @classmethod
    def unpack(cls, row) -> "Bone":
        row = np.asarray(row, dtype=np.float64)
        return cls(row[:3], row[3:12], row[12])

    def __eq__(self, other):
        if not isinstance(other, Bone):
            return NotImplemented
        return bool(np.array_equal(self.pack(), other.pack())) and bool(
            np.array_equal(self.axis, other.axis)
        )


@dataclass(frozen=True, eq=False)
class Joint:
    bone_a: int
    bone_b: int
    position: np.ndarray

    def __post_init__(self):
        if self.bone_a == self.bone_b:
            raise ValueError("joint must connect two distinct bones")
        object.__setattr__(self, "bone_a", int(self.bone_a))
        object.__setattr__(self, "bone_b", int(self.bone_b))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.bone_a, self.bone_b), max(self.bone_a, self.bone_b))

    def pack(self) -> np.ndarray:
        return np.concatenate([[self.bone_a, self.bone_b], self.position])

    def __eq__(self, other):
        if not isinstance(other, Joint):
            return NotImplemented
        return (self.bone_a, self.bone_b) == (other.bone_a, other.bone_b) and bool(
            np.array_equal(self.position, other.position)
        )


@dataclass(eq=False)
class Skeleton:
    bones: list[Bone]
    joints: list[Joint] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for j in self.joints:
            if not (0 <= j.bone_a < len(self.bones) and 0 <= j.bone_b < len(self.bones)):
                raise ValueError(f"joint references missing bone {j.pair}")
            if j.pair in seen:
                raise ValueError(f"duplicate joint for bones {j.pair}")
            seen.add(j.pair)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    def centers(self) -> np.ndarray:
        return np.array([b.center for b in self.bones]).reshape(-1, 3)

    def precisions(self) -> np.ndarray:
        return np.array([b.Q for b in self.bones]).reshape(-1, 3, 3)

    def joints_of(self, bone: int) -> list[int]:
        return [k for k, j in enumerate(self.joints) if bone in (j.bone_a, j.bone_b)]

    def adjacency(self) -> dict[int, set]:
        adj: dict[int, set] = {b: set() for b in range(self.n_bones)}
        for j in self.joints:
            adj[j.bone_a].add(j.bone_b)
            adj[j.bone_b].add(j.bone_a)
        return adj

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return self.bones == other.bones and self.joints == other.joints


def bone_from_segment(a, b, radial_points=None) -> Bone:
    """Ellipsoid for the segment a-b: semi-axis length/2 along it, RMS radial
    spread of ``radial_points`` across it (floored at 5% of the length)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b - a
    length = float(np.linalg.norm(d))
    V = orthonormal_frame(d)
    floor = RADIAL_FLOOR * length
    rms = 0.0
    if radial_points is not None and len(radial_points):
        x = np.asarray(radial_points, dtype=np.float64) - a
        perp = x - np.outer(x @ V[0], V[0])
        rms = float(np.sqrt(np.mean(np.sum(perp**2, axis=1))))
    radius = max(rms, floor)
    half = 0.5 * length
    # zero-length edges: fall back to a sphere so Q stays finite
    if half <= 0.0:
        half = radius if radius > 0.0 else 1e-9
    if radius <= 0.0:
        radius = half
    lam = [1.0 / half**2, 1.0 / radius**2, 1.0 / radius**2]
    return Bone.from_axes(0.5 * (a + b), V, lam, length)


def skeleton_from_graph(graph: SkeletonGraph, mesh: TriMesh) -> Skeleton:
    if len(graph.edges) == 0:
        raise ValueError("empty skeleton graph")
    bones = []
    for e, (i, j) in enumerate(graph.edges.tolist()):
        absorbed = graph.edge_absorbed[e] if e < len(graph.edge_absorbed) else []
        pts = mesh.vertices[absorbed] if len(absorbed) else None
        bones.append(bone_from_segment(graph.nodes[i], graph.nodes[j], pts))
    incident: dict[int, list[int]] = {}
    for e, (i, j) in enumerate(graph.edges.tolist()):
        incident.setdefault(i, []).append(e)
        incident.setdefault(j, []).append(e)
    joints = []
    for node in sorted(incident):
        for a, b in combinations(incident[node], 2):
            joints.append(Joint(a, b, graph.nodes[node]))
    return Skeleton(bones, joints)


def skeleton_to_json(s: Skeleton) -> dict:
    return {
        "bones": [
            {
                "center": b.center.tolist(),
                "Q": b.Q.ravel().tolist(),
                "length": b.length,
                "axis": b.axis.tolist(),
            }
            for b in s.bones
        ],
        "joints": [{"bones": [j.bone_a, j.bone_b], "pos": j.position.tolist()} for j in s.joints],
    }


def skeleton_from_json(doc) -> Skeleton:
    try:
        bones = []
        for b in doc["bones"]:
            c, q = b["center"], b["Q"]
            if len(c) != 3 or len(q) != 9:
                raise SchemaError("bone center needs 3 floats and Q needs 9")
            axis = b.get("axis")
            if axis is not None and len(axis) != 3:
                raise SchemaError("bone axis needs 3 floats")
            bones.append(Bone(c, q, float(b["length"]), axis))
        joints = []
        for j in doc["joints"]:
            a, bb = j["bones"]
            if len(j["pos"]) != 3:
                raise SchemaError("joint pos needs 3 floats")
            joints.append(Joint(int(a), int(bb), j["pos"]))
        return Skeleton(bones, joints)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid skeleton document: {exc}") from exc


def serialize_skeleton(s: Skeleton) -> str:
    return json.dumps(skeleton_to_json(s), indent=1)


def deserialize_skeleton(text: str) -> Skeleton:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed skeleton JSON: {exc}") from exc
    return skeleton_from_json(doc)


def save_skeleton(s: Skeleton, path) -> None:
    Path(path).write_text(serialize_skeleton(s))


def load_skeleton(path) -> Skeleton:
    return deserialize_skeleton(Path(path).read_text())
