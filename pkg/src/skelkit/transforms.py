"""Rigid transforms stored as unit quaternion (w, x, y, z) plus translation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


def _normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical hemisphere so equal rotations compare equal
    if q[0] < 0 or (q[0] == 0 and next((c for c in q[1:] if c != 0), 0) < 0):
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class RigidTransform:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, rot: Rotation, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot.as_quat(scalar_first=True), t)

    @classmethod
    def from_matrix(cls, R: np.ndarray, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rotation(Rotation.from_matrix(np.asarray(R, dtype=np.float64)), t)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rotation(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)), t)

    @classmethod
    def translation(cls, t) -> "RigidTransform":
        return cls(np.array([1.0, 0, 0, 0]), t)

    @classmethod
    def about_point(cls, rotvec, point) -> "RigidTransform":
        """Rotation by ``rotvec`` about the pivot ``point``."""
        R = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64))
        p = np.asarray(point, dtype=np.float64)
        return cls.from_rotation(R, p - R.apply(p))

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.q, scalar_first=True)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        R = self.R
        # fixed summation order, so a row gives the same bits alone or in a batch
        return p[..., 0:1] * R[:, 0] + p[..., 1:2] * R[:, 1] + p[..., 2:3] * R[:, 2] + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        rot = self.rotation * other.rotation
        return RigidTransform.from_rotation(rot, self.rotation.apply(other.t) + self.t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        inv = self.rotation.inv()
        return RigidTransform.from_rotation(inv, -inv.apply(self.t))

    def angle(self) -> float:
        return float(np.linalg.norm(self.rotation.as_rotvec()))

    def perturbed(self, delta) -> "RigidTransform":
        """exp(delta) composed on the left; delta = (rotvec, translation)."""
        d = np.asarray(delta, dtype=np.float64)
        step = RigidTransform.from_rotvec(d[:3], d[3:])
        return step.compose(self)

    def to_json(self) -> dict:
        return {"q": self.q.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_json(cls, doc) -> "RigidTransform":
        return cls(doc["q"], doc["t"])

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t))

    def __repr__(self):
        return f"RigidTransform(q={self.q.round(6).tolist()}, t={self.t.round(6).tolist()})"


def rotation_distance(a: RigidTransform, b: RigidTransform) -> float:
    """Angle (radians) of the relative rotation between a and b."""
    return float(np.linalg.norm((a.rotation.inv() * b.rotation).as_rotvec()))
