"""Skinning weights from bone Mahalanobis distances, edge rigidity and part selection."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .geometry import TriMesh
from .skeleton import Skeleton

WEIGHTS_MAGIC = b"SKW1"


@dataclass(frozen=True)
class SkinningWeights:
    W: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("weights must be an N x B matrix")
        object.__setattr__(self, "W", W)

    @property
    def n_vertices(self) -> int:
        return self.W.shape[0]

    @property
    def n_bones(self) -> int:
        return self.W.shape[1]

    def is_valid(self, tol: float = 1e-6) -> bool:
        W = self.W
        return bool(
            np.all(np.abs(W.sum(axis=1) - 1.0) <= tol) and W.min() >= 0.0 and W.max() <= 1.0
        )


@dataclass(frozen=True)
class RigidityCoeffs:
    R: np.ndarray
    lam: float = 0.1


@dataclass(frozen=True)
class PartAssignment:
    onehot: np.ndarray
    labels: np.ndarray
    counts: np.ndarray


def mahalanobis(points: np.ndarray, skel: Skeleton) -> np.ndarray:
    """N x B matrix of (x - C_b)^T Q_b (x - C_b)."""
    C = skel.centers()
    Q = skel.precisions()
    diff = points[:, None, :] - C[None, :, :]
    return np.einsum("nbi,bij,nbj->nb", diff, Q, diff)


def compute_skinning_weights(
    mesh: TriMesh | np.ndarray,
    skel: Skeleton,
    bias: np.ndarray | None = None,
    temperature: float = 1.0,
) -> SkinningWeights:
    """W[n, b] = softmax_b(-d(X_n, C_b, Q_b) / temperature + bias[n, b])."""
    if skel.n_bones == 0:
        raise ValueError("skeleton has no bones")
    X = mesh.vertices if isinstance(mesh, TriMesh) else np.asarray(mesh, dtype=np.float64)
    logits = -mahalanobis(X, skel) / temperature
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        logits = logits + bias
    return SkinningWeights(softmax(logits, axis=1), bias)


def entropy_bits(W: np.ndarray) -> np.ndarray:
    """Row entropy -sum W log2 W, with 0 log 0 = 0."""
    W = np.asarray(W, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(W > 0, W * np.log2(np.where(W > 0, W, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=1), 0.0)


def rigidity_coefficients(W: SkinningWeights | np.ndarray, edges: np.ndarray, lam: float = 0.1) -> RigidityCoeffs:
    """R_ij = 1 / ((H_i + lam)(H_j + lam)) over mesh edges, H the row entropy in bits."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    Wm = W.W if isinstance(W, SkinningWeights) else W
    H = entropy_bits(Wm)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    R = (1.0 / (H[edges[:, 0]] + lam)) * (1.0 / (H[edges[:, 1]] + lam))
    return RigidityCoeffs(R, lam)


def one_hot_parts(W: SkinningWeights | np.ndarray) -> PartAssignment:
    Wm = W.W if isinstance(W, SkinningWeights) else np.asarray(W)
    n, b = Wm.shape
    # np.argmax returns the first maximum, i.e. the lowest bone index on ties
    labels = np.argmax(Wm, axis=1)
    onehot = np.zeros((n, b), dtype=np.int8)
    onehot[np.arange(n), labels] = 1
    counts = np.bincount(labels, minlength=b)
    return PartAssignment(onehot, labels, counts)


def select_small_parts(parts: PartAssignment, fraction: float = 0.5) -> set[int]:
    """Bones whose part holds fewer than ``fraction`` x median part size vertices."""
    counts = parts.counts
    if len(counts) == 0:
        return set()
    med = float(np.median(counts))
    return {int(b) for b in np.nonzero(counts < fraction * med)[0]}


# --------------------------------------------------------------------------- I/O


def weights_to_bytes(W: SkinningWeights) -> bytes:
    n, b = W.W.shape
    header = WEIGHTS_MAGIC + struct.pack("<II", n, b)
    return header + np.ascontiguousarray(W.W, dtype="<f4").tobytes()


def weights_from_bytes(data: bytes) -> SkinningWeights:
    if len(data) < 12 or data[:4] != WEIGHTS_MAGIC:
        raise ValueError("not a skinning weights file")
    n, b = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * n * b:
        raise ValueError(f"weights payload has {len(body)} bytes, expected {4 * n * b}")
    W = np.frombuffer(body, dtype="<f4").reshape(n, b).astype(np.float64)
    return SkinningWeights(W)


def save_weights(W: SkinningWeights, path) -> None:
    Path(path).write_bytes(weights_to_bytes(W))


def load_weights(path) -> SkinningWeights:
    return weights_from_bytes(Path(path).read_bytes())


def weights_to_json(W: SkinningWeights) -> str:
    return json.dumps({"n": W.n_vertices, "b": W.n_bones, "W": W.W.tolist()})


def weights_from_json(text: str) -> SkinningWeights:
    doc = json.loads(text)
    W = np.asarray(doc["W"], dtype=np.float64).reshape(doc["n"], doc["b"])
    return SkinningWeights(W)
