"""Triangle mesh container, OBJ I/O and differential-geometry helpers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

COT_CLAMP = 1e4


class MeshError(ValueError):
    """Raised for malformed mesh input or degenerate geometry."""


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    """Sorted, deduplicated undirected edge list (E x 2, i < j)."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if len(f):
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("face with repeated vertex")
            key = np.sort(f, axis=1)
            if len(np.unique(key, axis=0)) != len(f):
                raise MeshError("duplicate face")
        v.setflags(write=False)
        f.setflags(write=False)
        e = edges_from_faces(f)
        e.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "edges", e)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def neighbors(self) -> list[np.ndarray]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [np.array(sorted(n), dtype=np.int64) for n in nbrs]

    def connected_components(self) -> np.ndarray:
        """Component label per vertex (isolated vertices get their own label)."""
        n = self.n_vertices
        e = self.edges
        adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = sparse.csgraph.connected_components(adj, directed=False)
        return labels


def load_mesh(path) -> TriMesh:
    """Read a Wavefront OBJ triangle mesh. Only ``v`` and ``f`` records are used."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError
                elif tag == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"non-triangular face at line {lineno}")
                    # negative indices are relative to the current vertex count
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"parse failure at line {lineno}: {line.strip()!r}") from exc
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise MeshError("face index out of range")
    return TriMesh(v, f)


def save_mesh(mesh: TriMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices)
    f = np.asarray(faces)
    cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(cr, axis=1)


def vertex_areas(mesh: TriMesh, vertices: np.ndarray | None = None) -> np.ndarray:
    """One-ring area: sum of the areas of all faces incident to each vertex."""
    v = mesh.vertices if vertices is None else vertices
    a = face_areas(v, mesh.faces)
    out = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(out, mesh.faces[:, k], a)
    return out


def _cot_weights(v: np.ndarray, faces: np.ndarray, check: bool, degenerate_tol: float = 0.0):
    """Per-face cotangents of the angle opposite each of the three face edges.

    Faces with ``2 * area <= degenerate_tol`` get zero weight when not checking.
    """
    i0, i1, i2 = faces[:, 0], faces[:, 1], faces[:, 2]
    cots = []
    # angle at corner k is opposite edge (k+1, k+2)
    for a, b, c in ((i0, i1, i2), (i1, i2, i0), (i2, i0, i1)):
        u = v[b] - v[a]
        w = v[c] - v[a]
        dot = np.einsum("ij,ij->i", u, w)
        crs = np.linalg.norm(np.cross(u, w), axis=1)
        cots.append((dot, crs))
    crs = cots[0][1]
    if check:
        bad = np.nonzero(crs <= 0.0)[0]
        if len(bad):
            raise MeshError(f"degenerate triangle (zero area) at face {int(bad[0])}")
    keep = crs > degenerate_tol
    out = []
    for dot, cr in cots:
        with np.errstate(divide="ignore", invalid="ignore"):
            ct = np.where(cr > 0, dot / np.where(cr > 0, cr, 1.0), np.sign(dot) * COT_CLAMP)
        out.append(np.where(keep, np.clip(ct, -COT_CLAMP, COT_CLAMP), 0.0))
    return out


def cotan_laplacian(
    mesh: TriMesh,
    vertices: np.ndarray | None = None,
    *,
    check_degenerate: bool = True,
    degenerate_tol: float = 0.0,
):
    """Curvature-flow Laplacian with w_ij = cot(alpha_ij) + cot(beta_ij).

    Off-diagonals hold the weights, the diagonal holds minus the row sum, so
    ``L @ ones == 0``. Boundary edges get their single cotangent. With
    ``check_degenerate=False`` near-degenerate faces contribute clamped
    cotangents instead of raising, and faces whose doubled area is at most
    ``degenerate_tol`` contribute nothing (the contraction loop relies on this).
    """
    v = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    f = mesh.faces
    n = mesh.n_vertices
    if len(f) == 0:
        return sparse.csr_matrix((n, n))
    c0, c1, c2 = _cot_weights(v, f, check_degenerate, degenerate_tol)
    # corner 0 is opposite edge (1,2), corner 1 opposite (2,0), corner 2 opposite (0,1)
    I = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    J = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    w = np.concatenate([c0, c1, c2])
    off = sparse.coo_matrix((w, (I, J)), shape=(n, n))
    off = (off + off.T).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    L = off + sparse.diags(diag)
    return L.tocsr()


def signed_volume(mesh: TriMesh, vertices: np.ndarray | None = None) -> float:
    """Divergence-theorem volume, sign from the face winding.

    Tetrahedra are fanned from the vertex centroid, so for open meshes the
    result is a pseudo-volume relative to that point.
    """
    v = mesh.vertices if vertices is None else vertices
    f = mesh.faces
    if len(f) == 0:
        return 0.0
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    # center on the centroid to limit cancellation; exact for closed meshes
    o = v.mean(axis=0)
    a, b, c = a - o, b - o, c - o
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected to a sphere, outward winding."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius, np.array(faces))


def unit_cube() -> TriMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    # index = 4x + 2y + z
    quads = [
        (0, 1, 3, 2),  # x = 0
        (4, 6, 7, 5),  # x = 1
        (0, 4, 5, 1),  # y = 0
        (2, 3, 7, 6),  # y = 1
        (0, 2, 6, 4),  # z = 0
        (1, 5, 7, 3),  # z = 1
    ]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(f))
