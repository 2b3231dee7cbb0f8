"""Laplacian mesh contraction and connectivity surgery.

Contraction repeatedly solves

    min  ||W_C L X'||^2 + sum_i W_A,i^2 ||X'_i - X_i||^2

with the curvature-flow Laplacian of the current positions, scaling the
contraction weight by ``s_l`` and the attraction weights by the square root
of the one-ring area shrinkage after every step. Connectivity never changes.

Surgery then collapses edges of the (near zero-volume) contracted mesh until
no triangles are left, ordering collapses by a quadric shape cost plus a
sampling cost that penalises long edges.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .geometry import TriMesh, face_areas, signed_volume, vertex_areas, cotan_laplacian

log = logging.getLogger(__name__)


class ContractionError(RuntimeError):
    pass


@dataclass
class ContractionConfig:
    s_l: float = 2.0
    vol_eps: float = 1e-3
    max_iters: int = 10
    wa0: float = 1.0
    # "unit" -> W_C^0 = 1.0; "area" -> 1e-3 * sqrt(mean face area); or a number
    wc0: float | str = "unit"
    # collapses joining nodes farther apart than this fraction of the bbox diagonal are refused
    surgery_guard: float = 0.25
    shape_weight: float = 1.0
    sampling_weight: float = 0.1

    def initial_wc(self, mesh: TriMesh) -> float:
        if isinstance(self.wc0, str):
            if self.wc0 == "unit":
                return 1.0
            if self.wc0 == "area":
                a = face_areas(mesh.vertices, mesh.faces).mean() if mesh.n_faces else 0.0
                return 1e-3 * float(np.sqrt(a))
            raise ValueError(f"unknown wc0 rule {self.wc0!r}")
        return float(self.wc0)


@dataclass
class ContractionState:
    positions: np.ndarray
    wc: float
    wa: np.ndarray
    wa0: np.ndarray
    areas0: np.ndarray
    s_l: float = 2.0
    iteration: int = 0

    @classmethod
    def initial(cls, mesh: TriMesh, config: ContractionConfig | None = None) -> "ContractionState":
        config = config or ContractionConfig()
        wa0 = np.full(mesh.n_vertices, float(config.wa0))
        if np.any(wa0 <= 0):
            raise ValueError("attraction weights must be positive")
        wc = config.initial_wc(mesh)
        if wc <= 0:
            raise ValueError("contraction weight must be positive")
        return cls(
            positions=mesh.vertices.copy(),
            wc=wc,
            wa=wa0.copy(),
            wa0=wa0,
            areas0=vertex_areas(mesh),
            s_l=config.s_l,
        )


def _degenerate_tol(mesh: TriMesh) -> float:
    d = mesh.bbox_diagonal()
    return 1e-14 * d * d


def contraction_system(mesh: TriMesh, state: ContractionState):
    """Normal equations ``A X' = b`` of the stacked least-squares problem."""
    L = cotan_laplacian(
        mesh, state.positions, check_degenerate=False, degenerate_tol=_degenerate_tol(mesh)
    )
    wa2 = state.wa**2
    A = (state.wc**2) * (L.T @ L) + sparse.diags(wa2)
    b = wa2[:, None] * state.positions
    return A.tocsc(), b


def _condition_estimate(A) -> float:
    if A.shape[0] <= 2000:
        return float(np.linalg.cond(A.toarray()))
    return float("inf")


def contract_step(mesh: TriMesh, state: ContractionState) -> ContractionState:
    A, b = contraction_system(mesh, state)
    try:
        lu = splu(A, permc_spec="MMD_AT_PLUS_A")
        x = lu.solve(b)
    except RuntimeError as exc:
        raise ContractionError(
            f"singular contraction system (condition ~ {_condition_estimate(A):.3g})"
        ) from exc
    if not np.all(np.isfinite(x)):
        raise ContractionError(
            f"non-finite positions after step {state.iteration} "
            f"(condition ~ {_condition_estimate(A):.3g})"
        )
    areas = vertex_areas(mesh, x)
    floor = 1e-12 * np.maximum(state.areas0, np.finfo(float).tiny)
    wa = state.wa0 * np.sqrt(state.areas0 / np.maximum(areas, floor))
    # vertices with no incident area keep their attraction weight
    wa = np.where(state.areas0 > 0, wa, state.wa)
    return replace(
        state,
        positions=x,
        wc=state.wc * state.s_l,
        wa=wa,
        iteration=state.iteration + 1,
    )


@dataclass
class ContractionResult:
    mesh: TriMesh
    volumes: list[float]
    iterations: int
    converged: bool


def contract(mesh: TriMesh, config: ContractionConfig | None = None) -> ContractionResult:
    config = config or ContractionConfig()
    state = ContractionState.initial(mesh, config)
    v0 = abs(signed_volume(mesh))
    volumes = [v0]
    # already zero-volume (flat or collinear input): nothing to contract
    scale = mesh.bbox_diagonal() ** 3
    if v0 <= 1e-12 * max(scale, 1e-300):
        return ContractionResult(mesh, volumes, 0, True)
    converged = False
    while state.iteration < config.max_iters:
        state = contract_step(mesh, state)
        vol = abs(signed_volume(mesh, state.positions))
        volumes.append(vol)
        log.debug("contraction iter %d volume ratio %.3e", state.iteration, vol / v0)
        if vol < config.vol_eps * v0:
            converged = True
            break
    return ContractionResult(mesh.with_vertices(state.positions), volumes, state.iteration, converged)


# --------------------------------------------------------------------------- surgery


@dataclass
class SkeletonGraph:
    nodes: np.ndarray
    edges: np.ndarray
    node_absorbed: list[np.ndarray]
    edge_absorbed: list[np.ndarray] = field(default_factory=list)

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "edges": self.edges.tolist(),
            "absorbed": [a.tolist() for a in self.edge_absorbed],
            "node_absorbed": [a.tolist() for a in self.node_absorbed],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SkeletonGraph":
        try:
            nodes = np.asarray(doc["nodes"], dtype=np.float64).reshape(-1, 3)
            edges = np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2)
            edge_abs = [np.asarray(a, dtype=np.int64) for a in doc.get("absorbed", [])]
            node_abs = [np.asarray(a, dtype=np.int64) for a in doc.get("node_absorbed", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"invalid skeleton graph document: {exc}") from exc
        if len(edges) and (edges.min() < 0 or edges.max() >= len(nodes)):
            raise ValueError("graph edge index out of range")
        if not node_abs:
            node_abs = [np.zeros(0, dtype=np.int64) for _ in range(len(nodes))]
        return cls(nodes, edges, node_abs, edge_abs)


def _plane_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return np.zeros((4, 4))
    n = n / norm
    plane = np.append(n, -n @ p0)
    return np.outer(plane, plane)


def quadric_cost(Q: np.ndarray, p: np.ndarray) -> float:
    h = np.append(p, 1.0)
    return float(h @ Q @ h)


def _optimal_point(Q: np.ndarray, pi: np.ndarray, pj: np.ndarray) -> np.ndarray:
    mid = 0.5 * (pi + pj)
    A = Q[:3, :3]
    if abs(np.linalg.det(A)) < 1e-12:
        return mid
    p = np.linalg.solve(A, -Q[:3, 3])
    # a nearly singular quadric can place the optimum far away along its null direction
    if np.linalg.norm(p - mid) > np.linalg.norm(pi - pj):
        return mid
    return p


class _Surgery:
    def __init__(self, contracted: TriMesh, cfg: ContractionConfig):
        self.cfg = cfg
        self.pos = {i: p for i, p in enumerate(contracted.vertices.copy())}
        self.absorbed = {i: [i] for i in range(contracted.n_vertices)}
        self.Q = {i: np.zeros((4, 4)) for i in range(contracted.n_vertices)}
        self.faces: set[tuple[int, int, int]] = set()
        self.vfaces: dict[int, set] = {i: set() for i in range(contracted.n_vertices)}
        self.nbrs: dict[int, set] = {i: set() for i in range(contracted.n_vertices)}
        v = contracted.vertices
        for f in contracted.faces.tolist():
            key = tuple(sorted(f))
            self.faces.add(key)
            Kp = _plane_quadric(v[f[0]], v[f[1]], v[f[2]])
            for i in f:
                self.vfaces[i].add(key)
                self.Q[i] = self.Q[i] + Kp
        for i, j in contracted.edges.tolist():
            self.nbrs[i].add(j)
            self.nbrs[j].add(i)
        self.guard = cfg.surgery_guard * contracted.bbox_diagonal()
        self.version: dict[tuple[int, int], int] = {}
        self.heap: list = []

    def edge_in_face(self, i, j) -> bool:
        return any(j in f for f in self.vfaces[i])

    def shape_cost(self, i, j):
        Q = self.Q[i] + self.Q[j]
        p = _optimal_point(Q, self.pos[i], self.pos[j])
        return quadric_cost(Q, p), p

    def sampling_cost(self, i, j, p):
        """Travel of each endpoint times the summed length of its adjacent edges."""
        cost = 0.0
        for a in (i, j):
            pa = self.pos[a]
            adj = sum(float(np.linalg.norm(pa - self.pos[k])) for k in self.nbrs[a])
            cost += float(np.linalg.norm(pa - p)) * adj
        return cost

    def cost(self, i, j):
        shape, p = self.shape_cost(i, j)
        samp = self.sampling_cost(i, j, p)
        return self.cfg.shape_weight * shape + self.cfg.sampling_weight * samp, p

    def push(self, i, j):
        e = (min(i, j), max(i, j))
        ver = self.version.get(e, 0) + 1
        self.version[e] = ver
        if not self.edge_in_face(*e):
            return
        if np.linalg.norm(self.pos[e[0]] - self.pos[e[1]]) > self.guard:
            return
        c, _ = self.cost(*e)
        heapq.heappush(self.heap, (c, e, ver))

    def collapse(self, a, b, p):
        """Merge node b into node a at position p."""
        self.pos[a] = p
        self.Q[a] = self.Q[a] + self.Q[b]
        self.absorbed[a].extend(self.absorbed.pop(b))
        for f in list(self.vfaces[b]):
            self.faces.discard(f)
            for k in f:
                if k != b:
                    self.vfaces[k].discard(f)
            if a in f:
                continue
            nf = tuple(sorted(a if k == b else k for k in f))
            if nf in self.faces:
                continue
            self.faces.add(nf)
            for k in nf:
                self.vfaces[k].add(nf)
        del self.vfaces[b]
        for k in self.nbrs.pop(b):
            self.nbrs[k].discard(b)
            if k != a:
                self.nbrs[k].add(a)
                self.nbrs[a].add(k)
        self.nbrs[a].discard(b)
        del self.pos[b]
        del self.Q[b]

    def run(self):
        for i in sorted(self.nbrs):
            for j in sorted(self.nbrs[i]):
                if i < j:
                    self.push(i, j)
        n_collapses = 0
        while self.faces:
            if not self.heap:
                if self.guard == np.inf:
                    break
                # the graph must end face-free, so lift the guard once nothing else is left
                self.guard = np.inf
                for i in sorted(self.nbrs):
                    for j in sorted(self.nbrs[i]):
                        if i < j:
                            self.push(i, j)
                continue
            c, e, ver = heapq.heappop(self.heap)
            if self.version.get(e) != ver:
                continue
            i, j = e
            if i not in self.pos or j not in self.pos or j not in self.nbrs[i]:
                continue
            _, p = self.cost(i, j)
            self.collapse(i, j, p)
            n_collapses += 1
            touched = {i} | self.nbrs[i]
            for k in sorted(touched):
                for m in sorted(self.nbrs[k]):
                    self.push(k, m)
        return n_collapses


def _point_segment_distance(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    dd = float(d @ d)
    t = np.zeros(len(x)) if dd == 0.0 else np.clip((x - a) @ d / dd, 0.0, 1.0)
    proj = a + t[:, None] * d
    return np.linalg.norm(x - proj, axis=1)


def connectivity_surgery(
    contracted: TriMesh,
    config: ContractionConfig | None = None,
    original: TriMesh | None = None,
) -> SkeletonGraph:
    """Collapse the contracted mesh into a 1D graph.

    ``original`` (same vertex order) is used to distribute each node's absorbed
    vertices over its incident edges; defaults to the contracted positions.
    """
    cfg = config or ContractionConfig()
    s = _Surgery(contracted, cfg)
    n_collapses = s.run()
    log.debug("surgery: %d collapses, %d faces left", n_collapses, len(s.faces))
    alive = sorted(s.pos)
    remap = {old: new for new, old in enumerate(alive)}
    nodes = np.array([s.pos[i] for i in alive]).reshape(-1, 3)
    edges = sorted({(remap[i], remap[j]) for i in alive for j in s.nbrs[i] if i < j})
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    node_abs = [np.array(sorted(s.absorbed[i]), dtype=np.int64) for i in alive]

    ref = (original if original is not None else contracted).vertices
    incident: dict[int, list[int]] = {k: [] for k in range(len(nodes))}
    for e, (i, j) in enumerate(edges.tolist()):
        incident[i].append(e)
        incident[j].append(e)
    edge_abs: list[list[int]] = [[] for _ in range(len(edges))]
    for k, verts in enumerate(node_abs):
        inc = incident[k]
        if not inc or len(verts) == 0:
            continue
        x = ref[verts]
        dist = np.stack(
            [_point_segment_distance(x, nodes[edges[e, 0]], nodes[edges[e, 1]]) for e in inc]
        )
        choice = np.argmin(dist, axis=0)
        for v, c in zip(verts.tolist(), choice.tolist()):
            edge_abs[inc[c]].append(v)
    edge_abs_arr = [np.array(sorted(a), dtype=np.int64) for a in edge_abs]
    return SkeletonGraph(nodes, edges, node_abs, edge_abs_arr)
