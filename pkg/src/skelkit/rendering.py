"""Pinhole camera, z-buffer rasterization, ray-cast visibility and flow rasters.

Pixel (row i, column j) has its center at image coordinates (u, v) = (j, i).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transforms import RigidTransform

FLOW_MAGIC = b"SKF1"
Z_NEAR = 1e-6


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return self.extrinsic.inverse().t

    def to_camera(self, points) -> np.ndarray:
        return self.extrinsic.apply(points)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsic": self.extrinsic.to_json(),
        }

    @classmethod
    def from_json(cls, doc) -> "Camera":
        return cls(
            float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
            int(doc["width"]), int(doc["height"]),
            RigidTransform.from_json(doc["extrinsic"]) if "extrinsic" in doc else RigidTransform.identity(),
        )

    @classmethod
    def look_at(cls, eye, target, up, fx, width, height, fy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image v grows along -up."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        ext = RigidTransform.from_matrix(R, -R @ eye)
        fy = fx if fy is None else fy
        return cls(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height, ext)


def _project_cam(camera: Camera, pc: np.ndarray) -> np.ndarray:
    z = pc[..., 2]
    u = camera.fx * pc[..., 0] / z + camera.cx
    v = camera.fy * pc[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def project(camera: Camera, point) -> np.ndarray:
    """Pinhole projection of world point(s) to pixel coordinates (u, v)."""
    pc = camera.to_camera(np.asarray(point, dtype=np.float64))
    if np.any(pc[..., 2] <= Z_NEAR):
        raise ProjectionError("point at or behind the camera")
    return _project_cam(camera, pc)


@dataclass
class SilhouetteRaster:
    mask: np.ndarray


@dataclass
class FlowRaster:
    flow: np.ndarray
    confidence: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "FlowRaster":
        h, w = shape
        return cls(np.zeros((h, w, 2), np.float32), np.zeros((h, w), np.float32))


@dataclass
class Fragments:
    """Per-pixel nearest surface sample: face id (-1 empty), depth, 3D barycentrics."""

    face: np.ndarray
    depth: np.ndarray
    bary: np.ndarray


def rasterize(positions, faces, camera: Camera) -> Fragments:
    """Z-buffer rasterization sampled at pixel centers.

    Coverage is inclusive on triangle edges, both windings are drawn, and on
    equal depth the lower face index wins. Triangles touching the near plane
    are skipped.
    """
    H, W = camera.shape
    face_buf = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    bary = np.zeros((H, W, 3))
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return Fragments(face_buf, depth, bary)
    pc = camera.to_camera(np.asarray(positions, dtype=np.float64))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = _project_cam(camera, pc)
    zf = z[faces]
    pa, pb, pc2 = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
    area = (pb[:, 0] - pa[:, 0]) * (pc2[:, 1] - pa[:, 1]) - (pb[:, 1] - pa[:, 1]) * (pc2[:, 0] - pa[:, 0])
    keep = (zf.min(axis=1) > Z_NEAR) & (area != 0.0) & np.isfinite(area)
    us = uv[faces][..., 0]
    vs = uv[faces][..., 1]
    with np.errstate(invalid="ignore"):
        j0 = np.maximum(np.ceil(us.min(axis=1)), 0)
        j1 = np.minimum(np.floor(us.max(axis=1)), W - 1)
        i0 = np.maximum(np.ceil(vs.min(axis=1)), 0)
        i1 = np.minimum(np.floor(vs.max(axis=1)), H - 1)
    keep &= (j0 <= j1) & (i0 <= i1)
    fid = np.nonzero(keep)[0]
    if len(fid) == 0:
        return Fragments(face_buf, depth, bary)
    j0, i0 = j0[fid].astype(np.int64), i0[fid].astype(np.int64)
    nw = j1[fid].astype(np.int64) - j0 + 1
    nh = i1[fid].astype(np.int64) - i0 + 1
    cnt = nw * nh
    # one candidate per (face, pixel in its bounding box)
    f = np.repeat(fid, cnt)
    k = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    rw = np.repeat(nw, cnt)
    jj = (np.repeat(j0, cnt) + k % rw).astype(np.float64)
    ii = (np.repeat(i0, cnt) + k // rw).astype(np.float64)
    A, B, C, ar = pa[f], pb[f], pc2[f], area[f]
    w0 = ((B[:, 0] - jj) * (C[:, 1] - ii) - (B[:, 1] - ii) * (C[:, 0] - jj)) / ar
    w1 = ((C[:, 0] - jj) * (A[:, 1] - ii) - (C[:, 1] - ii) * (A[:, 0] - jj)) / ar
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    f, ii, jj, w0, w1, w2 = f[inside], ii[inside], jj[inside], w0[inside], w1[inside], w2[inside]
    # perspective-correct: interpolate 1/z linearly in screen space
    q = np.stack([w0 / zf[f, 0], w1 / zf[f, 1], w2 / zf[f, 2]], axis=1)
    qs = q[:, 0] + q[:, 1] + q[:, 2]
    zpix = 1.0 / qs
    pix = ii.astype(np.int64) * W + jj.astype(np.int64)
    # nearest first, lower face index on equal depth
    order = np.lexsort((f, zpix, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    win = order[first]
    flat = pix[win]
    face_buf.reshape(-1)[flat] = f[win]
    depth.reshape(-1)[flat] = zpix[win]
    bary.reshape(-1, 3)[flat] = q[win] / qs[win][:, None]
    return Fragments(face_buf, depth, bary)


def rasterize_silhouette(positions, faces, camera: Camera) -> SilhouetteRaster:
    frag = rasterize(positions, faces, camera)
    return SilhouetteRaster((frag.face >= 0).astype(np.float64))


def render_vertex_colors(positions, faces, colors, camera: Camera, background=0.0) -> np.ndarray:
    """Colour image by interpolating per-vertex colours (synthetic RGB mode)."""
    frag = rasterize(positions, faces, camera)
    colors = np.asarray(colors, dtype=np.float64)
    H, W = camera.shape
    img = np.full((H, W, colors.shape[1]), float(background))
    cov = frag.face >= 0
    f = np.asarray(faces)[frag.face[cov]]
    img[cov] = np.einsum("pk,pkc->pc", frag.bary[cov], colors[f])
    return img


def _cross(a, b):
    # np.cross is slow on large broadcast stacks
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _ray_hits(origin, targets, tri, eps):
    """Moller-Trumbore for rays origin->target (one per row) against all triangles.

    Returns a boolean (n_targets, n_tris) matrix of hits strictly nearer than
    the target by more than ``eps`` (and farther than ``eps`` from the origin).
    """
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    d = targets - origin
    dist = np.linalg.norm(d, axis=1)
    dirs = d / np.where(dist > 0, dist, 1.0)[:, None]
    p = _cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("fk,nfk->nf", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin - v0
    u = np.einsum("fk,nfk->nf", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("nk,fk->nf", dirs, q) * inv
    t = np.einsum("fk,fk->f", e2, q)[None, :] * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps) & (t < dist[:, None] - eps)
    return hit


def visibility(positions, faces, camera: Camera, *, chunk: int = 256) -> np.ndarray:
    """1 where the segment camera->vertex crosses no nearer triangle, else 0.

    Triangles incident to the vertex are ignored; the tolerance is 1e-6 of
    the bounding-box diagonal.
    """
    X = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    n = len(X)
    vis = np.ones(n, dtype=np.int8)
    if n == 0 or len(faces) == 0:
        return vis
    eps = 1e-6 * float(np.linalg.norm(X.max(0) - X.min(0)))
    origin = camera.center()
    tri = X[faces]
    for s in range(0, n, chunk):
        idx = np.arange(s, min(s + chunk, n))
        hit = _ray_hits(origin, X[idx], tri, eps)
        own = (faces[None, :, :] == idx[:, None, None]).any(axis=2)
        hit &= ~own
        vis[idx] = np.where(hit.any(axis=1), 0, 1)
    return vis


def flow_from_correspondence(pos_t, pos_t1, camera_t: Camera, camera_t1: Camera, faces) -> FlowRaster:
    """Flow of the surface point seen at each pixel between frames t and t+1."""
    frag = rasterize(pos_t, faces, camera_t)
    H, W = camera_t.shape
    out = FlowRaster.zeros((H, W))
    cov = frag.face >= 0
    if not cov.any():
        return out
    faces = np.asarray(faces, dtype=np.int64)
    f = faces[frag.face[cov]]
    lam = frag.bary[cov]
    x0 = np.einsum("pk,pkc->pc", lam, np.asarray(pos_t, dtype=np.float64)[f])
    x1 = np.einsum("pk,pkc->pc", lam, np.asarray(pos_t1, dtype=np.float64)[f])
    c0 = camera_t.to_camera(x0)
    c1 = camera_t1.to_camera(x1)
    valid = c1[:, 2] > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        fl = _project_cam(camera_t1, c1) - _project_cam(camera_t, c0)
    fl[~valid] = 0.0
    flow = out.flow
    conf = out.confidence
    flow[cov] = fl.astype(np.float32)
    conf[cov] = valid.astype(np.float32)
    return out


# --------------------------------------------------------------------------- file formats


def flow_to_bytes(fr: FlowRaster) -> bytes:
    """Header: magic + height + width (little-endian u16); then H x W x 3
    float32 records (u, v, confidence), row-major."""
    H, W = fr.confidence.shape
    if H > 0xFFFF or W > 0xFFFF:
        raise ValueError("raster too large for the flow header")
    body = np.concatenate([fr.flow, fr.confidence[..., None]], axis=-1).astype("<f4")
    return FLOW_MAGIC + struct.pack("<HH", H, W) + body.tobytes()


def flow_from_bytes(data: bytes) -> FlowRaster:
    if len(data) < 8 or data[:4] != FLOW_MAGIC:
        raise ValueError("not a flow raster file")
    H, W = struct.unpack("<HH", data[4:8])
    body = np.frombuffer(data[8:], dtype="<f4")
    if body.size != H * W * 3:
        raise ValueError("truncated flow raster")
    arr = body.reshape(H, W, 3)
    return FlowRaster(arr[..., :2].astype(np.float32), arr[..., 2].astype(np.float32))


def save_flow(fr: FlowRaster, path) -> None:
    Path(path).write_bytes(flow_to_bytes(fr))


def load_flow(path) -> FlowRaster:
    return flow_from_bytes(Path(path).read_bytes())


def save_pgm(mask, path) -> None:
    m = np.clip(np.asarray(getattr(mask, "mask", mask), dtype=np.float64), 0.0, 1.0)
    img = np.round(m * 255).astype(np.uint8)
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def load_pgm(path) -> SilhouetteRaster:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    img = np.frombuffer(data[pos + 1 : pos + 1 + W * H], dtype=np.uint8).reshape(H, W)
    return SilhouetteRaster(img.astype(np.float64) / maxval)


def save_camera(camera: Camera, path) -> None:
    Path(path).write_text(json.dumps(camera.to_json(), indent=1))


def load_camera(path) -> Camera:
    return Camera.from_json(json.loads(Path(path).read_text()))
