import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from skelkit.contraction import SkeletonGraph
from skelkit.geometry import TriMesh
from skelkit.skeleton import (
    Bone,
    Joint,
    SchemaError,
    Skeleton,
    bone_from_segment,
    deserialize_skeleton,
    serialize_skeleton,
    skeleton_from_graph,
)
from scipy.spatial.transform import Rotation

points = arrays(np.float64, 3, elements=st.floats(-10, 10))


def _ring(x, r, n=8):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([np.full(n, x), r * np.cos(a), r * np.sin(a)], 1)


def _graph(nodes, edges, absorbed):
    nodes = np.asarray(nodes, float)
    return SkeletonGraph(nodes, np.asarray(edges).reshape(-1, 2), [np.zeros(0, int)] * len(nodes), absorbed)


def random_skeleton(rng, n_bones):
    bones = []
    for _ in range(n_bones):
        V = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
        bones.append(Bone.from_axes(rng.normal(size=3), V, rng.uniform(0.5, 20, 3), rng.uniform(0.1, 3)))
    joints = [Joint(k, k + 1, rng.normal(size=3)) for k in range(n_bones - 1)]
    return Skeleton(bones, joints)


def test_single_edge_bone():
    pts = np.vstack([_ring(x, 0.5) for x in (0.5, 1.0, 1.5)])
    mesh = TriMesh(pts, np.zeros((0, 3), int))
    skel = skeleton_from_graph(_graph([[0, 0, 0], [2, 0, 0]], [[0, 1]], [np.arange(len(pts))]), mesh)
    (b,) = skel.bones
    assert np.allclose(b.center, [1, 0, 0])
    assert b.length == 2.0
    V, lam = b.axes()
    along = np.argmax(np.abs(V[:, 0]))
    assert lam[along] == pytest.approx(1.0)
    assert sorted(np.delete(lam, along)) == pytest.approx([4.0, 4.0])
    assert skel.joints == []


def test_chain_and_star():
    mesh = TriMesh(np.zeros((1, 3)), np.zeros((0, 3), int))
    chain = skeleton_from_graph(_graph([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1], [1, 2]], []), mesh)
    assert chain.n_bones == 2 and len(chain.joints) == 1
    assert np.array_equal(chain.joints[0].position, [1, 0, 0])
    star = skeleton_from_graph(
        _graph([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1], [0, 2], [0, 3]], []), mesh
    )
    assert star.n_bones == 3
    assert sorted(j.pair for j in star.joints) == [(0, 1), (0, 2), (1, 2)]
    assert all(np.array_equal(j.position, [0, 0, 0]) for j in star.joints)


def test_radial_floor():
    b = bone_from_segment([0, 0, 0], [4, 0, 0])
    V, lam = b.axes()
    assert lam.max() == pytest.approx(1 / (0.05 * 4) ** 2)


def test_joint_rules():
    with pytest.raises(ValueError):
        Joint(1, 1, [0, 0, 0])
    b = bone_from_segment([0, 0, 0], [1, 0, 0])
    with pytest.raises(ValueError, match="duplicate"):
        Skeleton([b, b], [Joint(0, 1, [0, 0, 0]), Joint(1, 0, [1, 0, 0])])
    with pytest.raises(ValueError, match="missing"):
        Skeleton([b], [Joint(0, 1, [0, 0, 0])])
    assert Joint(2, 5, [1, 2, 3]).pack().tolist() == [2, 5, 1, 2, 3]


@given(points, points, st.integers(0, 2**31 - 1))
def test_bone_invariants(a, b, seed):
    rng = np.random.default_rng(seed)
    radial = a + rng.normal(size=(10, 3))
    bone = bone_from_segment(a, b, radial)
    V, lam = bone.axes()
    assert np.abs(V.T @ V - np.eye(3)).max() < 1e-6
    assert np.all(lam > 0)
    assert bone.length >= 0
    assert bone.pack().shape == (13,)
    assert np.allclose(bone.Q, bone.Q.T)
    assert np.abs(V.T @ np.diag(lam) @ V - bone.Q).max() < 1e-8 * max(1.0, np.abs(bone.Q).max())


@given(st.integers(0, 2**31 - 1))
def test_unpack_recovers_precision(seed):
    skel = random_skeleton(np.random.default_rng(seed), 1)
    b = skel.bones[0]
    u = Bone.unpack(b.pack())
    assert np.array_equal(u.Q, b.Q) and np.array_equal(u.center, b.center) and u.length == b.length
    V, lam = u.axes()
    assert np.abs(V.T @ np.diag(lam) @ V - b.Q).max() < 1e-8


@pytest.mark.parametrize("n", [1, 19])
def test_round_trip(n):
    skel = random_skeleton(np.random.default_rng(n), n)
    back = deserialize_skeleton(serialize_skeleton(skel))
    assert back == skel
    assert len(back.joints) == n - 1


def test_truncated_document():
    text = serialize_skeleton(random_skeleton(np.random.default_rng(0), 3))
    with pytest.raises(SchemaError):
        deserialize_skeleton(text[: len(text) // 2])
    with pytest.raises(SchemaError):
        deserialize_skeleton('{"bones": [{"center": [0, 0], "Q": [1, 0, 0, 0, 1, 0, 0, 0, 1], "length": 1}], "joints": []}')
    with pytest.raises(SchemaError):
        deserialize_skeleton('{"bones": []}')
