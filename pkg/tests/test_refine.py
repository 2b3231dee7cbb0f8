import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skelkit.refine import (
    FrameData,
    MStepStats,
    RefineConfig,
    bone_lengths,
    far_support,
    joint_support,
    localize_joints,
    merge_bones,
    motion_bias,
    pair_similarities,
    prune_dead_bones,
    refine_skeleton,
    sios2,
)
from skelkit.skeleton import Joint, Skeleton, bone_from_segment
from skelkit.skinning import compute_skinning_weights
from skelkit.synth import SynthSpec, generate, preset


def chain(n, step=1.0):
    bones = [bone_from_segment([k * step, 0, 0], [(k + 1) * step, 0, 0]) for k in range(n)]
    joints = [Joint(k, k + 1, [(k + 1) * step, 0, 0]) for k in range(n - 1)]
    return Skeleton(bones, joints)


def stats_for(skel, flows, lengths=None, observed=None):
    flows = np.asarray(flows, float)
    F, B = flows.shape[:2]
    if lengths is None:
        lengths = np.tile([b.length for b in skel.bones], (F, 1))
    if observed is None:
        observed = np.ones((F, B), bool)
    return MStepStats.build(skel, np.arange(F), flows, observed, lengths, np.ones(B, bool))


def soft_weights(n_vertices, n_bones, seed=0):
    return np.random.default_rng(seed).dirichlet(np.ones(n_bones), size=n_vertices)


def test_config_validation():
    for bad in (dict(t_r=0.0), dict(t_r=1.0), dict(t_o=-1.0), dict(t_d=0.0), dict(H=1), dict(motion_sigma=0.0)):
        with pytest.raises(ValueError):
            RefineConfig(**bad)
    assert RefineConfig().sample_count(30) == 8
    assert RefineConfig().sample_count(5) == 5
    assert RefineConfig(H=3).sample_count(30) == 3


def test_joint_at_centroid():
    X = np.array([[1, 1, 0], [1, -1, 0], [-1, 1, 0], [-1, -1, 0]], float)
    W = np.full((4, 2), 0.5)
    skel = localize_joints(X, W, chain(2), 0.4)
    assert skel.joints[0].position.tolist() == [0, 0, 0]


def test_threshold_selects_support():
    X = np.array([[3, 1, 2], [7, 7, 7]], float)
    W = np.array([[0.45, 0.45, 0.1], [0.9, 0.05, 0.05]])
    skel = Skeleton([bone_from_segment([0, 0, 0], [1, 0, 0])] * 3, [Joint(0, 1, [9, 9, 9])])
    assert localize_joints(X, W, skel, 0.4).joints[0].position.tolist() == [3, 1, 2]


def test_unsupported_joint_kept():
    X = np.zeros((3, 3))
    W = np.tile([0.9, 0.1], (3, 1))
    skel = chain(2)
    P, ok = joint_support(X, W, skel, 0.4)
    assert ok.tolist() == [False]
    assert localize_joints(X, W, skel, 0.4).joints[0].position.tolist() == [1, 0, 0]
    fb = localize_joints(X, W, skel, 0.4, fallback=[[5, 5, 5]])
    assert fb.joints[0].position.tolist() == [5, 5, 5]


def test_length_three_four_five():
    skel = Skeleton([bone_from_segment([0, 0, 0], [1, 0, 0])] * 3, [Joint(0, 1, [0, 0, 0]), Joint(1, 2, [0, 3, 4])])
    L, ok = bone_lengths(skel, np.array([[0, 0, 0], [0, 3, 4]], float))
    assert L[0, 1] == 5.0 and ok.tolist() == [True, True, True]


def test_static_lengths_identical():
    skel = chain(3)
    J = np.tile([j.position for j in skel.joints], (4, 1, 1))
    L, _ = bone_lengths(skel, J)
    assert np.all(L == L[0])


def test_free_bone_flagged():
    skel = Skeleton([bone_from_segment([0, 0, 0], [2, 0, 0])])
    L, ok = bone_lengths(skel, np.zeros((2, 0, 3)))
    assert ok.tolist() == [False] and L[:, 0].tolist() == [2.0, 2.0]


def test_hinge_rigid_lengths(hinge2):
    mesh, gt = hinge2
    skel = gt.skeleton
    W = compute_skinning_weights(mesh, skel)
    far = far_support(mesh.vertices, W, skel)
    rest_joint = skel.joints[0].position
    J = np.array([[p.world_transform(0).apply(rest_joint)] for p in gt.poses])
    fp = np.stack([np.stack([Y[f].mean(0) for f in far]) for Y in gt.positions])
    L, ok = bone_lengths(skel, J, fp)
    assert ok.all()
    assert np.all(L.max(0) - L.min(0) < 1e-3 * L.mean(0))


def test_identical_flows_merge():
    skel = chain(2)
    flows = np.tile([[1.0, 0.5], [2.0, 1.0]], (4, 1, 1))
    res = refine_skeleton(skel, stats_for(skel, flows), RefineConfig(t_o=0.9), soft_weights(10, 2))
    assert res.merges == [(0, 1)] and res.skeleton.n_bones == 1
    assert res.skeleton.joints == []
    assert np.allclose(res.weights.sum(axis=1), 1.0)


def test_orthogonal_frame_blocks_merge():
    skel = chain(2)
    flows = np.tile([[1.0, 0.0], [1.0, 0.0]], (4, 1, 1))
    flows[2, 1] = [0.0, 1.0]
    st = stats_for(skel, flows)
    assert st.pair_similarity[(0, 1)] == 0.0
    res = refine_skeleton(skel, st, RefineConfig(t_o=0.9), soft_weights(10, 2))
    assert res.merges == [] and res.skeleton.n_bones == 2


def test_unobserved_and_zero_flow_frames():
    skel = chain(2)
    flows = np.tile([[1.0, 0.0], [1.0, 0.0]], (3, 1, 1))
    obs = np.ones((3, 2), bool)
    obs[1, 0] = False
    assert pair_similarities(skel, flows, obs)[(0, 1)] is None
    flows[1] = 0.0
    assert pair_similarities(skel, flows, np.ones((3, 2), bool))[(0, 1)] == 1.0
    assert pair_similarities(skel, np.zeros((3, 2, 2)), np.ones((3, 2), bool))[(0, 1)] is None


def test_split_on_length_fluctuation():
    skel = chain(3)
    lengths = np.array([[1.0, 1.0, 1.0], [1.0, 1.7, 1.0], [1.0, 1.2, 1.0]])
    st = stats_for(skel, np.zeros((3, 3, 2)), lengths=lengths)
    res = refine_skeleton(skel, st, RefineConfig(t_d=0.5), soft_weights(20, 3), None)
    assert res.splits == [1]
    assert res.skeleton.n_bones == 4 and len(res.skeleton.joints) == 3
    assert np.allclose(res.skeleton.joints[-1].position, [1.5, 0, 0])
    assert np.allclose(res.weights.sum(axis=1), 1.0)
    none = refine_skeleton(skel, st, RefineConfig(t_d=1.0), soft_weights(20, 3), None)
    assert none.splits == []


def test_split_divides_weight_by_side():
    skel = chain(2)
    X = np.array([[0.2, 0, 0], [0.8, 0, 0], [1.2, 0, 0], [1.8, 0, 0]])
    W = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    lengths = np.array([[1.0, 1.0], [1.9, 1.0]])
    res = refine_skeleton(skel, stats_for(skel, np.zeros((2, 2, 2)), lengths=lengths), RefineConfig(), W, X)
    assert res.splits == [0]
    # the half touching the existing joint keeps the index, the outer tip is new
    assert res.weights.tolist() == [[0, 0, 1], [1, 0, 0], [0, 1, 0], [0, 1, 0]]
    assert [(j.pair, j.position[0]) for j in res.skeleton.joints] == [((0, 1), 1.0), ((0, 2), 0.5)]


@settings(max_examples=25)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1), st.floats(-0.5, 0.99))
def test_counts_and_determinism(n, seed, t_o):
    rng = np.random.default_rng(seed)
    skel = chain(n)
    flows = rng.normal(size=(4, n, 2))
    # copy some neighbours so merges happen
    for b in range(1, n):
        if rng.random() < 0.5:
            flows[:, b] = flows[:, b - 1] * rng.uniform(0.5, 2)
    lengths = 1.0 + rng.uniform(0, 1.2, size=(4, n))
    st_ = stats_for(skel, flows, lengths=lengths)
    W = soft_weights(30, n, seed)
    cfg = RefineConfig(t_o=t_o, t_d=0.5)
    res = refine_skeleton(skel, st_, cfg, W)
    again = refine_skeleton(skel, st_, cfg, W)
    assert res.skeleton == again.skeleton and np.array_equal(res.weights, again.weights)
    assert res.skeleton.n_bones == n - len(res.merges) + len(res.splits)
    assert len(res.skeleton.joints) == n - 1 - len(res.merges) + len(res.splits)
    assert np.allclose(res.weights.sum(axis=1), 1.0)
    no_merge = refine_skeleton(skel, st_, RefineConfig(t_o=1.0, t_d=math.inf), W)
    assert no_merge.merges == [] and no_merge.splits == []


def test_merged_precision_is_spd():
    skel = chain(2)
    b = merge_bones(skel, 0, 1, soft_weights(10, 2))
    assert np.allclose(b.Q, b.Q.T)
    assert np.linalg.eigvalsh(b.Q).min() > 0
    assert b.length == pytest.approx(2.0)


def test_prune_reconnects_neighbours():
    skel = chain(3)
    W = np.zeros((20, 3))
    W[:10, 0] = 1
    W[10:, 2] = 1
    pruned, dead = prune_dead_bones(skel, W, min_mass=1e-3)
    assert dead == [1]
    assert pruned.n_bones == 2 and [j.pair for j in pruned.joints] == [(0, 1)]
    W[:2, :] = [0, 1, 0]
    assert prune_dead_bones(skel, W, 1e-3)[1] == [1]
    W[:3, :] = [0, 1, 0]
    assert prune_dead_bones(skel, W, 1e-3)[1] == []


def test_motion_bias_prefers_matching_bone(hinge2):
    mesh, gt = hinge2
    phi = motion_bias(mesh.vertices, gt.positions, gt.poses, 0.01)
    assert np.all(phi <= 0)
    far = mesh.vertices[:, 0] > 1.5
    assert np.all(np.argmax(phi[far], axis=1) == 1)
    assert np.all(phi[np.arange(len(phi)), gt.labels] == 0)


def test_frame_data_validation(hinge2):
    mesh, gt = hinge2
    with pytest.raises(ValueError):
        FrameData(gt.positions[:1], gt.cameras[:1])
    with pytest.raises(ValueError):
        FrameData(gt.positions, gt.cameras[:-1])
    with pytest.raises(ValueError):
        FrameData(gt.positions, gt.cameras, flows=gt.flows[:-1])


def test_sios2_rule_isolation(hinge2):
    mesh, gt = hinge2
    data = FrameData(gt.positions, gt.cameras, gt.silhouettes, gt.flows)
    start = chain(4, step=0.5)
    res = sios2(mesh, data, RefineConfig(t_o=1.5, t_d=math.inf, motion_sigma=None, max_outer_iters=3), initial=start)
    assert all(not h.merges and not h.splits for h in res.history)
    assert res.weights.is_valid()
    assert len(res.poses) == gt.n_frames


def test_sios2_checkpoints(tmp_path, hinge2):
    mesh, gt = hinge2
    data = FrameData(gt.positions, gt.cameras, gt.silhouettes, gt.flows)
    res = sios2(mesh, data, RefineConfig(max_outer_iters=2), initial=gt.skeleton, out_dir=tmp_path)
    assert (tmp_path / "final" / "skeleton.json").exists()
    assert (tmp_path / "iter_0" / "losses.csv").exists()
    assert (tmp_path / "history.json").exists()
    assert res.skeleton.n_bones == 2
