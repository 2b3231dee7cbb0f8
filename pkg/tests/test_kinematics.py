import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skelkit.geometry import TriMesh
from skelkit.kinematics import (
    DegeneratePartError,
    GradientConfig,
    PoseFrame,
    SingularBlendError,
    backward_blend_skin,
    blend_skin,
    blended_matrices,
    fit_pose_procrustes,
    load_poses,
    numeric_gradient,
    pose_objective,
    refine_pose_gradient,
    save_poses,
    weighted_procrustes,
)
from skelkit.skeleton import Skeleton, bone_from_segment
from skelkit.skinning import compute_skinning_weights
from skelkit.synth import forward_kinematics, generate, preset
from skelkit.transforms import RigidTransform, rotation_distance

seeds = st.integers(0, 2**31 - 1)


def random_transform(rng, angle=np.pi, scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform.from_rotvec(axis * rng.uniform(0, angle), rng.normal(size=3) * scale)


def random_pose(rng, n_bones, angle=np.pi):
    return PoseFrame(random_transform(rng, angle), [random_transform(rng, angle) for _ in range(n_bones)])


def test_transform_group_laws():
    rng = np.random.default_rng(0)
    a, b, c = (random_transform(rng) for _ in range(3))
    p = rng.normal(size=(5, 3))
    assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    assert np.allclose(((a @ b) @ c).apply(p), (a @ (b @ c)).apply(p), atol=1e-12)
    assert np.allclose((a @ a.inverse()).apply(p), p, atol=1e-12)
    assert abs(np.linalg.norm(a.q) - 1) < 1e-9
    assert RigidTransform.from_json(a.to_json()) == a
    assert rotation_distance(a, a) == 0.0


def test_identity_pose_is_exact():
    X = np.random.default_rng(1).normal(size=(20, 3))
    W = np.random.default_rng(2).dirichlet(np.ones(3), size=20)
    assert np.array_equal(blend_skin(X, W, PoseFrame.identity(3)), X)
    assert np.array_equal(backward_blend_skin(X, W, PoseFrame.identity(3)), X)


def test_one_hot_translation():
    X = np.array([[0.3, -1.0, 2.0]])
    pose = PoseFrame(RigidTransform.identity(), [RigidTransform.identity(), RigidTransform.translation([1, 0, 0])])
    assert np.array_equal(blend_skin(X, [[0.0, 1.0]], pose), X + [1, 0, 0])


def test_half_half_blend():
    X = np.array([[0.3, -1.0, 2.0]])
    pose = PoseFrame(
        RigidTransform.identity(),
        [RigidTransform.translation([1, 0, 0]), RigidTransform.translation([0, 1, 0])],
    )
    assert np.allclose(blend_skin(X, [[0.5, 0.5]], pose) - X, [[0.5, 0.5, 0.0]], atol=1e-15)


@given(seeds)
def test_round_trips(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    W = rng.dirichlet(np.ones(3), size=30)
    pose = random_pose(rng, 3, angle=0.8)
    Y = blend_skin(X, W, pose)
    assert np.abs(backward_blend_skin(Y, W, pose) - X).max() < 1e-9
    assert np.abs(blend_skin(backward_blend_skin(X, W, pose), W, pose) - X).max() < 1e-9


@given(seeds)
def test_one_hot_matches_part_motion(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 3))
    labels = rng.integers(0, 3, 12)
    W = np.eye(3)[labels]
    pose = random_pose(rng, 3)
    Y = blend_skin(X, W, pose)
    for n in range(12):
        assert np.allclose(Y[n], pose.world_transform(labels[n]).apply(X[n]), atol=1e-12)
    inv = backward_blend_skin(Y, W, pose)
    analytic = np.array([pose.per_bone[l].inverse().apply(pose.root.inverse().apply(y)) for l, y in zip(labels, Y)])
    assert np.array_equal(inv, analytic)


@given(seeds)
def test_identity_bones_blend_to_identity(seed):
    W = np.random.default_rng(seed).dirichlet(np.ones(4), size=10)
    M = blended_matrices(W, PoseFrame.identity(4))
    assert np.allclose(M, np.eye(4), atol=1e-15)


def test_singular_blend_raises():
    pose = PoseFrame(
        RigidTransform.identity(),
        [RigidTransform.identity(), RigidTransform.from_rotvec([0, 0, np.pi])],
    )
    with pytest.raises(SingularBlendError):
        backward_blend_skin(np.zeros((1, 3)), [[0.5, 0.5]], pose)


def test_blend_inverse_is_approximate():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 3))
    W = rng.dirichlet(np.ones(2), size=30)
    pose = random_pose(rng, 2, angle=0.6)
    Y = blend_skin(X, W, pose)
    err = np.abs(backward_blend_skin(Y, W, pose, mode="blend_inverse") - X).max()
    assert 1e-6 < err < 5.0
    with pytest.raises(ValueError):
        backward_blend_skin(Y, W, pose, mode="nope")


def _parts_cloud(rng, n_bones=3, per=15):
    X = np.concatenate([rng.normal(size=(per, 3)) + [3.0 * b, 0, 0] for b in range(n_bones)])
    W = np.repeat(np.eye(n_bones), per, axis=0)
    return X, W


def _assert_same_world(found, truth, tol):
    for b in range(truth.n_bones):
        f, t = found.world_transform(b), truth.world_transform(b)
        assert rotation_distance(f, t) <= tol
        assert np.abs(f.t - t.t).max() <= tol


@given(seeds)
def test_procrustes_self_consistency(seed):
    rng = np.random.default_rng(seed)
    X, W = _parts_cloud(rng)
    pose = random_pose(rng, 3)
    found = fit_pose_procrustes(X, W, blend_skin(X, W, pose))
    _assert_same_world(found, pose, 1e-6)


def test_rest_targets_give_identity():
    X, W = _parts_cloud(np.random.default_rng(0))
    found = fit_pose_procrustes(X, W, X)
    for T in [found.root] + found.per_bone:
        assert T.angle() <= 1e-9 and np.abs(T.t).max() <= 1e-9


def test_noisy_targets_residual():
    # expected per-bone RMS is about 0.01 * sqrt(3) = 0.0173
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X, W = _parts_cloud(rng, per=200)
        pose = random_pose(rng, 3)
        Y = blend_skin(X, W, pose) + rng.normal(0, 0.01, X.shape)
        found = fit_pose_procrustes(X, W, Y)
        R = blend_skin(X, W, found) - Y
        for b in range(3):
            worst = max(worst, float(np.sqrt(np.mean(np.sum(R[W[:, b] > 0] ** 2, axis=1)))))
    assert worst <= 0.02


@given(seeds)
def test_procrustes_beats_identity(seed):
    rng = np.random.default_rng(seed)
    X, W = _parts_cloud(rng)
    Y = blend_skin(X, W, random_pose(rng, 3)) + rng.normal(0, 0.1, X.shape)
    found = fit_pose_procrustes(X, W, Y)
    assert pose_objective(X, W, found, Y) <= pose_objective(X, W, PoseFrame.identity(3), Y) + 1e-9


def test_weighted_procrustes_weights_matter():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(10, 3))
    T = random_transform(rng)
    dst = T.apply(src)
    dst[0] += 5.0
    w = np.ones(10)
    w[0] = 0.0
    R, t, _ = weighted_procrustes(src, dst, w)
    assert np.allclose(R, T.R, atol=1e-9) and np.allclose(t, T.t, atol=1e-9)


def test_degenerate_part():
    X = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    W = np.array([[1, 0], [1, 0], [1, 0], [0, 1], [0, 1]], float)
    with pytest.raises(DegeneratePartError):
        fit_pose_procrustes(X, W, X)
    pose = fit_pose_procrustes(X, W, X, on_degenerate="identity")
    assert pose.per_bone[1] == RigidTransform.identity()


@pytest.fixture(scope="module")
def hinge_soft():
    spec = preset("hinge2", n_frames=10)
    mesh, gt = generate(spec, render=False)
    W = compute_skinning_weights(mesh, gt.skeleton)
    truth = forward_kinematics(spec, 9)
    return mesh, W, truth, blend_skin(mesh, W, truth)


def test_gradient_keeps_optimum(hinge_soft):
    mesh, W, truth, Y = hinge_soft
    out = refine_pose_gradient(mesh, W, truth, Y, config=GradientConfig(iters=5))
    assert pose_objective(mesh, W, out, Y) <= pose_objective(mesh, W, truth, Y)
    assert np.abs(blend_skin(mesh, W, out) - Y).max() < 1e-9


def test_gradient_recovers_perturbed_hinge(hinge_soft):
    mesh, W, truth, Y = hinge_soft
    rng = np.random.default_rng(0)
    five = np.deg2rad(5.0)
    bad = PoseFrame(truth.root, [T.perturbed(np.r_[rng.normal(size=3) * 0 + [0, 0, five], 0, 0, 0]) for T in truth.per_bone])

    def rms(p):
        return float(np.sqrt(np.mean(np.sum((blend_skin(mesh, W, p) - Y) ** 2, axis=1))))

    out = refine_pose_gradient(mesh, W, bad, Y, config=GradientConfig(iters=200))
    assert rms(out) < 0.1 * rms(bad)


def test_numeric_gradient_richardson(hinge_soft):
    mesh, W, truth, Y = hinge_soft
    start = PoseFrame(truth.root, [T.perturbed([0.05, -0.02, 0.08, 0.01, 0.0, -0.02]) for T in truth.per_bone])

    def fn(p):
        return pose_objective(mesh, W, p, Y)

    g1 = numeric_gradient(fn, start, 1e-4)
    g2 = numeric_gradient(fn, start, 5e-5)
    assert np.linalg.norm(g1 - g2) <= 1e-4 * np.linalg.norm(g2)


def test_objective_with_dr_term(hinge_soft):
    from skelkit.losses import LossWeights
    from skelkit.skinning import rigidity_coefficients

    mesh, W, truth, Y = hinge_soft
    R = rigidity_coefficients(W, mesh.edges)
    plain = pose_objective(mesh, W, truth, Y)
    with_dr = pose_objective(mesh, W, truth, Y, LossWeights(dr=1.0), R=R)
    assert with_dr > plain


def test_pose_json_round_trip(tmp_path):
    poses = [random_pose(np.random.default_rng(s), 4) for s in range(3)]
    save_poses(poses, tmp_path / "p.json")
    back = load_poses(tmp_path / "p.json")
    assert [p.root for p in back] == [p.root for p in poses]
    assert all(a.per_bone == b.per_bone for a, b in zip(back, poses))
