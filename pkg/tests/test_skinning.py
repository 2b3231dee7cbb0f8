import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from skelkit.skeleton import Bone, Skeleton, bone_from_segment
from skelkit.skinning import (
    PartAssignment,
    SkinningWeights,
    compute_skinning_weights,
    entropy_bits,
    mahalanobis,
    one_hot_parts,
    rigidity_coefficients,
    select_small_parts,
    weights_from_bytes,
    weights_from_json,
    weights_to_bytes,
    weights_to_json,
)

from oracles import entropy_bits as entropy_oracle

logits = arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=st.floats(-30, 30))


def _sphere_bone(center):
    return Bone(center, np.eye(3), 1.0, [1, 0, 0])


def test_single_bone_weights_are_one():
    skel = Skeleton([bone_from_segment([0, 0, 0], [1, 0, 0])])
    W = compute_skinning_weights(np.random.default_rng(0).normal(size=(30, 3)), skel)
    assert np.array_equal(W.W, np.ones((30, 1)))


def test_equidistant_identical_bones():
    skel = Skeleton([_sphere_bone([-1, 0, 0]), _sphere_bone([1, 0, 0])])
    W = compute_skinning_weights(np.array([[0.0, 0.3, -0.2]]), skel)
    assert W.W[0].tolist() == [0.5, 0.5]


def test_ten_units_apart():
    skel = Skeleton([_sphere_bone([0, 0, 0]), _sphere_bone([math.sqrt(10), 0, 0])])
    X = np.zeros((1, 3))
    assert mahalanobis(X, skel)[0].tolist() == pytest.approx([0.0, 10.0])
    W = compute_skinning_weights(X, skel, temperature=1.0)
    assert W.W[0, 0] == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-12)
    assert W.W[0, 0] == pytest.approx(0.99995, abs=1e-5)


def test_bias_shifts_logits():
    skel = Skeleton([_sphere_bone([-1, 0, 0]), _sphere_bone([1, 0, 0])])
    W = compute_skinning_weights(np.zeros((1, 3)), skel, bias=np.array([[math.log(3), 0.0]]))
    assert W.W[0].tolist() == pytest.approx([0.75, 0.25])


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([1, 0], [0, 1], 100.0),
        ([0.5, 0.5], [0.5, 0.5], 1 / 1.21),
        ([1, 0], [0.5, 0.5], 1 / 0.11),
    ],
)
def test_rigidity_examples(a, b, expected):
    R = rigidity_coefficients(np.array([a, b], float), [[0, 1]], lam=0.1).R
    assert R[0] == pytest.approx(expected, rel=1e-12)


def test_rigidity_rounded_values():
    R = rigidity_coefficients(np.array([[0.5, 0.5], [1, 0], [0.5, 0.5]]), [[0, 2], [0, 1]]).R
    assert round(R[0], 4) == 0.8264
    assert round(R[1], 3) == 9.091
    assert rigidity_coefficients(np.eye(2), [[0, 1]]).R[0] == 100.0


def test_one_hot_examples():
    p = one_hot_parts(np.array([[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]]))
    assert p.labels.tolist() == [0, 0, 1]
    assert p.onehot.tolist() == [[1, 0], [1, 0], [0, 1]]


def test_part_counts_brute_force():
    W = np.random.default_rng(5).dirichlet(np.ones(5), size=100)
    p = one_hot_parts(W)
    brute = [sum(1 for row in W if max(range(5), key=lambda b: row[b]) == k) for k in range(5)]
    assert p.counts.tolist() == brute
    assert p.counts.sum() == 100
    assert np.all(p.onehot.sum(axis=1) == 1)


def _parts(counts):
    counts = np.asarray(counts)
    return PartAssignment(None, None, counts)


def test_small_parts():
    assert select_small_parts(_parts([50, 50, 50])) == set()
    assert select_small_parts(_parts([100, 100, 100, 10]), 0.5) == {3}
    assert select_small_parts(_parts([7])) == set()


@given(logits)
def test_rows_sum_to_one(L):
    n, b = L.shape
    rng = np.random.default_rng(n * 7 + b)
    skel = Skeleton([_sphere_bone(rng.normal(size=3)) for _ in range(b)])
    W = compute_skinning_weights(rng.normal(size=(n, 3)) * 3, skel, bias=L)
    assert W.is_valid(1e-6)


@given(logits, st.integers(0, 2**31 - 1))
def test_rigidity_permutation_invariant(L, seed):
    from scipy.special import softmax

    W = softmax(L, axis=1)
    n = len(W)
    rng = np.random.default_rng(seed)
    edges = rng.integers(0, n, size=(10, 2))
    perm = rng.permutation(W.shape[1])
    R = rigidity_coefficients(W, edges).R
    assert np.allclose(R, rigidity_coefficients(W[:, perm], edges).R, rtol=1e-12)
    assert np.all((R > 0) & (R <= 100.0))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_rigidity_decreases_with_entropy(p, q):
    # rows (1-p, p) have entropy increasing in p on [0, 0.5]
    lo, hi = sorted((0.5 * p, 0.5 * q))
    W = np.array([[1 - lo, lo], [1 - hi, hi], [0.9, 0.1]])
    R = rigidity_coefficients(W, [[0, 2], [1, 2]]).R
    assert R[0] >= R[1]
    H = entropy_bits(W)
    assert H[0] <= H[1] + 1e-15


grid_logits = arrays(
    np.float64, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=st.integers(-30, 30).map(float)
)


# integer logits keep the order strict after rescaling (no rounding ties)
@given(grid_logits, st.sampled_from([0.25, 0.5, 2.0, 8.0]), st.integers(-5, 5))
def test_parts_invariant_under_monotone_rescale(L, a, c):
    base = one_hot_parts(L).labels
    assert np.array_equal(one_hot_parts(a * L + c).labels, base)
    assert np.array_equal(one_hot_parts(np.exp(np.clip(L, -30, 30))).labels, base)


def test_entropy_matches_oracle():
    W = np.random.default_rng(2).dirichlet(np.ones(4), size=50)
    W[0] = [1, 0, 0, 0]
    assert np.allclose(entropy_bits(W), [entropy_oracle(r) for r in W], atol=1e-12)


def test_weight_files_round_trip():
    W = SkinningWeights(np.random.default_rng(0).dirichlet(np.ones(3), size=7).astype(np.float32))
    data = weights_to_bytes(W)
    assert data[:4] == b"SKW1" and len(data) == 12 + 7 * 3 * 4
    assert np.array_equal(weights_from_bytes(data).W, W.W)
    assert np.array_equal(weights_from_json(weights_to_json(W)).W, W.W)
    with pytest.raises(ValueError):
        weights_from_bytes(data[:-1])


def test_rigidity_requires_positive_lambda():
    with pytest.raises(ValueError):
        rigidity_coefficients(np.eye(2), [[0, 1]], lam=0.0)
