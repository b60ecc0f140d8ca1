import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from witnessreg import registration
from witnessreg.cost import CostSpec, eval_matched_cost
from witnessreg.data import InstanceSpec, generate_instance
from witnessreg.geom import Alignment, DimensionError, axis_rotation, diameter, is_rotation
from witnessreg.registration import (
    GUARANTEED,
    HEURISTIC,
    Matching,
    NearestNeighborIndex,
    align_and_match,
    count_exhaustive_pairs,
    hungarian_match,
    icp,
    kabsch_ssd,
    nearest_neighbor_match,
    p_icp_refined,
)

from conftest import random_alignment

seeds = st.integers(0, 2**32 - 1)


def ssd(P, Q, a):
    return float(((a.apply(P) - Q) ** 2).sum())


def test_nn_examples():
    Q = np.array([[0.0, 0.0], [10.0, 0.0]])
    P = np.array([[1.0, 0.0], [9.0, 0.0]])
    m = nearest_neighbor_match(P, Q, Alignment.identity(2))
    assert m.indices.tolist() == [0, 1]
    m = nearest_neighbor_match([[5.0, 0.0]], Q, Alignment.identity(2))
    assert m.indices.tolist() == [0]  # equidistant: lowest index
    m = nearest_neighbor_match([[0.0, 0.0], [0.0, 0.0]], Q, Alignment.identity(2))
    assert m.indices.tolist() == [0, 0] and not m.bijective


@settings(max_examples=100, deadline=None)
@given(seeds, st.sampled_from([0.5, 1.0, 2.0, np.inf]))
def test_nn_matches_argmin(seed, z):
    rng = np.random.default_rng(seed)
    Q = rng.integers(-3, 4, (int(rng.integers(1, 100)), 2)).astype(float)
    X = rng.integers(-3, 4, (30, 2)).astype(float)
    idx, dist = NearestNeighborIndex(Q, z).query(X)
    diff = np.abs(X[:, None, :] - Q[None])
    if np.isinf(z):
        D = diff.max(axis=2)
    else:
        D = (diff**z).sum(axis=2) ** (1 / z)
    np.testing.assert_allclose(dist, D.min(axis=1), rtol=1e-12, atol=1e-12)
    assert np.array_equal(idx, D.argmin(axis=1))


def test_hungarian_examples():
    perm, total = hungarian_match(np.eye(3))
    assert total == 0 and sorted(perm) == [0, 1, 2] and all(perm != np.arange(3))
    perm, total = hungarian_match([[1.0, 2.0], [2.0, 4.0]])
    assert perm.tolist() == [1, 0] and total == 4.0
    with pytest.raises(ValueError):
        hungarian_match(np.ones((2, 3)))
    with pytest.raises(ValueError):
        hungarian_match([[1.0, np.nan], [0.0, 1.0]])


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 6))
def test_hungarian_matches_brute_force(seed, n):
    C = np.random.default_rng(seed).random((n, n))
    perms = np.array(list(itertools.permutations(range(n))))
    best = C[np.arange(n), perms].sum(axis=1).min()
    assert hungarian_match(C)[1] == pytest.approx(best, abs=1e-12)


def test_kabsch_examples():
    P = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    a = kabsch_ssd(P, P)
    np.testing.assert_allclose(a.rotation, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(a.translation, 0, atol=1e-12)
    R = axis_rotation(2, 0, 1, 0.7)
    truth = Alignment(R, [0.3, -0.1])
    a = kabsch_ssd(P, truth.apply(P))
    np.testing.assert_allclose(a.rotation, R, atol=1e-12)
    np.testing.assert_allclose(a.translation, [0.3, -0.1], atol=1e-12)


def test_kabsch_reflection_guard():
    P = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [0, 0, 0]])
    mirrored = P * [1, 1, -1]
    a = kabsch_ssd(P, mirrored)
    assert is_rotation(a.rotation)


def test_kabsch_with_matching(rng):
    Q = rng.standard_normal((10, 3))
    perm = rng.permutation(10)
    P = Q[perm]
    a = kabsch_ssd(P, Q, Matching(perm))
    np.testing.assert_allclose(a.apply(P), Q[perm], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_kabsch_beats_perturbations(seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((12, 3))
    Q = rng.standard_normal((12, 3))
    a = kabsch_ssd(P, Q)
    best = ssd(P, Q, a)
    for _ in range(20):
        b = random_alignment(3, rng, 2.0)
        assert best <= ssd(P, Q, b) + 1e-12
        near = Alignment(axis_rotation(3, 0, 1, 1e-3) @ a.rotation, a.translation + 1e-3)
        assert best <= ssd(P, Q, near) + 1e-12


def test_icp_converges_from_small_rotation(rng):
    Q = rng.uniform(-0.5, 0.5, (300, 3))
    truth = Alignment(axis_rotation(3, 0, 1, np.radians(5)), [0.01, 0.0, -0.01])
    P = truth.apply(Q)
    res = icp(P, Q)
    assert res.label == HEURISTIC
    assert res.cost < 1e-12
    np.testing.assert_allclose(res.alignment.rotation, truth.inverse().rotation, atol=1e-6)


def test_icp_stuck_after_half_turn():
    rng = np.random.default_rng(5)
    Q = rng.uniform(-0.5, 0.5, (200, 3)) * [1.0, 0.6, 0.3]
    P = Alignment(axis_rotation(3, 0, 2, np.pi * 0.9), np.zeros(3)).apply(Q)
    res = icp(P, Q)
    # a local minimum far from the zero-cost truth
    assert res.cost > 0.1 * diameter(Q) ** 2


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_icp_history_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((30, 3))
    Q = rng.standard_normal((40, 3))
    h = icp(P, Q, max_iters=30).history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_align_and_match_two_points():
    Q = np.array([[0.0, 0.0], [1.0, 0.0]])
    P = Q[::-1].copy()
    res = align_and_match(P, Q, CostSpec.ssd(), bijective=True)
    assert res.cost < 1e-24
    assert res.label == GUARANTEED


def test_align_and_match_recovers_permutation():
    inst = generate_instance(InstanceSpec(n=8, d=3, shuffle=True, seed=11))
    res = align_and_match(inst.P, inst.Q, CostSpec.ssd())
    assert res.candidates_evaluated <= count_exhaustive_pairs(8, 8, 3)
    assert res.cost < 1e-9 * diameter(inst.Q) ** 2
    assert np.array_equal(res.matching.indices, inst.true_matching)
    both = align_and_match(inst.P, inst.Q, CostSpec.ssd(), bijective=True, beta=20, seed=0)
    assert both.matching.bijective


def test_align_and_match_sampled_not_better_than_exhaustive(rng):
    P = rng.standard_normal((6, 2))
    Q = rng.standard_normal((6, 2))
    spec = CostSpec.ssd()
    full = align_and_match(P, Q, spec)
    one = align_and_match(P, Q, spec, beta=1, seed=0)
    assert one.cost >= full.cost - 1e-12
    assert one.candidates_evaluated == 2


def test_align_and_match_trimmed_is_heuristic(rng):
    P = rng.standard_normal((6, 2))
    res = align_and_match(P, P, CostSpec.parse("z=2,loss=power:2,agg=trim:0.5"), beta=3, seed=0)
    assert res.label == HEURISTIC


def test_align_and_match_errors():
    with pytest.raises(DimensionError):
        align_and_match(np.zeros((3, 2)), np.zeros((4, 2)), CostSpec.ssd(), bijective=True)
    with pytest.raises(ValueError):
        align_and_match(np.zeros((1, 2)), np.zeros((4, 2)), CostSpec.ssd())


def test_p_icp_refined_not_worse_than_coarse():
    inst = generate_instance(InstanceSpec(n=60, d=3, sigma2=1e-4, shuffle=True, seed=2))
    spec = CostSpec.parse("z=2,loss=thresh:2:0.2,agg=sum")
    res = p_icp_refined(inst.P, inst.Q, spec, beta=50, seed=0)
    assert res.cost <= res.extra["coarse_cost"]
    assert res.cost == pytest.approx(
        eval_matched_cost(inst.P, inst.Q, res.matching.indices, res.alignment, spec)
    )


def test_tree_and_brute_force_agree(monkeypatch):
    rng = np.random.default_rng(4)
    Q = rng.standard_normal((200, 3))
    X = rng.standard_normal((500, 3))
    tree_idx, _ = NearestNeighborIndex(Q).query(X)
    monkeypatch.setattr(registration, "BRUTE_FORCE_MAX", 10**9)
    brute_idx, _ = NearestNeighborIndex(Q).query(X)
    assert np.array_equal(tree_idx, brute_idx)
