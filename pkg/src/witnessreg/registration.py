"""Registration with unknown correspondences, plus the Kabsch and ICP baselines."""

from __future__ import annotations

import itertools
import math
import time
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .cost import CostSpec, SumAll, eval_matched_cost, lz_norm
from .geom import Alignment, Array, DegenerateInputError, DimensionError, as_cloud
from .witness import (
    CandidateSet,
    candidates_from_witnesses,
    cloud_scale,
    search_best,
)

BRUTE_FORCE_MAX = 64
GUARANTEED = "approximation guarantee"
HEURISTIC = "heuristic (no guarantee)"


@dataclass(frozen=True)
class Matching:
    """``indices[i]`` is the Q-index matched to ``p_i``."""

    indices: Array
    bijective: bool = False

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.bijective and not np.array_equal(np.sort(idx), np.arange(idx.size)):
            raise ValueError("bijective matching must be a permutation")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def identity(cls, n: int) -> Matching:
        return cls(np.arange(n), bijective=True)

    def __len__(self) -> int:
        return self.indices.size

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.indices, np.arange(self.indices.size)))


@dataclass
class RegistrationResult:
    alignment: Alignment
    matching: Matching
    cost: float
    candidates_evaluated: int = 0
    wall_time: float = 0.0
    label: str = GUARANTEED
    history: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


class NearestNeighborIndex:
    """Nearest neighbours in ``Q`` under the l_z distance.

    Small clouds (and quasi-norms, z < 1) use an exhaustive scan; larger ones a k-d tree.
    Ties go to the lowest Q-index.
    """

    def __init__(self, Q: ArrayLike, z: float = 2.0) -> None:
        self.Q = as_cloud(Q)
        if self.Q.shape[0] == 0:
            raise ValueError("cannot match against an empty cloud")
        self.z = float(z)
        self.tree = None
        if self.Q.shape[0] >= BRUTE_FORCE_MAX and self.z >= 1.0:
            self.tree = cKDTree(self.Q)

    def query(self, X: ArrayLike) -> tuple[Array, Array]:
        """Indices of and distances to the nearest Q-point for each row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        if self.tree is None:
            return self._brute(X)
        k = 2 if self.Q.shape[0] > 1 else 1
        dist, idx = self.tree.query(X, k=k, p=self.z, workers=-1)
        if k == 1:
            return idx, dist
        best, nearest = idx[:, 0].copy(), dist[:, 0].copy()
        tie = dist[:, 1] == dist[:, 0]
        if tie.any():
            # exact ties may involve more than two points: rescan those rows
            best[tie], nearest[tie] = self._brute(X[tie])
        return best, nearest

    def _brute(self, X: Array) -> tuple[Array, Array]:
        n = X.shape[0]
        idx = np.empty(n, dtype=np.int64)
        dist = np.empty(n)
        step = max(1, 2_000_000 // (self.Q.size + 1))
        for lo in range(0, n, step):
            diff = X[lo : lo + step, None, :] - self.Q[None, :, :]
            dd = lz_norm(diff, self.z)
            j = np.argmin(dd, axis=1)  # first minimum = lowest index
            idx[lo : lo + step] = j
            dist[lo : lo + step] = dd[np.arange(j.size), j]
        return idx, dist


def nearest_neighbor_match(
    P: ArrayLike, Q: ArrayLike, a: Alignment, z: float = 2.0
) -> Matching:
    P = as_cloud(P)
    index = NearestNeighborIndex(as_cloud(Q, P.shape[1]), z)
    idx, _ = index.query(a.apply(P)) if P.shape[0] else (np.zeros(0, np.int64), None)
    return Matching(idx)


def hungarian_match(cost_matrix: ArrayLike) -> tuple[Array, float]:
    """Minimum-cost perfect assignment: ``perm[i]`` is the column given to row ``i``."""
    C = np.asarray(cost_matrix, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(C.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(C[rows, cols].sum())


def kabsch_ssd(P: ArrayLike, Q: ArrayLike, matching: Matching | ArrayLike | None = None) -> Alignment:
    """Global minimizer of ``sum ||R p_i - t - q_m(i)||^2`` via SVD of the cross-covariance."""
    P = as_cloud(P)
    n, d = P.shape
    Q = as_cloud(Q, d)
    if matching is not None:
        idx = matching.indices if isinstance(matching, Matching) else np.asarray(matching)
        Q = Q[idx]
    if Q.shape[0] != n:
        raise DimensionError(f"|P| = {n} but {Q.shape[0]} matched points")
    if n < d:
        raise ValueError(f"need at least d = {d} matched pairs, got {n}")
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, _, Vt = np.linalg.svd(H)
    D = np.ones(d)
    # flip the direction of the smallest singular value to land in SO(d)
    D[-1] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = (Vt.T * D) @ U.T
    return Alignment(R, R @ cp - cq)


def _ssd(X: Array) -> float:
    return float(np.einsum("ij,ij->", X, X))


def icp(
    P: ArrayLike,
    Q: ArrayLike,
    init: Alignment | None = None,
    max_iters: int = 100,
    rel_tol: float = 1e-8,
) -> RegistrationResult:
    """Point-to-point ICP: alternate NN matching and Kabsch until the SSD stops improving.

    ``history`` holds the SSD after each matching step; it never increases.
    """
    start = time.perf_counter()
    P = as_cloud(P)
    n, d = P.shape
    Q = as_cloud(Q, d)
    if n == 0 or Q.shape[0] == 0:
        raise ValueError("ICP needs nonempty clouds")
    index = NearestNeighborIndex(Q)
    a = init if init is not None else Alignment.identity(d)
    idx, _ = index.query(a.apply(P))
    cost = _ssd(a.apply(P) - Q[idx])
    history = [cost]
    for _ in range(max_iters):
        a_new = kabsch_ssd(P, Q, idx)
        X = a_new.apply(P)
        idx_new, _ = index.query(X)
        new_cost = _ssd(X - Q[idx_new])
        if new_cost > cost:  # rounding noise only; Kabsch + NN cannot increase the SSD
            break
        a, idx = a_new, idx_new
        improvement = cost - new_cost
        cost = new_cost
        history.append(cost)
        if improvement <= rel_tol * max(history[-2], np.finfo(float).tiny):
            break
    return RegistrationResult(
        alignment=a,
        matching=Matching(idx),
        cost=cost,
        candidates_evaluated=len(history) - 1,
        wall_time=time.perf_counter() - start,
        label=HEURISTIC,
        history=history,
    )


def _nn_costs(
    P: Array, index: NearestNeighborIndex, cs: CandidateSet, spec: CostSpec
) -> Array:
    m, d = len(cs), P.shape[1]
    if m == 0:
        return np.zeros(0)
    X = np.einsum("mij,nj->mni", cs.rotations, P) - cs.translations[:, None, :]
    idx, _ = index.query(X.reshape(-1, d))
    resid = X - index.Q[idx.reshape(m, -1)]
    return spec(resid)


def _bijective_costs(P: Array, Q: Array, cs: CandidateSet, spec: CostSpec) -> Array:
    out = np.empty(len(cs))
    for k in range(len(cs)):
        X = P @ cs.rotations[k].T - cs.translations[k]
        L = spec.pair_losses(X[:, None, :] - Q[None, :, :])
        out[k] = hungarian_match(L)[1]
    return out


def match_for(
    P: Array, Q: Array, a: Alignment, spec: CostSpec, bijective: bool
) -> Matching:
    if bijective:
        X = a.apply(P)
        perm, _ = hungarian_match(spec.pair_losses(X[:, None, :] - Q[None, :, :]))
        return Matching(perm, bijective=True)
    return nearest_neighbor_match(P, Q, a, spec.z)


def _exhaustive_pairs(n: int, m: int, d: int, chunk: int) -> Iterator[tuple[Array, Array]]:
    p_tuples = np.array(list(itertools.permutations(range(n), d)), dtype=np.int64)
    q_tuples = np.array(list(itertools.permutations(range(m), d)), dtype=np.int64)
    per = max(1, chunk // len(q_tuples))
    for lo in range(0, len(p_tuples), per):
        block = p_tuples[lo : lo + per]
        yield np.repeat(block, len(q_tuples), axis=0), np.tile(q_tuples, (len(block), 1))


def _sampled_pairs(
    n: int, m: int, d: int, beta: int, rng: np.random.Generator, chunk: int
) -> Iterator[tuple[Array, Array]]:
    orders = np.array(list(itertools.permutations(range(d))), dtype=np.int64)
    psub = np.array([rng.choice(n, d, replace=False) for _ in range(beta)], dtype=np.int64)
    qsub = np.array([rng.choice(m, d, replace=False) for _ in range(beta)], dtype=np.int64)
    p_idx = psub[:, orders].reshape(-1, d)
    q_idx = qsub[:, orders].reshape(-1, d)
    for lo in range(0, len(p_idx), chunk):
        yield p_idx[lo : lo + chunk], q_idx[lo : lo + chunk]


def count_exhaustive_pairs(n: int, m: int, d: int) -> int:
    return math.perm(n, d) * math.perm(m, d)


def align_and_match(
    P: ArrayLike,
    Q: ArrayLike,
    spec: CostSpec,
    beta: int | None = None,
    seed: int | None = None,
    bijective: bool = False,
    jobs: int = 1,
) -> RegistrationResult:
    """Witness alignments of d-point subsets of P and Q, each scored after matching.

    With ``beta=None`` every ordered pair of d-subsets is tried; otherwise ``beta``
    uniformly drawn subset pairs, each expanded to all ``d!`` witness orderings.
    Matching is nearest-neighbour, or optimal one-to-one with ``bijective=True``.
    """
    start = time.perf_counter()
    P = as_cloud(P)
    n, d = P.shape
    Q = as_cloud(Q, d)
    m = Q.shape[0]
    if bijective and m != n:
        raise DimensionError("bijective matching needs |P| == |Q|")
    if d < 2 or n < d or m < d:
        raise ValueError(f"need d >= 2 and at least d points in each cloud (d={d})")
    label = GUARANTEED if isinstance(spec.aggregator, SumAll) else HEURISTIC
    scale = cloud_scale(P, Q)
    index = NearestNeighborIndex(Q, spec.z)
    chunk = max(1, 400_000 // max(n, 1)) if not bijective else 256
    if beta is None:
        tasks: Iterator[tuple[Array, Array]] = _exhaustive_pairs(n, m, d, chunk)
    else:
        if beta < 1:
            raise ValueError("beta must be at least 1")
        tasks = _sampled_pairs(n, m, d, beta, np.random.default_rng(seed), chunk)

    def evaluate(task: tuple[Array, Array]) -> tuple[CandidateSet, Array]:
        cs = candidates_from_witnesses(P, Q, task[0], task[1], scale)
        if bijective:
            return cs, _bijective_costs(P, Q, cs, spec)
        return cs, _nn_costs(P, index, cs, spec)

    try:
        res = search_best(tasks, evaluate, jobs)
    except DegenerateInputError:
        raise DegenerateInputError("every witness subset was degenerate") from None
    matching = match_for(P, Q, res.alignment, spec, bijective)
    return RegistrationResult(
        alignment=res.alignment,
        matching=matching,
        cost=eval_matched_cost(P, Q, matching.indices, res.alignment, spec),
        candidates_evaluated=res.candidates_evaluated,
        wall_time=time.perf_counter() - start,
        label=label,
        extra={"p_witness": res.p_witness.tolist(), "q_witness": res.q_witness.tolist()},
    )


def p_icp_refined(
    P: ArrayLike,
    Q: ArrayLike,
    spec: CostSpec,
    beta: int | None = None,
    seed: int | None = None,
    bijective: bool = False,
    jobs: int = 1,
    max_iters: int = 100,
    rel_tol: float = 1e-8,
) -> RegistrationResult:
    """:func:`align_and_match`, then one ICP run on the aligned P.

    Both alignments are scored under ``spec`` and the cheaper one is reported.
    """
    start = time.perf_counter()
    P = as_cloud(P)
    Q = as_cloud(Q, P.shape[1])
    coarse = align_and_match(P, Q, spec, beta, seed, bijective, jobs)
    refine = icp(coarse.alignment.apply(P), Q, None, max_iters, rel_tol)
    composed = coarse.alignment.then(refine.alignment)
    matching = match_for(P, Q, composed, spec, bijective)
    refined_cost = eval_matched_cost(P, Q, matching.indices, composed, spec)
    extra = {
        "coarse_cost": coarse.cost,
        "refined_cost": refined_cost,
        "icp_iterations": len(refine.history) - 1,
        **coarse.extra,
    }
    if refined_cost <= coarse.cost:
        alignment, cost = composed, refined_cost
    else:
        alignment, cost, matching = coarse.alignment, coarse.cost, coarse.matching
    return RegistrationResult(
        alignment=alignment,
        matching=matching,
        cost=cost,
        candidates_evaluated=coarse.candidates_evaluated,
        wall_time=time.perf_counter() - start,
        label=coarse.label,
        history=refine.history,
        extra=extra,
    )
