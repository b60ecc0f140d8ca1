"""Witness-set alignment candidates.

A witness is an ordered list of ``d`` corresponding pairs ``(p_{i_0}, q_{j_0}), ...``.
The first pair (the pivot) fixes the translation; the remaining ``d - 1`` pairs,
centered at the pivot, fix the rotation through :func:`get_rot`.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Iterable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import ArrayLike

from .cost import CostSpec, batch_costs, eval_cost
from .geom import (
    DEPENDENCE_TOL,
    Alignment,
    Array,
    DegenerateInputError,
    DimensionError,
    Subspace,
    as_cloud,
    diameter,
    orthonormal_complement,
    project_cloud,
    rotation_aligning_directions,
)

# Leading witness vectors shorter than this fraction of the cloud scale are degenerate.
DEGENERATE_REL = 1e-12
DEFAULT_CHUNK = 20_000


def get_rot(
    P_sub: ArrayLike,
    Q_sub: ArrayLike,
    subspace: Subspace | None = None,
    scale: float | None = None,
) -> Array:
    """Rotation in ``subspace`` aligning the directions of ``p_1, q_1``, then recursively
    the remaining pairs after projection onto the complement of ``q_1``.

    ``P_sub`` and ``Q_sub`` hold ``tau - 1`` points of the ``tau``-dimensional subspace.
    Pairs that collapse to (near) zero during the recursion end it early, leaving
    the remaining levels as the identity.
    """
    P = as_cloud(P_sub)
    d = P.shape[1]
    Q = as_cloud(Q_sub, d)
    if subspace is None:
        subspace = Subspace.full(d)
    if subspace.ambient_dim != d:
        raise DimensionError("subspace ambient dimension does not match the points")
    if subspace.dim < 2:
        raise DimensionError("get_rot needs a subspace of dimension >= 2")
    if P.shape[0] != subspace.dim - 1 or Q.shape[0] != P.shape[0]:
        raise DimensionError(
            f"a {subspace.dim}-dimensional subspace takes {subspace.dim - 1} pairs, "
            f"got {P.shape[0]} and {Q.shape[0]}"
        )
    if scale is None:
        scale = max(np.linalg.norm(P, axis=1).max(), np.linalg.norm(Q, axis=1).max())
    eps = DEGENERATE_REL * scale

    total = np.eye(d)
    level = 0
    while True:
        p1, q1 = P[0], Q[0]
        if np.linalg.norm(p1) <= eps or np.linalg.norm(q1) <= eps:
            if level == 0:
                raise DegenerateInputError("leading witness pair has zero norm")
            break
        R = rotation_aligning_directions(p1, q1, subspace)
        total = R @ total
        if subspace.dim == 2:
            break
        W = orthonormal_complement(q1)
        P = project_cloud(P[1:] @ R.T, W)
        Q = project_cloud(Q[1:], W)
        subspace = subspace.orthogonal_part(q1)
        level += 1
    return total


def get_rot_batch(Pc: Array, Qc: Array, eps: float) -> tuple[Array, Array]:
    """Vectorized :func:`get_rot` over the full space.

    ``Pc``, ``Qc`` are ``(B, d-1, d)``. Returns rotations ``(B, d, d)`` and a mask of
    witnesses whose leading pair is nondegenerate (rotations of masked-out rows are
    meaningless).
    """
    B, k, d = Pc.shape
    eye = np.eye(d)
    total = np.broadcast_to(eye, (B, d, d)).copy()
    proj = np.broadcast_to(eye, (B, d, d)).copy()  # projector onto the current subspace
    P, Q = Pc, Qc
    active = np.ones(B, dtype=bool)
    valid = active
    for level in range(k):
        p, q = P[:, 0], Q[:, 0]
        np_, nq = np.linalg.norm(p, axis=1), np.linalg.norm(q, axis=1)
        active = active & (np_ > eps) & (nq > eps)
        if level == 0:
            valid = active.copy()
        if not active.any():
            break
        u = p / np.where(active, np_, 1.0)[:, None]
        v = q / np.where(active, nq, 1.0)[:, None]
        c = np.clip(np.einsum("bi,bi->b", u, v), -1.0, 1.0)
        w = v - c[:, None] * u
        s = np.linalg.norm(w, axis=1)
        generic = s > DEPENDENCE_TOL
        e = w / np.where(generic, s, 1.0)[:, None]
        anti = ~generic & (c < 0) & active
        if anti.any():
            pr = proj[anti]  # row k = projection of e_k
            ua = u[anti]
            resid = pr - np.einsum("bk,bj->bkj", np.einsum("bkj,bj->bk", pr, ua), ua)
            kk = np.argmax(np.linalg.norm(resid, axis=2), axis=1)
            ea = resid[np.arange(len(kk)), kk]
            e[anti] = ea / np.linalg.norm(ea, axis=1)[:, None]
            c = np.where(anti, -1.0, c)
            s = np.where(anti, 0.0, s)
        rotate = active & (generic | anti)
        cos_t = np.where(rotate, c, 1.0)
        sin_t = np.where(rotate, s, 0.0)
        uu = np.einsum("bi,bj->bij", u, u)
        ee = np.einsum("bi,bj->bij", e, e)
        eu = np.einsum("bi,bj->bij", e, u)
        R = eye + sin_t[:, None, None] * (eu - eu.transpose(0, 2, 1)) + (cos_t - 1.0)[
            :, None, None
        ] * (uu + ee)
        total = R @ total
        if level == k - 1:
            break
        Pn = P[:, 1:] @ R.transpose(0, 2, 1)
        Pn = Pn - np.einsum("bm,bi->bmi", np.einsum("bmi,bi->bm", Pn, v), v)
        Qn = Q[:, 1:] - np.einsum("bm,bi->bmi", np.einsum("bmi,bi->bm", Q[:, 1:], v), v)
        proj = proj - np.einsum("bi,bj->bij", v, v)
        P, Q = Pn, Qn
    return total, valid


@dataclass(frozen=True)
class CandidateSet:
    """Alignments tagged with the witness that generated them.

    ``p_witness[k]`` / ``q_witness[k]`` list the P- and Q-indices of candidate ``k``'s
    witness, pivot first. For alignment problems the two coincide.
    """

    rotations: Array
    translations: Array
    p_witness: Array
    q_witness: Array

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def alignment(self, k: int) -> Alignment:
        return Alignment(self.rotations[k], self.translations[k])

    def __iter__(self) -> Iterator[Alignment]:
        return (self.alignment(k) for k in range(len(self)))

    @classmethod
    def concat(cls, parts: Iterable[CandidateSet]) -> CandidateSet:
        parts = list(parts)
        if not parts:
            raise ValueError("no candidate sets to concatenate")
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("rotations", "translations", "p_witness", "q_witness")))


def cloud_scale(P: Array, Q: Array) -> float:
    return max(diameter(P), diameter(Q), np.finfo(float).tiny)


def candidates_from_witnesses(
    P: Array, Q: Array, p_idx: Array, q_idx: Array, scale: float
) -> CandidateSet:
    """Alignments ``(R, R p_pivot - q_pivot)`` for each witness; degenerate ones dropped."""
    p_idx = np.asarray(p_idx, dtype=np.int64)
    q_idx = np.asarray(q_idx, dtype=np.int64)
    Pw, Qw = P[p_idx], Q[q_idx]
    Pc = Pw[:, 1:] - Pw[:, :1]
    Qc = Qw[:, 1:] - Qw[:, :1]
    R, ok = get_rot_batch(Pc, Qc, DEGENERATE_REL * scale)
    R = R[ok]
    t = np.einsum("bij,bj->bi", R, Pw[ok, 0]) - Qw[ok, 0]
    return CandidateSet(R, t, p_idx[ok], q_idx[ok])


def _check_alignment_input(P: ArrayLike, Q: ArrayLike) -> tuple[Array, Array]:
    P = as_cloud(P)
    Q = as_cloud(Q, P.shape[1])
    n, d = P.shape
    if Q.shape[0] != n:
        raise DimensionError(f"|P| = {n} but |Q| = {Q.shape[0]}")
    if d < 2:
        raise DimensionError("dimension must be at least 2")
    if n < d:
        raise ValueError(f"need at least d = {d} points, got {n}")
    return P, Q


def exhaustive_witnesses(n: int, d: int) -> Iterator[Array]:
    """For every pivot, all ordered (d-1)-tuples of the other indices, pivot first."""
    others = np.array(list(itertools.permutations(range(n - 1), d - 1)), dtype=np.int64)
    others = others.reshape(-1, d - 1)
    for pivot in range(n):
        tuples = others + (others >= pivot)
        yield np.column_stack([np.full(len(tuples), pivot), tuples])


def count_exhaustive(n: int, d: int) -> int:
    return n * math.perm(n - 1, d - 1)


def approx_alignment_exhaustive(P: ArrayLike, Q: ArrayLike) -> CandidateSet:
    P, Q = _check_alignment_input(P, Q)
    scale = cloud_scale(P, Q)
    parts = [candidates_from_witnesses(P, Q, w, w, scale) for w in exhaustive_witnesses(*P.shape)]
    return CandidateSet.concat(parts)


def sample_witnesses(
    P: Array, Q: Array, beta: int, rng: np.random.Generator, scale: float
) -> Array:
    """``beta`` uniformly drawn witnesses (pivot, then ordered distinct others).

    Tuples whose leading centered pair is degenerate are redrawn, up to ``10 beta``
    draws in total.
    """
    n, d = P.shape
    eps = DEGENERATE_REL * scale
    out: list[Array] = []
    for _ in range(10 * beta):
        pivot = int(rng.integers(n))
        others = rng.choice(n - 1, size=d - 1, replace=False)
        others = others + (others >= pivot)
        lead = others[0]
        if (
            np.linalg.norm(P[lead] - P[pivot]) > eps
            and np.linalg.norm(Q[lead] - Q[pivot]) > eps
        ):
            out.append(np.concatenate([[pivot], others]))
            if len(out) == beta:
                break
    if not out:
        raise DegenerateInputError("no nondegenerate witness found")
    return np.array(out, dtype=np.int64)


def approx_alignment_sampled(
    P: ArrayLike, Q: ArrayLike, beta: int, seed: int | np.random.Generator | None = None
) -> CandidateSet:
    P, Q = _check_alignment_input(P, Q)
    if beta < 1:
        raise ValueError("beta must be at least 1")
    scale = cloud_scale(P, Q)
    W = sample_witnesses(P, Q, beta, np.random.default_rng(seed), scale)
    return candidates_from_witnesses(P, Q, W, W, scale)


@dataclass(frozen=True)
class SearchResult:
    alignment: Alignment
    cost: float
    index: int  # position of the winner in generation order
    candidates_evaluated: int
    p_witness: Array
    q_witness: Array


def _chunks(cs: CandidateSet, size: int) -> Iterator[CandidateSet]:
    for lo in range(0, len(cs), size):
        hi = lo + size
        yield CandidateSet(
            cs.rotations[lo:hi], cs.translations[lo:hi], cs.p_witness[lo:hi], cs.q_witness[lo:hi]
        )


def search_best(
    tasks: Iterable[object],
    evaluate: Callable[[object], tuple[CandidateSet, Array]],
    jobs: int = 1,
) -> SearchResult:
    """Lexicographic (cost, generation index) minimum over independently evaluated tasks.

    ``evaluate`` turns a task into candidates and their costs. Tasks are consumed in
    order, so the winner does not depend on ``jobs``.
    """
    best: SearchResult | None = None
    offset = 0

    def reduce(cs: CandidateSet, costs: Array) -> None:
        nonlocal best, offset
        if len(cs):
            k = int(np.argmin(costs))
            c = float(costs[k])
            if best is None or c < best.cost:
                best = SearchResult(
                    cs.alignment(k), c, offset + k, 0, cs.p_witness[k], cs.q_witness[k]
                )
        offset += len(cs)

    if jobs <= 1:
        for task in tasks:
            reduce(*evaluate(task))
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pending: list = []
            for task in tasks:
                pending.append(pool.submit(evaluate, task))
                # bound the number of in-flight tasks to keep memory flat
                if len(pending) >= 2 * jobs:
                    reduce(*pending.pop(0).result())
            for fut in pending:
                reduce(*fut.result())
    if best is None:
        raise DegenerateInputError("no valid candidate alignment")
    return SearchResult(
        best.alignment, best.cost, best.index, offset, best.p_witness, best.q_witness
    )


def best_alignment(
    P: ArrayLike,
    Q: ArrayLike,
    candidates: CandidateSet | Iterable[CandidateSet],
    spec: CostSpec,
    jobs: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[Alignment, float]:
    """The candidate of least cost (identity correspondence); ties go to the earliest."""
    P = as_cloud(P)
    Q = as_cloud(Q, P.shape[1])
    if isinstance(candidates, CandidateSet):
        if len(candidates) == 0:
            raise ValueError("empty candidate set")
        candidates = _chunks(candidates, chunk)

    def evaluate(cs: CandidateSet) -> tuple[CandidateSet, Array]:
        return cs, batch_costs(P, Q, cs.rotations, cs.translations, spec)

    try:
        res = search_best(candidates, evaluate, jobs)
    except DegenerateInputError:
        raise ValueError("empty candidate set") from None
    return res.alignment, eval_cost(P, Q, res.alignment, spec)


def approx_align(
    P: ArrayLike,
    Q: ArrayLike,
    spec: CostSpec,
    beta: int | None = None,
    seed: int | None = None,
    jobs: int = 1,
) -> SearchResult:
    """Best witness alignment: exhaustive when ``beta`` is None, else ``beta`` sampled witnesses.

    Candidates are streamed in chunks and never materialized all at once.
    """
    P, Q = _check_alignment_input(P, Q)
    n, d = P.shape
    scale = cloud_scale(P, Q)
    if beta is None:
        witness_chunks: Iterable[Array] = (
            piece
            for w in exhaustive_witnesses(n, d)
            for piece in np.array_split(w, max(1, -(-len(w) // DEFAULT_CHUNK)))
        )
    else:
        if beta < 1:
            raise ValueError("beta must be at least 1")
        W = sample_witnesses(P, Q, beta, np.random.default_rng(seed), scale)
        witness_chunks = np.array_split(W, max(1, -(-len(W) // DEFAULT_CHUNK)))

    def evaluate(w: Array) -> tuple[CandidateSet, Array]:
        cs = candidates_from_witnesses(P, Q, w, w, scale)
        return cs, batch_costs(P, Q, cs.rotations, cs.translations, spec)

    res = search_best(witness_chunks, evaluate, jobs)
    # batched SSD costs are expanded sums; report the winner's cost evaluated directly
    return replace(res, cost=eval_cost(P, Q, res.alignment, spec))
