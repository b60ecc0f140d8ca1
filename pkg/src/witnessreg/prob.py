"""Randomized linear-time alignment: norm-weighted witness sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from .cost import CostSpec, lipschitz_constants
from .geom import (
    Alignment,
    Array,
    DimensionError,
    Subspace,
    as_cloud,
    orthonormal_complement,
    project_cloud,
    rotation_aligning_directions,
)
from .witness import DEGENERATE_REL, CandidateSet, best_alignment, cloud_scale


@dataclass
class OpCounter:
    """Counts scalar multiply-adds spent on point data; used to check per-call linearity."""

    flops: int = 0
    levels: int = 0
    samples: list[int] = field(default_factory=list)


def sample_weights(P: ArrayLike, Q: ArrayLike, r: float, eps: float = 0.0) -> Array:
    """``w_i ∝ ||p_i||^r``, zero wherever ``p_i`` or ``q_i`` is (near) zero.

    Returns all zeros when no index is eligible.
    """
    P = as_cloud(P)
    Q = as_cloud(Q, P.shape[1])
    npn = np.linalg.norm(P, axis=1)
    eligible = (npn > eps) & (np.linalg.norm(Q, axis=1) > eps)
    w = np.where(eligible, npn, 0.0) ** r
    w[~eligible] = 0.0
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        if eligible.any():
            # underflow of ||p||^r: fall back to uniform over eligible indices
            return eligible / eligible.sum()
        return np.zeros_like(w)
    return w / total


def draw_index(weights: Array, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from normalized weights."""
    cdf = np.cumsum(weights)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    j = min(j, len(weights) - 1)
    # skip zero-weight slots that a boundary draw could land on
    while weights[j] == 0.0:
        j -= 1
    return j


def prob_rot(
    P: ArrayLike,
    Q: ArrayLike,
    r: float,
    rng: np.random.Generator,
    subspace: Subspace | None = None,
    scale: float | None = None,
    counter: OpCounter | None = None,
) -> Array:
    """Rotation built from norm-weighted sampled pairs, one per recursion level.

    At each level a pair ``(p_j, q_j)`` is drawn with probability ``∝ ||p_j||^r``, its
    directions are aligned, and the remaining points are rotated and projected onto
    the complement of ``q_j``. Levels with no eligible pair contribute the identity.
    """
    P = as_cloud(P)
    d = P.shape[1]
    Q = as_cloud(Q, d)
    if P.shape[0] != Q.shape[0]:
        raise DimensionError("P and Q must have the same number of points")
    if P.shape[0] == 0:
        raise ValueError("need at least one point")
    if subspace is None:
        subspace = Subspace.full(d)
    if scale is None:
        scale = max(np.linalg.norm(P, axis=1).max(), np.linalg.norm(Q, axis=1).max())
    eps = DEGENERATE_REL * scale
    total = np.eye(d)
    while subspace.dim >= 2 and P.shape[0] > 0:
        n = P.shape[0]
        w = sample_weights(P, Q, r, eps)
        if not w.any():
            break
        j = draw_index(w, rng)
        R = rotation_aligning_directions(P[j], Q[j], subspace)
        total = R @ total
        if counter is not None:
            counter.levels += 1
            counter.samples.append(j)
            # weights (n d) + rotate (n d^2) + two projections (2 n d (d-1))
            counter.flops += n * d + n * d * d + 2 * n * d * (d - 1)
        if subspace.dim == 2:
            break
        W = orthonormal_complement(Q[j])
        keep = np.arange(n) != j
        P = project_cloud(P[keep] @ R.T, W)
        Q_next = project_cloud(Q[keep], W)
        subspace = subspace.orthogonal_part(Q[j])
        Q = Q_next
    return total


def iteration_count(d: int) -> int:
    """``ceil(1 / ln(2^d / (2^d - 1)))``: enough repetitions for success probability >= 1/2."""
    return math.ceil(1.0 / math.log(2.0**d / (2.0**d - 1.0)))


def prob_alignment(
    P: ArrayLike,
    Q: ArrayLike,
    r: float,
    seed: int | np.random.Generator | None = None,
    iterations: int | None = None,
    counter: OpCounter | None = None,
) -> CandidateSet:
    """Candidates ``(R, R p_j - q_j)`` from repeated pivot draws followed by :func:`prob_rot`."""
    P = as_cloud(P)
    n, d = P.shape
    Q = as_cloud(Q, d)
    if Q.shape[0] != n:
        raise DimensionError(f"|P| = {n} but |Q| = {Q.shape[0]}")
    if n < 2:
        raise ValueError("need at least two points")
    if not r > 0:
        raise ValueError("r must be positive")
    rng = np.random.default_rng(seed)
    k = iteration_count(d) if iterations is None else iterations
    scale = cloud_scale(P, Q)
    rotations = np.empty((k, d, d))
    translations = np.empty((k, d))
    pivots = np.empty((k, 1), dtype=np.int64)
    for it in range(k):
        j = int(rng.integers(n))
        keep = np.arange(n) != j
        R = prob_rot(P[keep] - P[j], Q[keep] - Q[j], r, rng, scale=scale, counter=counter)
        rotations[it] = R
        translations[it] = R @ P[j] - Q[j]
        pivots[it] = j
    return CandidateSet(rotations, translations, pivots, pivots.copy())


def sigma_constant(spec: CostSpec, d: int) -> float:
    """Informational approximation constant ``(12 rho^4 c^{5r})^{d-1} * 3 rho c^r``."""
    k = lipschitz_constants(spec, d)
    base = 12.0 * k.rho**4 * k.c_norm ** (5 * k.r)
    return base ** (d - 1) * 3.0 * k.rho * k.c_norm**k.r


def best_prob_alignment(
    P: ArrayLike,
    Q: ArrayLike,
    spec: CostSpec,
    seed: int | None = None,
    iterations: int | None = None,
) -> tuple[Alignment, float, int]:
    """Run :func:`prob_alignment` with ``r`` taken from ``spec`` and keep the cheapest candidate."""
    cs = prob_alignment(P, Q, spec.r, seed, iterations)
    a, c = best_alignment(P, Q, cs, spec)
    return a, c, len(cs)
