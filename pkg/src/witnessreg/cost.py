"""Cost functions of the form ``f(l(D(R p_1 - t, q_1)), ..., l(D(R p_n - t, q_n)))``.

``D`` is an l_z distance, ``l`` an outer loss with log-Lipschitz constant ``r`` and
``f`` an aggregator with log-Lipschitz constant ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import ArrayLike

from .geom import Alignment, Array, DimensionError, as_cloud

SQRT2_PLUS_1 = 1.0 + math.sqrt(2.0)


def lz_norm(u: ArrayLike, z: float, axis: int = -1) -> Array:
    """``(sum |u_i|^z)^(1/z)``; a quasi-norm for ``z < 1``."""
    a = np.abs(np.asarray(u, dtype=np.float64))
    if z == 2.0:
        return np.sqrt(np.sum(a * a, axis=axis))
    if z == 1.0:
        return np.sum(a, axis=axis)
    if math.isinf(z):
        return np.max(a, axis=axis)
    return np.sum(a**z, axis=axis) ** (1.0 / z)


@dataclass(frozen=True)
class Power:
    """``l(x) = x^r``."""

    r: float = 2.0

    def __post_init__(self) -> None:
        if not self.r > 0:
            raise ValueError("power exponent must be positive")

    def __call__(self, x: ArrayLike) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if self.r == 2.0:
            return x * x
        if self.r == 1.0:
            return x.copy()
        return x**self.r

    @property
    def log_lipschitz(self) -> float:
        return self.r

    def __str__(self) -> str:
        return f"power:{self.r:g}"


@dataclass(frozen=True)
class Threshold:
    """M-estimator ``l(x) = min{x^r, T}``."""

    r: float = 1.0
    T: float = 1.0

    def __post_init__(self) -> None:
        if not (self.r > 0 and self.T > 0):
            raise ValueError("threshold loss needs r > 0 and T > 0")

    def __call__(self, x: ArrayLike) -> Array:
        return np.minimum(Power(self.r)(x), self.T)

    @property
    def log_lipschitz(self) -> float:
        return self.r

    def __str__(self) -> str:
        return f"thresh:{self.r:g}:{self.T:g}"


@dataclass(frozen=True)
class Huber:
    """``x^2/2`` up to ``delta``, ``delta (x - delta/2)`` beyond. Declared constant r = 2."""

    delta: float = 1.0

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ValueError("huber delta must be positive")

    def __call__(self, x: ArrayLike) -> Array:
        x = np.asarray(x, dtype=np.float64)
        d = self.delta
        return np.where(x <= d, 0.5 * x * x, d * (x - 0.5 * d))

    @property
    def log_lipschitz(self) -> float:
        return 2.0

    def __str__(self) -> str:
        return f"huber:{self.delta:g}"


OuterLoss = Union[Power, Threshold, Huber]


@dataclass(frozen=True)
class SumAll:
    """``f(v) = ||v||_1`` for nonnegative ``v``."""

    def __call__(self, losses: ArrayLike, axis: int = -1) -> Array:
        return np.sum(losses, axis=axis)

    def n_keep(self, n: int) -> int:
        return n

    @property
    def log_lipschitz(self) -> float:
        return 1.0

    def __str__(self) -> str:
        return "sum"


@dataclass(frozen=True)
class SumSmallest:
    """Sum of the ``n - k`` smallest entries; ``k`` given directly or as ``round(fraction * n)``."""

    k: int | None = None
    fraction: float | None = None

    def __post_init__(self) -> None:
        if (self.k is None) == (self.fraction is None):
            raise ValueError("give exactly one of k or fraction")
        if self.k is not None and self.k < 0:
            raise ValueError("k must be nonnegative")
        if self.fraction is not None and not 0.0 <= self.fraction < 1.0:
            raise ValueError("trim fraction must lie in [0, 1)")

    def n_keep(self, n: int) -> int:
        k = self.k if self.k is not None else int(round(self.fraction * n))
        if n > 0 and k >= n:
            raise ValueError(f"cannot ignore {k} of {n} entries")
        return n - k

    def __call__(self, losses: ArrayLike, axis: int = -1) -> Array:
        v = np.moveaxis(np.asarray(losses, dtype=np.float64), axis, -1)
        n = v.shape[-1]
        keep = self.n_keep(n)
        if keep == n:
            return v.sum(axis=-1)
        return np.partition(v, keep - 1, axis=-1)[..., :keep].sum(axis=-1)

    @property
    def log_lipschitz(self) -> float:
        return 1.0

    def __str__(self) -> str:
        return f"trim:{self.fraction:g}" if self.fraction is not None else f"trimk:{self.k}"


Aggregator = Union[SumAll, SumSmallest]


@dataclass(frozen=True)
class TheoryConstants:
    r: float
    s: float
    z: float
    d: int
    rho: float
    c_norm: float


@dataclass(frozen=True)
class CostSpec:
    z: float = 2.0
    loss: OuterLoss = field(default_factory=Power)
    aggregator: Aggregator = field(default_factory=SumAll)

    def __post_init__(self) -> None:
        if not self.z > 0:
            raise ValueError("norm order z must be positive")

    @classmethod
    def ssd(cls) -> CostSpec:
        return cls(2.0, Power(2.0), SumAll())

    @property
    def r(self) -> float:
        return self.loss.log_lipschitz

    @property
    def s(self) -> float:
        return self.aggregator.log_lipschitz

    @property
    def is_ssd(self) -> bool:
        return (
            self.z == 2.0
            and isinstance(self.loss, Power)
            and self.loss.r == 2.0
            and isinstance(self.aggregator, SumAll)
        )

    def pair_losses(self, residuals: ArrayLike) -> Array:
        """Per-pair losses from residual vectors along the last axis."""
        return self.loss(lz_norm(residuals, self.z))

    def __call__(self, residuals: ArrayLike) -> Array:
        """Cost of residual arrays shaped ``(..., n, d)``."""
        return self.aggregator(self.pair_losses(residuals), axis=-1)

    @classmethod
    def parse(cls, text: str) -> CostSpec:
        """Parse ``"z=2,loss=power:2,agg=sum"``-style strings.

        Losses: ``power:r``, ``thresh:r:T``, ``huber:delta``.
        Aggregators: ``sum``, ``trim:fraction``, ``trimk:k``.
        """
        fields = {"z": "2", "loss": "power:2", "agg": "sum"}
        for part in filter(None, (s.strip() for s in text.split(","))):
            key, sep, value = part.partition("=")
            if not sep or key.strip() not in fields:
                raise ValueError(f"bad cost field {part!r}")
            fields[key.strip()] = value.strip()
        try:
            z = float(fields["z"])
            name, *args = fields["loss"].split(":")
            vals = [float(a) for a in args]
            if name == "power" and len(vals) == 1:
                loss: OuterLoss = Power(vals[0])
            elif name == "thresh" and len(vals) == 2:
                loss = Threshold(vals[0], vals[1])
            elif name == "huber" and len(vals) == 1:
                loss = Huber(vals[0])
            else:
                raise ValueError(f"unknown loss {fields['loss']!r}")
            name, *args = fields["agg"].split(":")
            if name == "sum" and not args:
                agg: Aggregator = SumAll()
            elif name == "trim" and len(args) == 1:
                agg = SumSmallest(fraction=float(args[0]))
            elif name == "trimk" and len(args) == 1:
                agg = SumSmallest(k=int(args[0]))
            else:
                raise ValueError(f"unknown aggregator {fields['agg']!r}")
        except (TypeError, ValueError) as exc:
            raise ValueError(f"cannot parse cost spec {text!r}: {exc}") from exc
        return cls(z, loss, agg)

    def __str__(self) -> str:
        return f"z={self.z:g},loss={self.loss},agg={self.aggregator}"


def eval_loss(loss: OuterLoss, x: ArrayLike) -> Array | float:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("loss is only defined on [0, inf)")
    out = loss(x)
    return float(out) if out.ndim == 0 else out


def _check_pair(P: ArrayLike, Q: ArrayLike) -> tuple[Array, Array]:
    P = as_cloud(P)
    Q = as_cloud(Q, P.shape[1] if P.shape[0] else None)
    if P.shape[0] != Q.shape[0]:
        raise DimensionError(f"|P| = {P.shape[0]} but |Q| = {Q.shape[0]}")
    return P, Q


def eval_cost(P: ArrayLike, Q: ArrayLike, a: Alignment, spec: CostSpec) -> float:
    """Cost of alignment ``a`` with the identity correspondence ``p_i <-> q_i``."""
    P, Q = _check_pair(P, Q)
    if P.shape[0] == 0:
        return 0.0
    if P.shape[1] != a.dim:
        raise DimensionError("alignment dimension does not match the clouds")
    return float(spec(P @ a.rotation.T - a.translation - Q))


def eval_matched_cost(
    P: ArrayLike, Q: ArrayLike, matching: ArrayLike, a: Alignment, spec: CostSpec
) -> float:
    """Cost with ``p_i`` paired to ``q_{m(i)}``."""
    P = as_cloud(P)
    Q = as_cloud(Q)
    m = np.asarray(matching, dtype=np.int64).reshape(-1)
    if m.shape[0] != P.shape[0]:
        raise DimensionError("matching must have one entry per point of P")
    if P.shape[0] == 0:
        return 0.0
    if m.min() < 0 or m.max() >= Q.shape[0]:
        raise IndexError("matching refers to a point outside Q")
    return eval_cost(P, Q[m], a, spec)


def _batch_ssd(P: Array, Q: Array, rotations: Array, translations: Array) -> Array:
    # sum |R p - t - q|^2 expanded into sufficient statistics of P and Q: O(d^2) per
    # candidate; absolute rounding error ~ eps * (sum |p|^2 + sum |q|^2)
    n = P.shape[0]
    sp, sq = P.sum(axis=0), Q.sum(axis=0)
    H = Q.T @ P  # sum_i q_i p_i^T
    t = translations
    const = np.einsum("ij,ij->", P, P) + np.einsum("ij,ij->", Q, Q)
    val = (
        const
        + n * np.einsum("mi,mi->m", t, t)
        - 2.0 * np.einsum("mi,mij,j->m", t, rotations, sp)
        + 2.0 * (t @ sq)
        - 2.0 * np.einsum("mij,ij->m", rotations, H)
    )
    return np.maximum(val, 0.0)


def batch_costs(
    P: Array, Q: Array, rotations: Array, translations: Array, spec: CostSpec
) -> Array:
    """Costs of many alignments at once; ``rotations`` is ``(m, d, d)``."""
    m, d, _ = rotations.shape
    n = P.shape[0]
    if n == 0:
        return np.zeros(m)
    if spec.is_ssd:
        return _batch_ssd(P, Q, rotations, translations)
    # (m*d, d) @ (d, n) keeps the heavy product a single GEMM; layout stays (m, d, n)
    resid = (rotations.reshape(m * d, d) @ P.T).reshape(m, d, n)
    resid -= translations[:, :, None]
    resid -= Q.T[None]
    z = spec.z
    if z == 2.0:
        sq = resid[:, 0] ** 2
        for k in range(1, d):
            sq += resid[:, k] ** 2
        if isinstance(spec.loss, Power) and spec.loss.r == 2.0:
            losses = sq
        else:
            losses = spec.loss(np.sqrt(sq))
    else:
        np.abs(resid, out=resid)
        if math.isinf(z):
            dist = resid.max(axis=1)
        else:
            acc = resid[:, 0] ** z
            for k in range(1, d):
                acc += resid[:, k] ** z
            dist = acc ** (1.0 / z)
        losses = spec.loss(dist)
    return spec.aggregator(losses, axis=-1)


def lipschitz_constants(spec: CostSpec, d: int) -> TheoryConstants:
    r, s, z = spec.r, spec.s, spec.z
    return TheoryConstants(
        r=r,
        s=s,
        z=z,
        d=d,
        rho=max(2.0 ** (r - 1.0), 1.0),
        c_norm=float(d) ** abs(1.0 / z - 0.5),
    )


def theoretical_factor(spec: CostSpec, d: int) -> float:
    """``w^(rs) (1+sqrt2)^(drs)`` with ``w = d^|1/z - 1/2|``."""
    k = lipschitz_constants(spec, d)
    return k.c_norm ** (k.r * k.s) * SQRT2_PLUS_1 ** (d * k.r * k.s)


def registration_factor(spec: CostSpec, d: int) -> float:
    """``w^r (1+sqrt2)^(dr)``: the bound for unknown correspondences with a plain sum."""
    k = lipschitz_constants(spec, d)
    return k.c_norm**k.r * SQRT2_PLUS_1 ** (d * k.r)
