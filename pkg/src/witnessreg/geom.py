"""Rotations, subspace-confined rotations and projections.

Point clouds are plain ``(n, d)`` float64 arrays; row ``i`` is point ``i``.
An alignment ``(R, t)`` maps a point ``p`` to ``R @ p - t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray

Array: TypeAlias = NDArray[np.float64]

# Default tolerance for orthogonality / determinant / membership checks.
TOL = 1e-9
# Candidates whose residual drops below this are treated as linearly dependent.
DEPENDENCE_TOL = 1e-10
MIN_DIM, MAX_DIM = 2, 16


class DimensionError(ValueError):
    """Inputs of incompatible dimensions."""


class DegenerateInputError(ValueError):
    """Zero-norm vectors or other inputs that admit no well-defined answer."""


def as_cloud(points: ArrayLike, dim: int | None = None) -> Array:
    """Validate and convert to a contiguous ``(n, d)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, dim or 0)
    if arr.ndim != 2:
        raise DimensionError(f"point cloud must be 2-D (n, d), got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"expected dimension {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite values")
    return arr


def as_vector(v: ArrayLike) -> Array:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite values")
    return arr


def is_rotation(R: ArrayLike, tol: float = TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        return False
    d = R.shape[0]
    return bool(
        np.linalg.norm(R.T @ R - np.eye(d)) < tol and abs(np.linalg.det(R) - 1.0) < tol
    )


def check_rotation(R: ArrayLike, tol: float = TOL) -> Array:
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R, tol):
        raise ValueError("matrix is not a rotation (orthonormal with det +1)")
    return R


def diameter(cloud: ArrayLike) -> float:
    """Largest pairwise distance; for large clouds, twice the max radius about the centroid.

    The large-cloud estimate is an upper bound within a factor of two.
    """
    X = as_cloud(cloud)
    n = X.shape[0]
    if n < 2:
        return 0.0
    if n <= 3000:
        from scipy.spatial.distance import pdist

        return float(pdist(X).max())
    return float(2.0 * np.linalg.norm(X - X.mean(axis=0), axis=1).max())


@dataclass(frozen=True)
class Subspace:
    """A J-dimensional linear subspace of R^d given by an orthonormal basis (d x J)."""

    basis: Array

    def __post_init__(self) -> None:
        B = np.asarray(self.basis, dtype=np.float64)
        if B.ndim != 2 or B.shape[1] > B.shape[0]:
            raise DimensionError(f"basis must be d x J with J <= d, got {B.shape}")
        if np.linalg.norm(B.T @ B - np.eye(B.shape[1])) >= TOL:
            raise ValueError("subspace basis columns are not orthonormal")
        object.__setattr__(self, "basis", B)

    @classmethod
    def full(cls, d: int) -> Subspace:
        return cls(np.eye(d))

    @classmethod
    def span(cls, *vectors: ArrayLike) -> Subspace:
        """Orthonormalize the given (independent) vectors into a subspace."""
        V = np.column_stack([as_vector(v) for v in vectors])
        Qm, Rm = np.linalg.qr(V)
        if np.any(np.abs(np.diag(Rm)) < DEPENDENCE_TOL):
            raise DegenerateInputError("spanning vectors are linearly dependent")
        return cls(Qm)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def project(self, x: ArrayLike) -> Array:
        x = np.asarray(x, dtype=np.float64)
        return (x @ self.basis) @ self.basis.T

    def contains(self, x: ArrayLike, tol: float = 1e-8) -> bool:
        x = np.asarray(x, dtype=np.float64)
        scale = max(1.0, float(np.max(np.abs(x), initial=0.0)))
        return bool(np.all(np.abs(self.project(x) - x) <= tol * scale))

    def orthogonal_part(self, q: ArrayLike) -> Subspace:
        """The (J-1)-dimensional subspace of vectors in this subspace orthogonal to ``q``.

        ``q`` must lie in the subspace.
        """
        coords = self.basis.T @ as_vector(q)
        return Subspace(self.basis @ orthonormal_complement(coords))


def orthonormal_complement(q: ArrayLike) -> Array:
    """A ``d x (d-1)`` matrix whose orthonormal columns span the hyperplane orthogonal to ``q``."""
    q = as_vector(q)
    nq = np.linalg.norm(q)
    if nq == 0.0:
        raise DegenerateInputError("cannot build the complement of a zero vector")
    d = q.shape[0]
    basis = [q / nq]
    for k in range(d):
        if len(basis) == d:
            break
        v = np.zeros(d)
        v[k] = 1.0
        # two Gram-Schmidt passes keep orthogonality for nearly dependent candidates
        for _ in range(2):
            for b in basis:
                v = v - (b @ v) * b
        nv = np.linalg.norm(v)
        if nv < DEPENDENCE_TOL:
            continue
        basis.append(v / nv)
    return np.column_stack(basis[1:]) if d > 1 else np.zeros((1, 0))


def project_cloud(cloud: ArrayLike, W: ArrayLike) -> Array:
    """Orthogonal projection of every point onto the column space of ``W`` (i.e. ``W W^T p``)."""
    W = np.asarray(W, dtype=np.float64)
    X = as_cloud(cloud)
    if X.shape[1] != W.shape[0]:
        raise DimensionError(f"cloud dimension {X.shape[1]} does not match W rows {W.shape[0]}")
    return (X @ W) @ W.T


def embed_subspace_rotation(inner_rot: ArrayLike, subspace: Subspace) -> Array:
    """Lift a J x J rotation acting in ``subspace`` to a d x d rotation fixing its complement."""
    Ri = check_rotation(inner_rot)
    J = subspace.dim
    if Ri.shape != (J, J):
        raise DimensionError(f"inner rotation is {Ri.shape}, subspace has dimension {J}")
    if J < 2:
        raise DimensionError("subspace rotations need a subspace of dimension >= 2")
    B = subspace.basis
    # V [R 0; 0 I] V^T with V = [B | B_perp] reduces to I + B (R - I) B^T
    return np.eye(subspace.ambient_dim) + B @ (Ri - np.eye(J)) @ B.T


def _plane_rotation(u: Array, e: Array, cos_t: float, sin_t: float) -> Array:
    d = u.shape[0]
    return (
        np.eye(d)
        + sin_t * (np.outer(e, u) - np.outer(u, e))
        + (cos_t - 1.0) * (np.outer(u, u) + np.outer(e, e))
    )


def _antipodal_axis(u: Array, subspace: Subspace) -> Array:
    # unit vector in the subspace orthogonal to u, built from the standard basis
    # vector whose projection has the largest component orthogonal to u
    proj = subspace.project(np.eye(u.shape[0]))  # row k = projection of e_k
    resid = proj - np.outer(proj @ u, u)
    k = int(np.argmax(np.linalg.norm(resid, axis=1)))
    e = resid[k]
    return e / np.linalg.norm(e)


def rotation_aligning_directions(
    p: ArrayLike, q: ArrayLike, subspace: Subspace | None = None
) -> Array:
    """Minimal-angle rotation in ``subspace`` taking the direction of ``p`` to that of ``q``.

    The rotation acts in the plane spanned by ``p`` and ``q`` and fixes its orthogonal
    complement. For antipodal inputs the plane is completed with a standard basis
    direction (projected into the subspace) that is least aligned with ``p``.
    """
    p, q = as_vector(p), as_vector(q)
    if p.shape != q.shape:
        raise DimensionError("p and q must have the same dimension")
    if subspace is None:
        subspace = Subspace.full(p.shape[0])
    if subspace.ambient_dim != p.shape[0]:
        raise DimensionError("subspace ambient dimension does not match the points")
    npn, nqn = np.linalg.norm(p), np.linalg.norm(q)
    if npn == 0.0 or nqn == 0.0:
        raise DegenerateInputError("cannot align the direction of a zero vector")
    if not (subspace.contains(p) and subspace.contains(q)):
        raise ValueError("p and q must lie in the subspace")
    if subspace.dim < 2:
        return np.eye(p.shape[0])
    u, v = p / npn, q / nqn
    c = float(np.clip(u @ v, -1.0, 1.0))
    w = v - c * u
    s = float(np.linalg.norm(w))
    if s > DEPENDENCE_TOL:
        return _plane_rotation(u, w / s, c, s)
    if c > 0:
        return np.eye(p.shape[0])
    return _plane_rotation(u, _antipodal_axis(u, subspace), -1.0, 0.0)


@dataclass(frozen=True)
class Alignment:
    """Rigid map ``p -> R p - t``."""

    rotation: Array
    translation: Array

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1] or t.shape != (R.shape[0],):
            raise DimensionError(f"rotation {R.shape} and translation {t.shape} disagree")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, d: int) -> Alignment:
        return cls(np.eye(d), np.zeros(d))

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    def apply(self, cloud: ArrayLike) -> Array:
        return apply_alignment(cloud, self)

    def then(self, other: Alignment) -> Alignment:
        """The alignment equal to applying ``self`` first and ``other`` second."""
        return Alignment(
            other.rotation @ self.rotation,
            other.rotation @ self.translation + other.translation,
        )

    def inverse(self) -> Alignment:
        Rt = self.rotation.T
        return Alignment(Rt, -Rt @ self.translation)


def apply_alignment(cloud: ArrayLike, a: Alignment) -> Array:
    X = as_cloud(cloud)
    if X.shape[1] != a.dim:
        raise DimensionError(f"cloud dimension {X.shape[1]} != alignment dimension {a.dim}")
    return X @ a.rotation.T - a.translation


def random_rotation(d: int, rng: np.random.Generator) -> Array:
    """Haar-uniform rotation via QR of a Gaussian matrix with sign and determinant fixes."""
    A = rng.standard_normal((d, d))
    Qm, Rm = np.linalg.qr(A)
    Qm = Qm * np.sign(np.diag(Rm))
    if np.linalg.det(Qm) < 0:
        Qm[:, 0] = -Qm[:, 0]
    return Qm


def axis_rotation(d: int, i: int, j: int, angle: float) -> Array:
    """Rotation by ``angle`` in the coordinate plane (e_i, e_j)."""
    R = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    R[i, i] = R[j, j] = c
    R[i, j], R[j, i] = -s, s
    return R
