"""Dense linear-algebra primitives for the merge pipeline.

All functions operate on float64 arrays and are pure. SVD factor signs are
canonicalized (the largest-magnitude entry of each left singular vector is
made positive) so repeated runs produce identical factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Singular values below RANK_RTOL * sigma_max do not count toward numerical rank.
RANK_RTOL = 1e-10
# Vectors with 2-norm below this are treated as zero (cosine convention).
ZERO_NORM = 1e-12


class NumericalError(RuntimeError):
    """An underlying LAPACK routine failed to converge."""


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD of an m-by-n matrix: u (m, k), s (k,), vt (k, n), k = min(m, n)."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _as_matrix(mat, name: str = "matrix") -> np.ndarray:
    m = np.asarray(mat, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def thin_svd(mat) -> SvdFactors:
    """Thin SVD with deterministic sign conventions.

    Raises NumericalError if the decomposition does not converge.
    """
    m = _as_matrix(mat)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge on shape {m.shape}") from exc
    k = s.size
    if k:
        pick = np.argmax(np.abs(u), axis=0)
        signs = np.sign(u[pick, np.arange(k)])
        signs[signs == 0.0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return SvdFactors(u=u, s=s, vt=vt)


def truncate_rank(source, rank: int) -> np.ndarray:
    """Best rank-`rank` approximation (Frobenius) of a matrix or SvdFactors.

    Keeps the `rank` largest singular values; if `rank` meets or exceeds the
    number of components, this is a plain reconstruction.
    """
    r = int(rank)
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    factors = source if isinstance(source, SvdFactors) else thin_svd(source)
    keep = min(r, factors.s.size)
    return (factors.u[:, :keep] * factors.s[:keep]) @ factors.vt[:keep]


def cosine(a, b) -> float:
    """Cosine similarity of two vectors; 0.0 when either norm is below ZERO_NORM."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.ndim != 1 or bv.ndim != 1:
        raise ValueError("cosine expects 1-D vectors")
    if av.size != bv.size:
        raise ValueError(f"length mismatch: {av.size} vs {bv.size}")
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(np.clip(av @ bv / (na * nb), -1.0, 1.0))


def orthonormal_basis(mat) -> np.ndarray:
    """Orthonormal basis for the column space, with rank detected from the spectrum."""
    factors = thin_svd(mat)
    if factors.s.size == 0 or factors.s[0] <= 0.0:
        raise ValueError("zero matrix has no column space")
    rank = int(np.count_nonzero(factors.s > RANK_RTOL * factors.s[0]))
    return factors.u[:, :rank]


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (degrees, ascending) between the column spaces of a and b.

    Both inputs are orthonormalized first; returns min(rank(a), rank(b)) angles.
    Raises ValueError for zero matrices or mismatched ambient dimensions.
    """
    qa = orthonormal_basis(a)
    qb = orthonormal_basis(b)
    if qa.shape[0] != qb.shape[0]:
        raise ValueError(f"ambient dimension mismatch: {qa.shape[0]} vs {qb.shape[0]}")
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    s = np.clip(s, 0.0, 1.0)
    return np.degrees(np.arccos(s))


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function, exact 0.5 at x = 0."""
    z = np.asarray(x, dtype=np.float64)
    pos = z >= 0
    e = np.exp(np.where(pos, -z, z))
    return np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
