"""Dense linear-algebra and clustering primitives used by the pipeline.

Everything works on plain 2-D float64 ``numpy`` arrays. ``as_matrix`` is the
single entry point that enforces the matrix contract (2-D, finite, float64);
all public operations run it on their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import InvalidInputError

__all__ = [
    "as_matrix",
    "as_vector",
    "SvdResult",
    "svd_truncated",
    "cholesky",
    "eigh",
    "kmeans",
    "kmeans_trace",
    "solve_lower_transposed",
]

# Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
SYMMETRY_RTOL = 1e-8

# Lloyd iteration cap; matches common library defaults.
KMEANS_MAX_ITER = 300


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and normalize ``a`` to a C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def _check_symmetric(a: np.ndarray, name: str) -> np.ndarray:
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got {a.shape}")
    scale = max(float(np.abs(a).max(initial=0.0)), 1.0)
    if float(np.abs(a - a.T).max(initial=0.0)) > SYMMETRY_RTOL * scale:
        raise InvalidInputError(f"{name} is not symmetric to {SYMMETRY_RTOL:g} relative")
    # Symmetrize exactly so LAPACK sees a bit-symmetric input.
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class SvdResult:
    """Truncated SVD: ``u @ diag(s) @ vt`` is the rank-r approximation.

    ``s`` is descending and nonnegative; columns of ``u`` and rows of ``vt``
    are orthonormal.
    """

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _orthonormalize_columns(cols: np.ndarray, usable: np.ndarray) -> np.ndarray:
    """Gram-Schmidt pass over columns; deficient ones get identity-based fill.

    ``usable[i]`` marks columns with a meaningful direction (positive singular
    value); the rest are replaced by the first identity vectors orthogonal to
    everything accepted so far, keeping the result deterministic.
    """
    dim, r = cols.shape
    out = np.zeros_like(cols)
    accepted = 0
    for i in range(r):
        v = cols[:, i].copy()
        if usable[i]:
            for j in range(accepted):
                v -= (out[:, j] @ v) * out[:, j]
            # Second pass stabilizes near-parallel directions.
            for j in range(accepted):
                v -= (out[:, j] @ v) * out[:, j]
            norm = np.linalg.norm(v)
            if norm > 1e-12:
                out[:, i] = v / norm
                accepted += 1
                continue
        # Fill from the canonical basis.
        for k in range(dim):
            v = np.zeros(dim)
            v[k] = 1.0
            for j in range(i):
                v -= (out[:, j] @ v) * out[:, j]
            norm = np.linalg.norm(v)
            if norm > 0.5:
                out[:, i] = v / norm
                break
        else:  # pragma: no cover - r <= dim guarantees a fill vector exists
            raise InvalidInputError("failed to complete orthonormal basis")
        accepted += 1
    return out


def svd_truncated(a, rank: int) -> SvdResult:
    """Best rank-``rank`` factorization of ``a`` in the Frobenius norm.

    Computed from the eigendecomposition of the smaller Gram matrix. Signs
    follow the convention that the largest-magnitude entry of each left
    singular vector is positive, which makes the output deterministic.
    """
    a = as_matrix(a, "svd input")
    m, n = a.shape
    if rank < 1:
        raise InvalidInputError(f"rank must be >= 1, got {rank}")
    if rank > min(m, n):
        raise InvalidInputError(f"rank {rank} exceeds min(shape)={min(m, n)}")

    if m <= n:
        gram = a @ a.T
    else:
        gram = a.T @ a
    w, vecs = np.linalg.eigh(0.5 * (gram + gram.T))
    # eigh returns ascending order; reverse for descending singular values.
    w = w[::-1][:rank]
    small = vecs[:, ::-1][:, :rank]
    s = np.sqrt(np.clip(w, 0.0, None))

    # The Gram route cannot resolve singular values below ~sqrt(eps) * s_max;
    # anything in that band is noise from a (near-)zero value, so pin it to 0.
    smax = s[0] if s.size else 0.0
    s[s <= 1e-7 * smax] = 0.0
    usable = s > 0.0
    if m <= n:
        u = small
        big = a.T @ u
        big[:, usable] /= s[usable]
        vt = _orthonormalize_columns(big, usable).T
    else:
        v = small
        big = a @ v
        big[:, usable] /= s[usable]
        u = _orthonormalize_columns(big, usable)
        vt = v.T

    # Sign convention: largest-|entry| of each column of u is positive.
    for i in range(rank):
        j = int(np.argmax(np.abs(u[:, i])))
        if u[j, i] < 0:
            u[:, i] = -u[:, i]
            vt[i, :] = -vt[i, :]
    return SvdResult(u=u, s=s, vt=vt)


def cholesky(g, damping: float | None = None) -> np.ndarray:
    """Lower-triangular L with ``L @ L.T == g + damping * I``.

    ``damping=None`` uses the default 1e-8 times the mean diagonal; the
    damping is added exactly once (no retry escalation). Raises
    :class:`SingularMatrixError` with the failing pivot index on breakdown.
    """
    from .errors import SingularMatrixError

    g = as_matrix(g, "cholesky input")
    g = _check_symmetric(g, "cholesky input")
    n = g.shape[0]
    if damping is None:
        damping = 1e-8 * float(np.mean(np.diag(g))) if n else 0.0
    damped = g + damping * np.eye(n)
    c, info = lapack.dpotrf(damped, lower=1)
    if info > 0:
        raise SingularMatrixError("Cholesky factorization failed", pivot=int(info) - 1)
    if info < 0:  # pragma: no cover - indicates an internal call error
        raise InvalidInputError(f"illegal value in Cholesky argument {-info}")
    return np.tril(c)


def eigh(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues ascending, eigenvectors as columns)``.
    """
    a = as_matrix(a, "eigh input")
    a = _check_symmetric(a, "eigh input")
    w, v = np.linalg.eigh(a)
    return w, v


def solve_lower_transposed(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``lower.T @ x = rhs`` for x (lower is lower-triangular)."""
    return solve_triangular(lower, rhs, lower=True, trans="T")


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _seed_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding from the provided generator."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    if k == 1:
        return centers
    d2 = np.einsum("ij,ij->i", points - centers[0], points - centers[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        cand = np.einsum("ij,ij->i", points - centers[j], points - centers[j])
        np.minimum(d2, cand, out=d2)
    return centers


def kmeans_trace(points, n_clusters: int, seed: int) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding; also returns the objective
    (sum of squared distances to assigned centroids) after each iteration.

    Empty clusters are repaired by reassigning the point farthest from its
    current centroid, so every cluster is non-empty on return.
    """
    points = as_matrix(points, "kmeans points")
    n = points.shape[0]
    if n_clusters < 1:
        raise InvalidInputError(f"n_clusters must be >= 1, got {n_clusters}")
    if n_clusters > n:
        raise InvalidInputError(f"n_clusters={n_clusters} exceeds {n} points")

    rng = np.random.default_rng(seed)
    centers = _seed_centers(points, n_clusters, rng)
    labels = np.full(n, -1, dtype=np.int64)
    objectives: list[float] = []
    for _ in range(KMEANS_MAX_ITER):
        d2 = _pairwise_sq_dists(points, centers)
        new_labels = np.argmin(d2, axis=1)  # ties resolve to the lowest index

        counts = np.bincount(new_labels, minlength=n_clusters)
        for empty in np.flatnonzero(counts == 0):
            assigned = d2[np.arange(n), new_labels]
            # Only steal from clusters that keep >= 2 members.
            movable = counts[new_labels] > 1
            if not movable.any():  # pragma: no cover - k <= n rules this out
                movable = np.ones(n, dtype=bool)
            cand = np.where(movable, assigned, -np.inf)
            idx = int(np.argmax(cand))
            counts[new_labels[idx]] -= 1
            new_labels[idx] = empty
            counts[empty] += 1

        for c in range(n_clusters):
            centers[c] = points[new_labels == c].mean(axis=0)
        d2 = _pairwise_sq_dists(points, centers)
        objectives.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, objectives


def kmeans(points, n_clusters: int, seed: int) -> np.ndarray:
    """Cluster rows of ``points``; deterministic for a fixed seed."""
    labels, _ = kmeans_trace(points, n_clusters, seed)
    return labels
