"""
Thin-SVD kernel for the ridge-regularised projection P^g = Z (Z'Z + g I)^-1 Z'.

With Z = U D V', P^g = U diag(w) U' where w_l = d_l^2 / (d_l^2 + g), so every
quantity below is a reweighting of the same factors and costs O(n r).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from .config import DEFAULT_MATERIALIZE_THRESHOLD
from .errors import DimensionError, DomainError, ResourceError, ZeroRankError

logger = logging.getLogger(__name__)

STREAM_BLOCK_ROWS = 256


@dataclass(frozen=True)
class RidgeKernel:
    """Left singular vectors and singular values of the instrument matrix."""

    U: np.ndarray
    d: np.ndarray
    r: int
    n: int
    k: int
    rank_tol: float
    materialize_threshold: int = DEFAULT_MATERIALIZE_THRESHOLD

    @property
    def full_column_rank(self) -> bool:
        return self.r == self.k


def build_kernel(Z, materialize_threshold: Optional[int] = None) -> RidgeKernel:
    """
    Factor Z once with a thin SVD.

    The numerical rank counts singular values above
    eps * max(n, k) * d_max.

    Raises:
        ZeroRankError: if Z is identically zero
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise DimensionError(f"Z must be a matrix, got shape {Z.shape}")
    n, k = Z.shape
    if n < 2:
        raise DimensionError(f"need at least 2 observations, got {n}")
    if not np.all(np.isfinite(Z)):
        raise DomainError("Z contains non-finite entries")

    try:
        U, d, _ = linalg.svd(Z, full_matrices=False, check_finite=False)
    except linalg.LinAlgError:
        logger.warning("gesdd did not converge, retrying with gesvd")
        U, d, _ = linalg.svd(
            Z, full_matrices=False, check_finite=False, lapack_driver="gesvd"
        )

    d_max = d[0] if d.size else 0.0
    if d_max <= 0:
        raise ZeroRankError("instrument matrix is identically zero")

    rank_tol = np.finfo(float).eps * max(n, k) * d_max
    r = int(np.sum(d > rank_tol))
    logger.debug(f"Kernel built: n={n}, k={k}, r={r}, d_max={d_max:.6g}")

    return RidgeKernel(
        U=np.ascontiguousarray(U[:, :r]),
        d=d[:r].copy(),
        r=r,
        n=n,
        k=k,
        rank_tol=float(rank_tol),
        materialize_threshold=materialize_threshold or DEFAULT_MATERIALIZE_THRESHOLD,
    )


def kernel_summary(kern: RidgeKernel) -> dict:
    return {
        "n": kern.n,
        "k": kern.k,
        "r": kern.r,
        "d_max": float(kern.d[0]),
        "d_min": float(kern.d[-1]),
        "rank_tol": kern.rank_tol,
    }


def shrinkage_weights(kern: RidgeKernel, gamma: float) -> np.ndarray:
    """w_l = d_l^2 / (d_l^2 + gamma), each in (0, 1]."""
    gamma = float(gamma)
    if not np.isfinite(gamma) or gamma < 0:
        raise DomainError(f"penalty must be finite and non-negative, got {gamma}")
    d2 = kern.d**2
    return d2 / (d2 + gamma)


def ridge_diag(kern: RidgeKernel, gamma: float) -> np.ndarray:
    """Diagonal of P^gamma."""
    w = shrinkage_weights(kern, gamma)
    return (kern.U**2) @ w


def offdiag_sq_sum(kern: RidgeKernel, gamma: float) -> float:
    """S(gamma): sum of squared off-diagonal entries of P^gamma."""
    w = shrinkage_weights(kern, gamma)
    diag = (kern.U**2) @ w
    return max(float(np.sum(w**2) - np.sum(diag**2)), 0.0)


def quad_form_offdiag(kern: RidgeKernel, gamma: float, e) -> float:
    """Sum over i != j of P^gamma_ij e_i e_j."""
    e = _check_vector(kern, e)
    w = shrinkage_weights(kern, gamma)
    diag = (kern.U**2) @ w
    Ue = kern.U.T @ e
    return float(np.sum(w * Ue**2) - np.sum(diag * e**2))


def ridge_projection_rows(kern: RidgeKernel, gamma: float, rows) -> np.ndarray:
    """Rows of P^gamma, shape (len(rows), n)."""
    w = shrinkage_weights(kern, gamma)
    return (kern.U[rows] * w) @ kern.U.T


def _block_sum(kern: RidgeKernel, gamma: float, a: np.ndarray, start: int, stop: int) -> float:
    rows = np.arange(start, stop)
    block = ridge_projection_rows(kern, gamma, rows)
    block[np.arange(stop - start), rows] = 0.0
    return float(a[start:stop] @ ((block**2) @ a))


def hadamard_sq_quad(kern: RidgeKernel, gamma: float, e, n_jobs: int = 1) -> float:
    """
    Sum over i != j of (P^gamma_ij)^2 e_i^2 e_j^2.

    Uses the materialised matrix when n is within the threshold, otherwise
    streams fixed blocks of rows. Block boundaries do not depend on n_jobs
    and partial sums are reduced in block order, so the result is the same
    for any worker count.
    """
    e = _check_vector(kern, e)
    a = e**2

    if kern.n <= kern.materialize_threshold:
        P2 = materialize(kern, gamma) ** 2
        np.fill_diagonal(P2, 0.0)
        return max(float(a @ (P2 @ a)), 0.0)

    bounds = [
        (start, min(start + STREAM_BLOCK_ROWS, kern.n))
        for start in range(0, kern.n, STREAM_BLOCK_ROWS)
    ]
    logger.debug(f"Streaming {len(bounds)} row blocks for n={kern.n}")
    if n_jobs == 1:
        partials = [_block_sum(kern, gamma, a, lo, hi) for lo, hi in bounds]
    else:
        partials = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(_block_sum)(kern, gamma, a, lo, hi) for lo, hi in bounds
        )
    return max(float(np.sum(np.asarray(partials))), 0.0)


def materialize(kern: RidgeKernel, gamma: float, force: bool = False) -> np.ndarray:
    """
    The full n x n matrix U diag(w) U'.

    Raises:
        ResourceError: if n exceeds the threshold and force is not set
    """
    if kern.n > kern.materialize_threshold and not force:
        raise ResourceError(
            f"refusing to materialise a {kern.n} x {kern.n} projection "
            f"(threshold {kern.materialize_threshold}); pass force=True"
        )
    w = shrinkage_weights(kern, gamma)
    P = (kern.U * w) @ kern.U.T
    return 0.5 * (P + P.T)


def _check_vector(kern: RidgeKernel, e: Sequence[float]) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.ndim != 1 or e.shape[0] != kern.n:
        raise DimensionError(f"expected a vector of length {kern.n}, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise DomainError("residual vector contains non-finite entries")
    return e
