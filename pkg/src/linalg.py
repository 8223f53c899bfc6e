"""
Dense linear algebra primitives: SVD with a fixed sign convention, norms and
best rank-r approximations. Everything works in float64.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import MatrixValidationError, NumericError

logger = logging.getLogger(__name__)


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validates and widens ``m`` to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise MatrixValidationError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise MatrixValidationError(f"{name}: empty matrix of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MatrixValidationError(f"{name}: non-finite entries in {arr.shape[0]}x{arr.shape[1]} matrix")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise MatrixValidationError(f"{name}: expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MatrixValidationError(f"{name}: non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray  # d_out x p
    sigma: np.ndarray  # p, non-increasing
    v: np.ndarray  # d_in x p

    @property
    def rank_bound(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self, r: int | None = None) -> np.ndarray:
        r = self.rank_bound if r is None else r
        return (self.u[:, :r] * self.sigma[:r]) @ self.v[:, :r].T


def svd(m) -> SvdFactors:
    """
    Thin SVD. Signs are fixed so the largest-magnitude entry of every left
    singular vector is positive (first index wins on ties).
    """
    x = as_matrix(m)
    try:
        u, sigma, vt = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"SVD did not converge for {x.shape[0]}x{x.shape[1]} matrix: {e}") from e

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    v = vt.T * signs
    return SvdFactors(u=u, sigma=sigma, v=v)


def singular_values(m) -> np.ndarray:
    x = as_matrix(m)
    try:
        return np.linalg.svd(x, compute_uv=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"SVD did not converge for {x.shape[0]}x{x.shape[1]} matrix: {e}") from e


def tail_energy(sigma, r: int) -> float:
    """(sum_{i>r} sigma_i^2)^(1/2): the Frobenius error of the best rank-r approximation."""
    s = as_vector(sigma, "sigma")
    if np.any(np.diff(s) > 0):
        raise MatrixValidationError("sigma must be sorted in non-increasing order")
    if not 0 <= r <= s.shape[0]:
        raise MatrixValidationError(f"rank {r} outside [0, {s.shape[0]}]")
    return float(np.sqrt(np.sum(np.square(s[r:]))))


def best_rank_r(m, r: int) -> np.ndarray:
    x = as_matrix(m)
    p = min(x.shape)
    if not 1 <= r <= p:
        raise MatrixValidationError(f"rank {r} outside [1, {p}] for {x.shape[0]}x{x.shape[1]} matrix")
    return svd(x).reconstruct(r)


def frobenius_norm(m) -> float:
    return float(np.linalg.norm(as_matrix(m), "fro"))


def l1_norm(v) -> float:
    return float(np.sum(np.abs(as_vector(v))))


def nuclear_norm(m) -> float:
    """Sum of singular values."""
    return float(np.sum(singular_values(m)))


def numerical_rank(m, tol: float = 1e-9) -> int:
    return int(np.count_nonzero(singular_values(m) > tol))
