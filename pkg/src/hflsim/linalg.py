"""Dense linear algebra primitives for the simulator.

Matrices are plain 2-D float64 numpy arrays (row-major). All public
operations validate their inputs and guarantee finite outputs, so the
rest of the simulator can assume well-formed numerics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class SvdError(RuntimeError):
    """Singular value decomposition failed."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and coerce `a` into a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with shape validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} != {b.shape[0]}"
        )
    out = a @ b
    if not np.isfinite(out).all():
        raise ValueError("matmul produced non-finite entries")
    return out


@dataclass(frozen=True)
class SvdFactors:
    """Full SVD factors u (m x r), sigma (r,), vt (r x n) with r = min(m, n).

    Columns of u are orthonormal, sigma is non-negative and non-increasing,
    and each u column is sign-normalized so its largest-magnitude entry
    (lowest row index on ties) is non-negative.
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.sigma.shape[0]

    def validate(self, atol: float = 1e-8) -> None:
        r = self.rank_bound
        if self.u.shape[1] != r or self.vt.shape[0] != r:
            raise ShapeError(
                f"inconsistent factor shapes u={self.u.shape} sigma={self.sigma.shape} vt={self.vt.shape}"
            )
        if np.any(self.sigma < 0):
            raise ValueError("negative singular value")
        if np.any(np.diff(self.sigma) > 0):
            raise ValueError("singular values not sorted non-increasing")
        if np.max(np.abs(self.u.T @ self.u - np.eye(r))) > atol:
            raise ValueError("u columns not orthonormal")
        if np.max(np.abs(self.vt @ self.vt.T - np.eye(r))) > atol:
            raise ValueError("vt rows not orthonormal")


def _apply_sign_convention(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # np.argmax returns the lowest index among ties, matching the convention.
    pivot = np.argmax(np.abs(u), axis=0)
    flip = u[pivot, np.arange(u.shape[1])] < 0
    u = u.copy()
    vt = vt.copy()
    u[:, flip] *= -1.0
    vt[flip, :] *= -1.0
    return u, vt


def svd(m: np.ndarray) -> SvdFactors:
    """Full singular value decomposition with a deterministic sign convention.

    Returns factors with r = min(m, n) columns/rows; u keeps orthonormal
    columns even for rank-deficient input. Deterministic for identical input.
    """
    m = as_matrix(m, "svd input")
    try:
        u, sigma, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge for shape {m.shape}: {exc}") from exc
    u, vt = _apply_sign_convention(u, vt)
    factors = SvdFactors(u=u, sigma=sigma, vt=vt)
    if not (np.isfinite(u).all() and np.isfinite(sigma).all() and np.isfinite(vt).all()):
        raise SvdError("SVD produced non-finite factors")
    return factors


def truncate(factors: SvdFactors, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First k singular triplets: (u[:, :k], sigma[:k], vt[:k, :])."""
    r = factors.rank_bound
    if not 1 <= k <= r:
        raise ValueError(f"truncation rank k={k} outside valid range [1, {r}]")
    return factors.u[:, :k], factors.sigma[:k], factors.vt[:k, :]
