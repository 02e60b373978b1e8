"""Dense kernels: symmetric eigendecomposition caching, randomized SVD,
rank-r truncation and the closed-form weighted reduced-rank fit.

All computation is float64. The weighted fit uses the factoring
``Hs = diag(sqrt(eig)) @ U.T`` and ``Hs_inv = U @ diag(1/sqrt(eig))`` so
that ``Hs_inv @ Hs == I`` and ``|Hs @ E|_F**2 == tr(E.T @ H @ E)``; the
rank-constrained minimizer of the weighted error is then a plain
truncated SVD in the transformed coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

RSVD_OVERSAMPLE = 10
RSVD_POWER_ITERS = 2


def _check_symmetric(h: np.ndarray, tol: float = 1e-10) -> None:
    scale = max(1.0, float(np.linalg.norm(h)))
    if np.linalg.norm(h - h.T) > tol * scale:
        raise ValueError("matrix is not symmetric to tolerance")


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition H = U diag(eigvals) U.T, eigenvalues ascending."""

    eigvecs: np.ndarray
    eigvals: np.ndarray


def sym_eig(h: np.ndarray) -> SymEig:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"expected a square matrix, got {h.shape}")
    _check_symmetric(h)
    try:
        eigvals, eigvecs = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    return SymEig(eigvecs=eigvecs, eigvals=eigvals)


class HOperator:
    """Cached spectral factorization of a strictly positive definite matrix.

    Stores the eigenpairs plus the square-root factors used by the
    shifted inverse and the weighted reduced-rank fit.
    """

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        eig = sym_eig(matrix)
        if eig.eigvals[0] <= 0.0:
            raise NumericalError(
                f"matrix is not positive definite (min eigenvalue {eig.eigvals[0]:.3e})"
            )
        self.matrix = matrix
        self.eigvecs = eig.eigvecs
        self.eigvals = eig.eigvals
        root = np.sqrt(eig.eigvals)
        self.sqrt = root[:, None] * eig.eigvecs.T
        self.inv_sqrt = eig.eigvecs / root[None, :]

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, b: np.ndarray) -> np.ndarray:
        return self.matrix @ b


def shifted_inverse_apply(hop: HOperator, rho: float, b: np.ndarray) -> np.ndarray:
    """Return ``(H + rho*I)^-1 @ b`` via the cached eigendecomposition."""
    if rho <= 0.0:
        raise ValueError(f"rho must be positive, got {rho}")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != hop.dim:
        raise ValueError(f"shape mismatch: operator dim {hop.dim}, rhs {b.shape}")
    coeff = hop.eigvecs.T @ b
    coeff /= (hop.eigvals + rho)[:, None]
    return hop.eigvecs @ coeff


def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # make the first nonzero component of each right singular vector positive
    for j in range(v.shape[1]):
        col = v[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0.0:
            v[:, j] = -col
            u[:, j] = -u[:, j]
    return u, v


def truncated_svd(a: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leading-r singular triplets via eigendecomposition of the smaller Gram.

    Returns ``(U, s, V)`` with orthonormal columns and deterministic signs.
    Directions beyond the numerical rank come back as zero columns with
    zero singular values, which keeps ``U @ diag(s) @ V.T`` well defined.
    """
    a = np.asarray(a, dtype=np.float64)
    rows, cols = a.shape
    if r < 0 or r > min(rows, cols):
        raise ValueError(f"rank {r} out of range for shape {a.shape}")
    if r == 0:
        return np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0))

    def _gram_side(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # mat has cols <= rows; eigendecompose the small Gram
        eig = sym_eig(mat.T @ mat)
        w = eig.eigvals[::-1][:r]
        right = eig.eigvecs[:, ::-1][:, :r].copy()
        s = np.sqrt(np.maximum(w, 0.0))
        left = np.zeros((mat.shape[0], r))
        cutoff = s[0] * 1e-14 if s.size else 0.0
        live = s > cutoff
        if np.any(live):
            left[:, live] = (mat @ right[:, live]) / s[live]
        right[:, ~live] = 0.0
        return left, np.where(live, s, 0.0), right

    if cols <= rows:
        u, s, v = _gram_side(a)
    else:
        v, s, u = _gram_side(a.T)
    u, v = _fix_signs(u, v)
    return u, s, v


def randomized_svd(
    a: np.ndarray,
    r: int,
    oversample: int = RSVD_OVERSAMPLE,
    power_iters: int = RSVD_POWER_ITERS,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sketch-based truncated SVD with oversampling and power iterations.

    Deterministic given ``seed``: the Gaussian sketch is the only source
    of randomness. Returns ``(U_r, s_r, V_r)``.
    """
    a = np.asarray(a, dtype=np.float64)
    rows, cols = a.shape
    if r > min(rows, cols):
        raise ValueError(f"rank {r} exceeds min dimension of {a.shape}")
    if r == 0:
        return np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0))
    rng = np.random.default_rng(seed)
    width = min(r + oversample, min(rows, cols))
    sketch = rng.standard_normal((cols, width))
    q, _ = np.linalg.qr(a @ sketch)
    for _ in range(power_iters):
        q, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ q)
    b = q.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    full_u = q @ ub
    u, v = _fix_signs(full_u[:, :r].copy(), vt[:r, :].T.copy())
    return u, s[:r].copy(), v


def rank_r_project(
    a: np.ndarray,
    r: int,
    mode: str = "exact",
    oversample: int = RSVD_OVERSAMPLE,
    power_iters: int = RSVD_POWER_ITERS,
    seed: int = 0,
) -> np.ndarray:
    """Best (exact mode) or near-best (randomized mode) rank-r approximation."""
    a = np.asarray(a, dtype=np.float64)
    rows, cols = a.shape
    if r < 0 or r > min(rows, cols):
        raise ValueError(f"rank {r} out of range for shape {a.shape}")
    if r == min(rows, cols):
        return a.copy()
    if mode == "exact":
        if cols <= rows:
            _, _, v = truncated_svd(a, r)
            return (a @ v) @ v.T
        _, _, u = truncated_svd(a.T, r)
        return u @ (u.T @ a)
    if mode == "randomized":
        u, s, v = randomized_svd(a, r, oversample, power_iters, seed)
        return (u * s) @ v.T
    raise ValueError(f"unknown mode {mode!r}")


def rank_r_weighted_fit(
    hop: HOperator,
    residual: np.ndarray,
    r: int,
    mode: str = "exact",
    seed: int = 0,
) -> np.ndarray:
    """argmin over rank <= r of |Hs (residual - L)|_F, in closed form.

    ``Hs`` is the cached square-root factor of the (positive definite)
    weighting matrix; exact mode is the Frobenius-optimal solution.
    """
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape[0] != hop.dim:
        raise ValueError(
            f"shape mismatch: operator dim {hop.dim}, residual {residual.shape}"
        )
    if r == 0:
        return np.zeros_like(residual)
    projected = rank_r_project(hop.sqrt @ residual, r, mode=mode, seed=seed)
    return hop.inv_sqrt @ projected


def numerical_rank(a: np.ndarray, rel_cutoff: float = 1e-8) -> int:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0 or not np.any(a):
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.count_nonzero(s > rel_cutoff * s[0]))
