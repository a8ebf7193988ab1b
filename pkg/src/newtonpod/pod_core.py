"""Proper orthogonal decomposition in a weighted inner product.

For a snapshot matrix ``S`` (columns) and Gram matrix ``G`` the POD modes are
the eigenvectors of ``R = S S^T G`` (``G``-self-adjoint).  With fewer
snapshots than unknowns the method of snapshots is used (eigenproblem of the
correlation matrix ``S^T G S``); otherwise the spatial problem is solved after a
Cholesky change of variables ``G = R^T R``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .linalg import dense_cholesky_factor

__all__ = [
    "PodBasis",
    "EmptyBasisError",
    "correlation_matrix",
    "pod_basis",
    "project",
    "projection_residuals",
    "reconstruction_error",
    "orthonormality_error",
    "g_orthonormalize",
]

_RANK_FLOOR = 1e-13


class EmptyBasisError(ValueError):
    pass


@dataclass
class PodBasis:
    """``vectors`` holds the modes as columns; ``eigenvalues`` keeps the full spectrum."""

    vectors: np.ndarray
    eigenvalues: np.ndarray
    gram_tag: str = "W"
    cutoff_used: Optional[float] = None

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_dof(self) -> int:
        return self.vectors.shape[0]

    def truncated(self, k: int) -> "PodBasis":
        if not 0 <= k <= self.size:
            raise ValueError(f"cannot truncate a basis of size {self.size} to {k}")
        return replace(self, vectors=self.vectors[:, :k].copy())

    def tail_sum(self, k: Optional[int] = None) -> float:
        k = self.size if k is None else k
        return float(self.eigenvalues[k:].sum())


def _as_columns(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if S.ndim != 2 or S.shape[1] < 1:
        raise ValueError("snapshot set must contain at least one column")
    return S


def correlation_matrix(S, G) -> np.ndarray:
    """``K[i, j] = v_i^T G v_j`` for the snapshot columns ``v_i``."""
    S = _as_columns(S)
    if G.shape != (S.shape[0], S.shape[0]):
        raise ValueError(f"Gram matrix shape {G.shape} does not match {S.shape[0]} dofs")
    K = S.T @ np.asarray(G @ S)
    return 0.5 * (K + K.T)


def g_orthonormalize(Psi: np.ndarray, G, passes: int = 2) -> np.ndarray:
    """Cholesky-QR in the ``G`` inner product (repeated for stability)."""
    for _ in range(passes):
        P = Psi.T @ np.asarray(G @ Psi)
        P = 0.5 * (P + P.T)
        Lc = sla.cholesky(P, lower=True)
        Psi = sla.solve_triangular(Lc, Psi.T, lower=True).T
    return Psi


def pod_basis(S, G, cutoff: Optional[float] = None, rank: Optional[int] = None,
              gram_tag: str = "W", weights=None) -> PodBasis:
    """POD modes of the snapshot columns of ``S`` in the ``G`` inner product.

    ``cutoff`` is a singular-value threshold: modes with
    ``lambda <= max(cutoff**2, 1e-13 lambda_max)`` are dropped.  ``rank``
    instead keeps the leading ``rank`` modes (still subject to the
    numerical-rank floor).  ``weights`` scales the snapshot
    contributions (eigenvalues of ``S W S^T G``).
    """
    S = _as_columns(S)
    if cutoff is None and rank is None:
        raise ValueError("give either a cutoff or a rank")
    if cutoff is not None and not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    if rank is not None and not 1 <= rank <= S.shape[1]:
        raise ValueError(f"rank must lie in [1, {S.shape[1]}], got {rank}")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (S.shape[1],) or np.any(weights < 0):
            raise ValueError("weights need one non-negative value per snapshot")
        S = S * np.sqrt(weights)[None, :]
    n_dof, n_snap = S.shape
    if G.shape != (n_dof, n_dof):
        raise ValueError(f"Gram matrix shape {G.shape} does not match {n_dof} dofs")

    if n_snap <= n_dof:
        lam, V = np.linalg.eigh(correlation_matrix(S, G))
        lam, V = lam[::-1], V[:, ::-1]
        lam = np.clip(lam, 0.0, None)
        keep = _retained(lam, cutoff, rank)
        Psi = S @ (V[:, :keep] / np.sqrt(lam[:keep]))
    else:
        R = dense_cholesky_factor(G)
        X = R @ S
        lam, U = np.linalg.eigh(X @ X.T)
        lam, U = lam[::-1], U[:, ::-1]
        lam = np.clip(lam, 0.0, None)
        keep = _retained(lam, cutoff, rank)
        Psi = sla.solve_triangular(R, U[:, :keep], lower=False)
    if keep:
        Psi = g_orthonormalize(Psi, G)
    return PodBasis(Psi, lam, gram_tag, cutoff)


def _retained(lam: np.ndarray, cutoff, rank) -> int:
    if lam.size == 0 or lam[0] <= 0.0:
        raise EmptyBasisError("empty basis: all snapshots vanish")
    thresh = _RANK_FLOOR * lam[0]
    if cutoff is not None:
        thresh = max(thresh, cutoff ** 2)
    keep = int(np.count_nonzero(lam > thresh))
    if rank is not None:
        keep = min(keep, rank)
    if keep == 0:
        raise EmptyBasisError(
            f"empty basis: all singular values are below the cutoff {cutoff:g} "
            f"(largest {lam[0]:.3e})")
    return keep


def _check(B: PodBasis, x: np.ndarray, G, gram_tag: Optional[str]):
    if gram_tag is not None and gram_tag != B.gram_tag:
        raise ValueError(f"basis uses the {B.gram_tag} inner product, not {gram_tag}")
    if x.shape[0] != B.n_dof or G.shape != (B.n_dof, B.n_dof):
        raise ValueError("dimension mismatch between basis, vector and Gram matrix")


def project(B: PodBasis, x, G, gram_tag: Optional[str] = None):
    """Coefficients ``Psi^T G x`` and the reconstruction ``Psi c``.

    ``x`` may be a vector or a matrix of columns.
    """
    x = np.asarray(x, dtype=float)
    _check(B, x, G, gram_tag)
    c = B.vectors.T @ np.asarray(G @ x)
    return c, B.vectors @ c


def projection_residuals(B: PodBasis, S, G) -> np.ndarray:
    """Squared ``G``-norms of ``v - Pi v`` for every snapshot column."""
    S = _as_columns(S)
    _, rec = project(B, S, G)
    D = S - rec
    return np.einsum("ij,ij->j", D, np.asarray(G @ D))


def reconstruction_error(B: PodBasis, S, G) -> float:
    """``sum_l |v_l - Pi v_l|_G^2``; equals the eigenvalue tail for the snapshots of ``B``."""
    return float(projection_residuals(B, S, G).sum())


def orthonormality_error(Psi: np.ndarray, G) -> float:
    P = Psi.T @ np.asarray(G @ Psi)
    return float(np.abs(P - np.eye(P.shape[0])).max()) if P.size else 0.0
