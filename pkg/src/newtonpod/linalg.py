"""Factorizations shared by the full-order and reduced solvers."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class _SparseSPD:
    def __init__(self, A):
        # symmetric ordering without row pivoting: the LU pivots are the
        # LDL^T pivots, so positivity of diag(U) certifies definiteness
        self.lu = spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A",
                            diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        piv = self.lu.U.diagonal()
        if not np.all(piv > 0):
            raise NotPositiveDefinite("matrix is not positive definite")
        self.shape = A.shape

    def solve(self, b):
        return self.lu.solve(np.asarray(b, dtype=float))


class _DenseSPD:
    def __init__(self, A):
        try:
            self.cf = sla.cho_factor(np.asarray(A, dtype=float))
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        self.shape = A.shape

    def solve(self, b):
        return sla.cho_solve(self.cf, b)


class _General:
    def __init__(self, A):
        if sp.issparse(A):
            try:
                self._lu = spla.splu(sp.csc_matrix(A))
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(str(exc)) from exc
            self._solve = self._lu.solve
        else:
            A = np.asarray(A, dtype=float)
            lu = sla.lu_factor(A)
            if np.any(np.diag(lu[0]) == 0.0):
                raise np.linalg.LinAlgError("matrix is singular")
            self._solve = lambda b: sla.lu_solve(lu, b)
        self.shape = A.shape

    def solve(self, b):
        return self._solve(np.asarray(b, dtype=float))


def factor_spd(A):
    """Factorize a symmetric positive definite matrix (sparse or dense)."""
    if sp.issparse(A):
        return _SparseSPD(A)
    return _DenseSPD(np.atleast_2d(A))


def factor(A):
    """LU factorization for possibly indefinite nonsingular matrices."""
    if not sp.issparse(A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
    return _General(A)


def dense_cholesky_factor(G) -> np.ndarray:
    """Upper Cholesky factor ``R`` with ``G = R^T R``."""
    G = G.toarray() if sp.issparse(G) else np.asarray(G, dtype=float)
    return sla.cholesky(G, lower=False)
