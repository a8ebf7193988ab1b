"""Galerkin reduced models on a W-orthonormal basis.

The cubic term is evaluated exactly on the reduced space: either by
interpolating the basis to the quadrature points (``Z = P Psi``) and
integrating, or through the precomputed fourth-order tensor
``T[p,q,r,s] = sum_x w_x z_p z_q z_r z_s``; both give the same values up to
roundoff.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla

from .linalg import factor_spd
from .mesh_fem import PdeParams, SpatialOperators
from .newton_pipeline import LinearizedOperator, interval_average
from .pod_core import PodBasis
from .theta_stepper import (
    TimeGrid,
    Trajectory,
    as_control,
    integrate_semilinear,
    solve_linear_theta,
    step_matrices,
)

__all__ = [
    "ReducedModel",
    "reduce_model",
    "solve_reduced_semilinear",
    "solve_reduced_newton_steps",
    "lift",
    "restrict",
    "quartic_tensor",
]

TENSOR_MAX_SIZE = 40


def _sym(A):
    return 0.5 * (A + A.T)


def quartic_tensor(Z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``T[p,q,r,s] = sum_x w_x Z[x,p] Z[x,q] Z[x,r] Z[x,s]``.

    Built from the products over unordered pairs ``p <= q`` only, which cuts
    the work by about four.
    """
    k = Z.shape[1]
    iu, ju = np.triu_indices(k)
    Q = Z[:, iu] * Z[:, ju]                       # (nq, k(k+1)/2)
    Tp = Q.T @ (w[:, None] * Q)                   # pair-by-pair moments
    pair = np.empty((k, k), dtype=int)
    pair[iu, ju] = np.arange(len(iu))
    pair[ju, iu] = pair[iu, ju]
    return Tp[pair[:, :, None, None], pair[None, None, :, :]]


@dataclass(eq=False)
class ReducedModel:
    """Reduced operators for ``y = Psi yhat``; implements the integrator's system interface."""

    ops: SpatialOperators
    params: PdeParams
    basis: np.ndarray
    mass: np.ndarray
    K_r: np.ndarray
    diffusion: np.ndarray
    load: np.ndarray
    Z: np.ndarray = field(repr=False)
    qw: np.ndarray = field(repr=False)
    tensor: Optional[np.ndarray] = field(default=None, repr=False)
    C_r: Optional[np.ndarray] = None
    _mass_cf: object = field(default=None, repr=False)
    _last: object = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.basis.shape[1]

    def _contracted(self, yhat):
        # T : (yhat x yhat), cached because the residual and the Jacobian are
        # evaluated at the same point
        if self._last is not None and np.array_equal(self._last[0], yhat):
            return self._last[1]
        k = self.n
        T2 = (self.tensor.reshape(k * k, k * k) @ np.outer(yhat, yhat).ravel()).reshape(k, k)
        self._last = (np.array(yhat, copy=True), T2)
        return T2

    def nonlinear(self, yhat):
        b = self.params.b
        if self.tensor is not None:
            return b * (self._contracted(yhat) @ yhat)
        yq = self.Z @ yhat
        return b * (self.Z.T @ (self.qw * yq ** 3))

    def nonlinear_jacobian(self, yhat):
        b = self.params.b
        if self.tensor is not None:
            return 3.0 * b * self._contracted(yhat)
        yq = self.Z @ yhat
        return 3.0 * b * (self.Z.T @ ((self.qw * yq ** 2)[:, None] * self.Z))

    def factor(self, A):
        return factor_spd(_sym(np.asarray(A)))

    def dual_norm(self, r) -> float:
        if self._mass_cf is None:
            self._mass_cf = sla.cho_factor(self.mass)
        return float(np.sqrt(max(r @ sla.cho_solve(self._mass_cf, r), 0.0)))

    def lift(self, coeffs: np.ndarray) -> np.ndarray:
        return np.asarray(coeffs) @ self.basis.T

    def restrict(self, y: np.ndarray) -> np.ndarray:
        return (self.ops.G_W @ np.atleast_2d(y).T).T @ self.basis if np.ndim(y) == 2 \
            else self.basis.T @ (self.ops.G_W @ y)


def reduce_model(ops: SpatialOperators, params: PdeParams, basis: Union[PodBasis, np.ndarray],
                 lin: Optional[LinearizedOperator] = None,
                 use_tensor: Union[bool, str] = "auto") -> ReducedModel:
    """Project the semilinear problem onto the span of ``basis``.

    ``use_tensor="auto"`` precomputes the cubic tensor for sizes up to 40.
    """
    Psi = basis.vectors if isinstance(basis, PodBasis) else np.asarray(basis, dtype=float)
    if Psi.ndim != 2 or Psi.shape[0] != ops.n_dof or Psi.shape[1] < 1:
        raise ValueError(f"basis must have shape ({ops.n_dof}, k) with k >= 1")
    fem = ops.grid._fem
    M_r = _sym(Psi.T @ (ops.M @ Psi))
    K_r = _sym(Psi.T @ (ops.K @ Psi))
    Z = np.asarray(fem.interp @ Psi)
    qw = fem.qw_flat
    k = Psi.shape[1]
    tensor = None
    if use_tensor is True or (use_tensor == "auto" and k <= TENSOR_MAX_SIZE):
        tensor = quartic_tensor(Z, qw)
    C_r = _sym(Psi.T @ (lin.C @ Psi)) if lin is not None else None
    return ReducedModel(ops, params, Psi, M_r, K_r, params.a * K_r, Psi.T @ ops.load_F,
                        Z, qw, tensor, C_r)


def lift(rm: ReducedModel, traj: Trajectory) -> Trajectory:
    if traj.n_dof != rm.n:
        raise ValueError(f"reduced trajectory has {traj.n_dof} coefficients, basis has {rm.n}")
    return Trajectory(rm.lift(traj.values), traj.time_grid, "W")


def restrict(rm: ReducedModel, traj: Trajectory) -> Trajectory:
    if traj.n_dof != rm.ops.n_dof:
        raise ValueError("trajectory does not live on the model's grid")
    return Trajectory(rm.restrict(traj.values), traj.time_grid, "W")


def solve_reduced_semilinear(rm: ReducedModel, u, y0, time_grid: Optional[TimeGrid] = None,
                             tol: float = 1e-11, max_iter: int = 25) -> Trajectory:
    """Reduced theta-scheme; ``y0`` is a full dof vector restricted by W-projection."""
    tg = time_grid or TimeGrid.from_params(rm.params)
    yhat0 = rm.restrict(np.asarray(y0, dtype=float))
    values, _ = integrate_semilinear(rm, u, yhat0, tg, rm.params.theta, tol, max_iter)
    return Trajectory(values, tg, "W")


def solve_reduced_newton_steps(rm: ReducedModel, lin: LinearizedOperator, u, y0,
                               second_basis: Optional[np.ndarray] = None,
                               nonlin_basis: Optional[np.ndarray] = None):
    """Galerkin versions of the first and second simplified Newton steps.

    ``d1`` lives in the span of ``rm.basis``; ``d2`` in ``second_basis``
    (defaults to the same space).  With ``nonlin_basis`` the cubic term along
    ``ybar + d1`` is replaced by its H-projection onto that basis.  Returns the
    reduced trajectories ``(d1_hat, d2_hat)``.
    """
    tg = lin.time_grid
    u = as_control(u, tg)
    ops, p = rm.ops, rm.params
    Psi = rm.basis
    Theta = Psi if second_basis is None else np.asarray(second_basis, dtype=float)

    def reduced_step(B):
        return step_matrices(_sym(B.T @ (ops.M @ B)), _sym(B.T @ (lin.L @ B)), tg, lin.theta)

    src = -(p.a * (ops.K @ lin.ybar) + lin.N_bar)
    g1 = (src @ Psi)[None, :] + u[:, None] * rm.load[None, :]
    d1_0 = Psi.T @ (ops.G_W @ (np.asarray(y0, dtype=float) - lin.ybar))
    d1 = solve_linear_theta(reduced_step(Psi), g1, d1_0)

    D1 = rm.lift(d1.values)
    NY = lin.nonlinear(lin.ybar + D1)
    if nonlin_basis is not None:
        Cb = np.asarray(nonlin_basis, dtype=float)
        NY = (NY @ Cb) @ (ops.M @ Cb).T
    h = (lin.C @ D1.T).T + lin.N_bar - NY
    g2 = interval_average(h, lin.theta) @ Theta
    d2 = solve_linear_theta(reduced_step(Theta), g2, np.zeros(Theta.shape[1]))
    return d1, d2
