"""Frozen linearization at a steady state and the simplified Newton steps.

The discrete state equation on interval ``k`` reads

    E_k(y) = M (y_{k+1} - y_k)/dt + aK y_theta + theta N(y_{k+1})
             + (1 - theta) N(y_k) - F u_k,

with ``y_theta = theta y_{k+1} + (1 - theta) y_k``.  Freezing the Jacobian at a
time-constant ``ybar`` gives the linear operator ``L = aK + C`` with
``C = N'(ybar)``; the first two simplified Newton increments are computed with
the theta stepper for ``L`` and are split into impulse responses so that both
admit an exact discrete convolution representation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mesh_fem import PdeParams, SpatialOperators
from .theta_stepper import (
    StepMatrices,
    TimeGrid,
    Trajectory,
    as_control,
    impulse_responses,
    solve_linear_theta,
    step_matrices,
)

__all__ = [
    "LinearizedOperator",
    "linearize",
    "interval_average",
    "convolve",
    "first_newton_step",
    "first_stage_parts",
    "second_newton_step",
    "second_step_coefficients",
    "second_stage_parts",
    "simplified_newton_iterates",
    "verify_convolution_first",
    "verify_convolution_second",
]


@dataclass(eq=False)
class LinearizedOperator:
    ops: SpatialOperators
    params: PdeParams
    ybar: np.ndarray
    C: object          # N'(ybar) = int 3 b ybar^2 phi_i phi_j
    L: object          # aK + C
    step: StepMatrices
    N_bar: np.ndarray  # N(ybar) as a load vector

    @property
    def time_grid(self) -> TimeGrid:
        return self.step.time_grid

    @property
    def theta(self) -> float:
        return self.step.theta

    @property
    def dt(self) -> float:
        return self.step.dt

    def nonlinear(self, Y: np.ndarray) -> np.ndarray:
        """``N`` applied to each row of ``Y``."""
        Y = np.atleast_2d(Y).T
        return (self.params.b * self.ops.triple_product(Y, Y, Y)).T

    def remainder(self, D: np.ndarray) -> np.ndarray:
        """Row-wise ``C d + N(ybar) - N(ybar + d)`` (minus the Taylor remainder)."""
        D = np.atleast_2d(D)
        return (self.C @ D.T).T + self.N_bar - self.nonlinear(self.ybar + D)


def linearize(ops: SpatialOperators, params: PdeParams, ybar,
              time_grid: Optional[TimeGrid] = None) -> LinearizedOperator:
    """Freeze the Jacobian at ``ybar`` and factorize the step matrices."""
    ybar = np.asarray(ybar, dtype=float)
    if ybar.shape != (ops.n_dof,) or not np.all(np.isfinite(ybar)):
        raise ValueError("ybar must be a finite dof vector")
    tg = time_grid or TimeGrid.from_params(params)
    C = (params.b * ops.cubic_jacobian(ybar)).tocsr()
    L = (params.a * ops.K + C).tocsr()
    step = step_matrices(ops, L, tg, params.theta)
    N_bar = params.b * ops.cubic(ybar)
    return LinearizedOperator(ops, params, ybar, C, L, step, N_bar)


def interval_average(values: np.ndarray, theta: float) -> np.ndarray:
    """``theta x_{k+1} + (1 - theta) x_k`` for every interval (rows ``0..K-1``)."""
    values = np.asarray(values, dtype=float)
    if theta == 1.0:
        return values[1:].copy()
    return theta * values[1:] + (1.0 - theta) * values[:-1]


def convolve(kernels: np.ndarray, coeffs: np.ndarray, dt: float) -> np.ndarray:
    """``dt * sum_i sum_{l<k} kernels[i, k-l] coeffs[l, i]`` for ``k = 0..K``.

    ``kernels`` has shape ``(m, K+1, n)`` and ``coeffs`` shape ``(K, m)``.
    """
    kernels = np.asarray(kernels, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    m, K1, n = kernels.shape
    K = K1 - 1
    if coeffs.shape != (K, m):
        raise ValueError(f"coefficients need shape ({K}, {m}), got {coeffs.shape}")
    out = np.zeros((K1, n))
    # out[k] = dt * sum_l kernels[:, k-l] . coeffs[l]
    for l in range(K):
        out[l + 1:] += dt * np.einsum("ikn,i->kn", kernels[:, 1:K1 - l], coeffs[l])
    return out


def _first_step_source(lin: LinearizedOperator) -> np.ndarray:
    return -(lin.params.a * (lin.ops.K @ lin.ybar) + lin.N_bar)


def first_newton_step(lin: LinearizedOperator, u, y0) -> Trajectory:
    """First increment ``d1``: linear problem for ``L`` started at ``y0 - ybar``."""
    u = as_control(u, lin.time_grid)
    g = _first_step_source(lin)[None, :] + u[:, None] * lin.ops.load_F[None, :]
    return solve_linear_theta(lin.step, g, np.asarray(y0, dtype=float) - lin.ybar)


def first_stage_parts(lin: LinearizedOperator, y0) -> tuple[Trajectory, Trajectory]:
    """Control-free part ``v`` and control impulse response ``w``.

    ``d1_k = v_k + dt sum_{l<k} w_{k-l} u_l`` for every control ``u``.
    """
    v = solve_linear_theta(lin.step, _first_step_source(lin),
                           np.asarray(y0, dtype=float) - lin.ybar)
    w = Trajectory(impulse_responses(lin.step, lin.ops.load_F)[0], lin.time_grid)
    return v, w


def second_newton_step(lin: LinearizedOperator, d1: Trajectory) -> Trajectory:
    """Second increment ``d2`` driven by the Taylor remainder along ``ybar + d1``.

    The source on interval ``k`` is the theta-average of the remainder at
    ``t_k`` and ``t_{k+1}``, which is the exact simplified Newton update of the
    discrete scheme (for theta = 1 only the right endpoint enters).
    """
    g = interval_average(lin.remainder(d1.values), lin.theta)
    return solve_linear_theta(lin.step, g, np.zeros(lin.ops.n_dof))


def second_step_coefficients(lin: LinearizedOperator, d1: Trajectory,
                             first_basis: np.ndarray, nonlin_basis: np.ndarray):
    """Interval coefficient signals for the second-step convolution.

    ``first_basis`` (W-orthonormal columns) expands ``d1``; ``nonlin_basis``
    (H-orthonormal columns) expands ``N(ybar + Pi d1)``.  Returns ``(u, v)``
    with shapes ``(K, p)`` and ``(K, m)``.
    """
    Psi = np.asarray(first_basis, dtype=float).reshape(lin.ops.n_dof, -1)
    Cb = np.asarray(nonlin_basis, dtype=float).reshape(lin.ops.n_dof, -1)
    a = (lin.ops.G_W @ d1.values.T).T @ Psi                 # (K+1, p)
    y1 = lin.ybar + a @ Psi.T
    b = lin.nonlinear(y1) @ Cb                               # (K+1, m)
    return interval_average(a, lin.theta), interval_average(b, lin.theta)


def second_stage_parts(lin: LinearizedOperator, first_basis: np.ndarray,
                       nonlin_basis: np.ndarray, threads: int = 1):
    """Responses ``r``, ``beta`` and ``gamma`` of the second step.

    ``r`` carries the constant source ``N(ybar)`` from zero; ``beta[i]`` is the
    impulse response of ``C psi_i`` and ``gamma[j]`` that of ``M c_j``.
    Returns ``(r, beta, gamma)`` with ``beta``/``gamma`` of shape
    ``(count, K+1, n)``.
    """
    n = lin.ops.n_dof
    Psi = np.asarray(first_basis, dtype=float).reshape(n, -1)
    Cb = np.asarray(nonlin_basis, dtype=float).reshape(n, -1)
    r = solve_linear_theta(lin.step, lin.N_bar, np.zeros(n))
    empty = np.zeros((0, lin.time_grid.K_steps + 1, n))
    beta = impulse_responses(lin.step, lin.C @ Psi, threads) if Psi.shape[1] else empty
    gamma = impulse_responses(lin.step, lin.ops.M @ Cb, threads) if Cb.shape[1] else empty
    return r, beta, gamma


def _relative_errors(ops: SpatialOperators, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-step H-norm of ``A - B`` relative to the largest H-norm of ``A``."""
    D = A - B
    err = np.sqrt(np.maximum(np.einsum("ki,ki->k", D, (ops.M @ D.T).T), 0.0))
    ref = np.sqrt(np.maximum(np.einsum("ki,ki->k", A, (ops.M @ A.T).T), 0.0)).max()
    if ref == 0.0:
        return err
    return err / ref


def verify_convolution_first(lin: LinearizedOperator, u, y0) -> dict:
    """Compare ``d1`` with ``v + dt w * u``; errors are in the H-norm."""
    u = as_control(u, lin.time_grid)
    d1 = first_newton_step(lin, u, y0)
    v, w = first_stage_parts(lin, y0)
    conv = v.values + convolve(w.values[None], u[:, None], lin.dt)
    err = _relative_errors(lin.ops, d1.values, conv)
    return {"max_rel_err": float(err.max()), "errors": err}


def verify_convolution_second(lin: LinearizedOperator, coeff_u: np.ndarray,
                              coeff_v: np.ndarray, first_basis: np.ndarray,
                              nonlin_basis: np.ndarray, parts=None) -> dict:
    """Check ``d2 = r + dt sum beta_i * u^i - dt sum gamma_j * v^j``.

    The left side solves the second-step problem directly with the source
    ``N(ybar) + C Psi u_k - M c v_k`` assembled from the coefficient signals.
    Precomputed ``(r, beta, gamma)`` may be passed as ``parts``.
    """
    n = lin.ops.n_dof
    K = lin.time_grid.K_steps
    Psi = np.asarray(first_basis, dtype=float).reshape(n, -1)
    Cb = np.asarray(nonlin_basis, dtype=float).reshape(n, -1)
    coeff_u = np.asarray(coeff_u, dtype=float).reshape(K, -1)
    coeff_v = np.asarray(coeff_v, dtype=float).reshape(K, -1)
    if coeff_u.shape[1] != Psi.shape[1] or coeff_v.shape[1] != Cb.shape[1]:
        raise ValueError("coefficient signals do not match the basis sizes "
                         f"({coeff_u.shape[1]} vs {Psi.shape[1]}, "
                         f"{coeff_v.shape[1]} vs {Cb.shape[1]})")
    g = lin.N_bar[None, :] + coeff_u @ (lin.C @ Psi).T - coeff_v @ (lin.ops.M @ Cb).T
    direct = solve_linear_theta(lin.step, g, np.zeros(n)).values
    r, beta, gamma = parts if parts is not None else second_stage_parts(lin, Psi, Cb)
    conv = r.values.copy()
    if Psi.shape[1]:
        conv += convolve(beta, coeff_u, lin.dt)
    if Cb.shape[1]:
        conv -= convolve(gamma, coeff_v, lin.dt)
    err = _relative_errors(lin.ops, direct, conv)
    return {"max_rel_err": float(err.max()), "errors": err}


def simplified_newton_iterates(lin: LinearizedOperator, u, y0, n_steps: int = 4):
    """Run ``n_steps`` simplified Newton updates from the constant trajectory ``ybar``.

    Each update solves ``J d = -E(y)`` with the frozen Jacobian.  Returns the
    lists of increments and iterates (both as Trajectories).
    """
    u = as_control(u, lin.time_grid)
    tg = lin.time_grid
    dt, theta = tg.dt, lin.theta
    ops, p = lin.ops, lin.params
    y0 = np.asarray(y0, dtype=float)
    Y = np.tile(lin.ybar, (tg.K_steps + 1, 1))
    increments, iterates = [], []
    for _ in range(n_steps):
        NY = lin.nonlinear(Y)
        AY = p.a * (ops.K @ Y.T).T
        E = ((ops.M @ (Y[1:] - Y[:-1]).T).T / dt + interval_average(AY + NY, theta)
             - u[:, None] * ops.load_F[None, :])
        d = solve_linear_theta(lin.step, -E, y0 - Y[0])
        Y = Y + d.values
        increments.append(d)
        iterates.append(Trajectory(Y.copy(), tg))
    return increments, iterates
