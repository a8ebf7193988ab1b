"""Tracking-type optimal control with discrete-adjoint gradients.

Objective (uniform time weights, states ``k = 1..K``)::

    J(u) = 1/2 dt sum_k |y_k - yd_k|_M^2 + gamma/2 dt sum_k u_k^2

The same code serves the finite-element model and any reduced model; for a
reduced model the tracking term is evaluated in full space on the lifted
difference ``Psi yhat - yd``, which avoids cancellation near the optimum.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .lbfgs import minimize_lbfgs
from .mesh_fem import PdeParams, SpatialOperators
from .rom_galerkin import ReducedModel
from .theta_stepper import (
    FullOrderSystem,
    TimeGrid,
    Trajectory,
    as_control,
    integrate_semilinear,
    solve_semilinear,
)

log = logging.getLogger(__name__)

__all__ = [
    "OcpProblem",
    "OcpResult",
    "reference_control",
    "test_control",
    "make_tracking_problem",
    "objective_and_gradient",
    "optimize",
    "full_objective",
    "run_comparison_experiment",
]


def reference_control(tg: TimeGrid) -> np.ndarray:
    """``2 + 1.5 sin(2 pi t / T)`` sampled at the left interval endpoints."""
    t = tg.times[:-1]
    return 2.0 + 1.5 * np.sin(2.0 * np.pi * t / tg.T)


def test_control(tg: TimeGrid) -> np.ndarray:
    """``2 + cos(2 pi t / T)`` sampled at the left interval endpoints."""
    t = tg.times[:-1]
    return 2.0 + np.cos(2.0 * np.pi * t / tg.T)


class OcpProblem:
    """Reduced-objective tracking problem for one model.

    ``model`` is a :class:`FullOrderSystem` or a :class:`ReducedModel`;
    ``target`` is the full-space desired trajectory and ``y0`` the full-space
    initial state.
    """

    def __init__(self, model, target: Trajectory, gamma: float, y0,
                 tracking_weight: float = 1.0, tol_newton: float = 1e-11):
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        self.model = model
        self.target = target
        self.tg = target.time_grid
        self.gamma = float(gamma)
        self.tracking_weight = float(tracking_weight)
        self.tol_newton = tol_newton
        self.theta = model.params.theta
        self._M = model.ops.M
        self._yd = target.values[1:]
        if isinstance(model, ReducedModel):
            self.y0 = model.restrict(np.asarray(y0, dtype=float))
            self._lift = model.lift
        else:
            self.y0 = np.asarray(y0, dtype=float)
            self._lift = None
        self._cache_u = None
        self._cache = None

    @property
    def is_reduced(self) -> bool:
        return self._lift is not None

    def _forward(self, u):
        u = as_control(u, self.tg)
        if self._cache_u is not None and np.array_equal(u, self._cache_u):
            return self._cache
        store = self.theta == 1.0
        Y, jac = integrate_semilinear(self.model, u, self.y0, self.tg, self.theta,
                                      self.tol_newton, store_jacobians=store)
        self._cache_u, self._cache = u.copy(), (Y, jac)
        return self._cache

    def objective(self, u) -> float:
        u = as_control(u, self.tg)
        Y, _ = self._forward(u)
        R = self._misfit(Y)
        track = np.einsum("ki,ki->", R, (self._M @ R.T).T)
        dt = self.tg.dt
        return float(0.5 * dt * self.tracking_weight * track + 0.5 * self.gamma * dt * (u @ u))

    def _misfit(self, Y):
        # evaluated in full space: the expanded quadratic form cancels badly
        # when the state is close to the target
        Yk = Y[1:]
        return (self._lift(Yk) if self._lift else Yk) - self._yd

    def gradient(self, u) -> np.ndarray:
        u = as_control(u, self.tg)
        if self.theta != 1.0:
            warnings.warn("adjoint gradients need theta = 1; using finite differences",
                          RuntimeWarning, stacklevel=2)
            return self._fd_gradient(u)
        Y, jac = self._forward(u)
        dt = self.tg.dt
        Mt = self.model.mass
        f = self.model.load
        K = self.tg.K_steps
        MR = (self._M @ self._misfit(Y).T).T
        if self._lift:
            MR = MR @ self.model.basis
        grad = self.gamma * dt * u
        p_next = None
        for k in range(K - 1, -1, -1):
            rhs = dt * self.tracking_weight * MR[k]
            if p_next is not None:
                rhs = rhs + (Mt @ p_next) / dt
            p = jac[k].solve(rhs)
            grad[k] += f @ p
            p_next = p
        return grad

    def _fd_gradient(self, u, h: float = 1e-6) -> np.ndarray:
        g = np.empty_like(u)
        for k in range(len(u)):
            e = np.zeros_like(u)
            e[k] = h
            g[k] = (self.objective(u + e) - self.objective(u - e)) / (2 * h)
        return g

    def state(self, u) -> Trajectory:
        Y, _ = self._forward(u)
        return Trajectory(self._lift(Y) if self._lift else Y, self.tg, "W")


@dataclass
class OcpResult:
    u_opt: np.ndarray
    J_opt: float
    iterations: int
    converged: bool
    message: str
    gradient_norm_history: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    wall_time: float = 0.0


def make_tracking_problem(model, reference: Sequence[float], gamma: float, y0,
                          tracking_weight: float = 1.0) -> OcpProblem:
    """Problem whose target is the full-space state for ``reference``.

    The target always comes from the finite-element model, so every model
    chases the same trajectory.
    """
    ops, params = model.ops, model.params
    tg = TimeGrid.from_params(params)
    yd = solve_semilinear(ops, params, as_control(reference, tg), y0, tg)
    return OcpProblem(model, yd, gamma, y0, tracking_weight)


def objective_and_gradient(prob: OcpProblem, u):
    return prob.objective(u), prob.gradient(u)


def optimize(prob: OcpProblem, u0=None, tol: float = 1e-8, max_iter: int = 500,
             memory: int = 10) -> OcpResult:
    """L-BFGS on the reduced objective, started from ``u0`` (default zero)."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    u0 = np.zeros(prob.tg.K_steps) if u0 is None else as_control(u0, prob.tg)
    res = minimize_lbfgs(prob.objective, prob.gradient, u0, tol=tol, max_iter=max_iter,
                         memory=memory)
    if not res.converged:
        log.warning("optimizer stopped: %s", res.message)
    return OcpResult(res.x, res.fun, res.iterations, res.converged, res.message,
                     res.grad_norms, res.fun_values, res.wall_time)


def full_objective(ops: SpatialOperators, params: PdeParams, target: Trajectory,
                   gamma: float, y0, u) -> float:
    """Objective of ``u`` evaluated with the finite-element model."""
    return OcpProblem(FullOrderSystem(ops, params), target, gamma, y0).objective(u)


def run_comparison_experiment(ops: SpatialOperators, params: PdeParams, y0, models,
                              gamma: float = 1e-7, reference=None, tol: float = 1e-8,
                              max_iter: int = 500,
                              relobj: str = "model",
                              progress: Optional[Callable] = None) -> list[dict]:
    """Solve the tracking problem on the full model and on every reduced model.

    ``models`` is a sequence of ``(label, ReducedModel)``.  Returns rows with
    ``label, size, relobj, time, iterations``; the full model comes first with
    ``size = n_dof`` and ``relobj = 0``.  ``relobj="model"`` compares the
    reduced model's own optimal value with the full optimum; ``relobj="fem"``
    re-evaluates the reduced optimum on the full model.  Both values are
    returned as ``relobj_model`` and ``relobj_fem``.  Timings cover the
    optimization only.
    """
    if relobj not in ("fem", "model"):
        raise ValueError("relobj must be 'fem' or 'model'")
    tg = TimeGrid.from_params(params)
    reference = reference_control(tg) if reference is None else reference
    full = FullOrderSystem(ops, params)
    prob_full = make_tracking_problem(full, reference, gamma, y0)
    target = prob_full.target

    t0 = time.perf_counter()
    res_full = optimize(prob_full, tol=tol, max_iter=max_iter)
    t_full = time.perf_counter() - t0
    J_star = res_full.J_opt
    rows = [dict(label="FEM", size=ops.n_dof, relobj=0.0, relobj_model=0.0, relobj_fem=0.0,
                 time=t_full,
                 iterations=res_full.iterations, converged=res_full.converged,
                 J=J_star, u_opt=res_full.u_opt)]
    if progress:
        progress(rows[-1])
    for label, rm in models:
        t0 = time.perf_counter()
        prob = OcpProblem(rm, target, gamma, y0)
        res = optimize(prob, tol=tol, max_iter=max_iter)
        elapsed = time.perf_counter() - t0
        rel = {"model": abs(res.J_opt - J_star) / J_star,
               "fem": abs(prob_full.objective(res.u_opt) - J_star) / J_star}
        J_model = res.J_opt
        rows.append(dict(label=label, size=rm.n, relobj=rel[relobj], relobj_model=rel["model"],
                         relobj_fem=rel["fem"],
                         time=elapsed, iterations=res.iterations, converged=res.converged,
                         J=J_model, u_opt=res.u_opt))
        if progress:
            progress(rows[-1])
    return rows
