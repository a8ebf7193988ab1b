"""Theta-scheme time integration.

Linear problems are written as ``M (y_{k+1} - y_k)/dt + L (theta y_{k+1} +
(1 - theta) y_k) = g_k``, i.e. ``A_impl y_{k+1} = A_expl y_k + dt g_k`` with
``A_impl = M + dt theta L`` and ``A_expl = M - dt (1 - theta) L``.  Sources are
per-interval and are not theta-averaged.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .linalg import NotPositiveDefinite, factor, factor_spd
from .mesh_fem import PdeParams, SpatialOperators

log = logging.getLogger(__name__)

__all__ = [
    "TimeGrid",
    "Trajectory",
    "StepMatrices",
    "SolverError",
    "FullOrderSystem",
    "step_matrices",
    "solve_linear_theta",
    "solve_impulse_theta",
    "impulse_responses",
    "integrate_semilinear",
    "solve_semilinear",
    "steady_state",
    "compute_steady_state",
    "as_control",
]


class SolverError(RuntimeError):
    """Time stepping or Newton failure; ``step`` is the failing interval index."""

    def __init__(self, message: str, step: Optional[int] = None, residual: Optional[float] = None):
        super().__init__(message)
        self.step = step
        self.residual = residual


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K_steps: int

    def __post_init__(self):
        if not self.T > 0 or self.K_steps < 1:
            raise ValueError("TimeGrid needs T > 0 and K_steps >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.K_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K_steps + 1)

    @classmethod
    def from_params(cls, params: PdeParams) -> "TimeGrid":
        return cls(params.T, params.K_steps)


@dataclass
class Trajectory:
    """States at ``t_0..t_K``; row ``k`` of ``values`` is the state at ``t_k``."""

    values: np.ndarray
    time_grid: TimeGrid
    space_tag: str = "W"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.time_grid.K_steps + 1:
            raise ValueError(
                f"trajectory needs {self.time_grid.K_steps + 1} rows, got shape {self.values.shape}")

    def __add__(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(self.values + other.values, self.time_grid, self.space_tag)

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(self.values - other.values, self.time_grid, self.space_tag)

    def shifted(self, offset: np.ndarray) -> "Trajectory":
        return Trajectory(self.values + offset[None, :], self.time_grid, self.space_tag)

    @property
    def n_dof(self) -> int:
        return self.values.shape[1]

    def norm(self, gram, dt: Optional[float] = None) -> float:
        """Discrete ``L2(0,T;X)`` norm with uniform weights ``dt`` over all rows."""
        dt = self.time_grid.dt if dt is None else dt
        V = self.values
        return float(np.sqrt(dt * np.einsum("ki,ki->", V, (gram @ V.T).T)))


def as_control(u, time_grid: TimeGrid) -> np.ndarray:
    """Validate a piecewise-constant control: one value per interval."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = np.full(time_grid.K_steps, float(u))
    if u.shape != (time_grid.K_steps,):
        raise ValueError(f"control needs {time_grid.K_steps} values, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("control contains non-finite values")
    return u


@dataclass(eq=False)
class StepMatrices:
    mass: object
    L: object
    time_grid: TimeGrid
    theta: float
    A_impl: object
    A_expl: object
    impl: object = field(repr=False)
    _expl: object = field(default=None, repr=False)

    @property
    def dt(self) -> float:
        return self.time_grid.dt

    def explicit_factor(self):
        if self._expl is None:
            try:
                self._expl = factor(self.A_expl)
            except np.linalg.LinAlgError as exc:
                raise SolverError(
                    "explicit matrix M - dt(1-theta)L is singular; reduce dt") from exc
        return self._expl


def step_matrices(ops, L, time_grid: TimeGrid, theta: float) -> StepMatrices:
    """Build and factorize the theta-scheme step matrices.

    ``ops`` is a :class:`SpatialOperators` (its mass matrix is used) or a mass
    matrix.  Raises :class:`SolverError` when ``A_impl`` is not positive
    definite, which means the linearization is invalid.
    """
    if not 0.5 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [1/2, 1], got {theta}")
    M = ops.M if isinstance(ops, SpatialOperators) else ops
    if not sp.issparse(M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        L = np.atleast_2d(np.asarray(L, dtype=float))
    dt = time_grid.dt
    A_impl = M + (dt * theta) * L
    A_expl = M - (dt * (1.0 - theta)) * L
    if sp.issparse(A_impl):
        A_impl, A_expl = sp.csr_matrix(A_impl), sp.csr_matrix(A_expl)
    try:
        impl = factor_spd(A_impl)
    except NotPositiveDefinite as exc:
        raise SolverError("implicit step matrix is not positive definite "
                          "(indefinite linearization)") from exc
    return StepMatrices(M, L, time_grid, theta, A_impl, A_expl, impl)


def _march(step: StepMatrices, x0: np.ndarray, sources) -> np.ndarray:
    """Integrate from ``x0`` (vector or column block) with per-step sources."""
    K = step.time_grid.K_steps
    x = np.array(x0, dtype=float)
    out = np.empty((K + 1,) + x.shape)
    out[0] = x
    dt = step.dt
    for k in range(K):
        rhs = step.A_expl @ x
        if sources is not None:
            rhs = rhs + dt * sources[k]
        x = step.impl.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite state at step {k}", step=k)
        out[k + 1] = x
    return out


def _sources(rhs, K: int, n: int) -> Optional[np.ndarray]:
    if rhs is None:
        return None
    g = np.asarray(rhs, dtype=float)
    if g.shape == (n,):
        return np.broadcast_to(g, (K, n))
    if g.shape != (K, n):
        raise ValueError(f"source needs shape ({K}, {n}) or ({n},), got {g.shape}")
    return g


def solve_linear_theta(step: StepMatrices, rhs, y0, space_tag: str = "W") -> Trajectory:
    """Solve ``A_impl y_{k+1} = A_expl y_k + dt g_k`` with ``y_0 = y0``.

    ``rhs`` holds the load vectors ``g_k`` (shape ``(K, n)``, or one vector
    used on every interval).
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    K = step.time_grid.K_steps
    values = _march(step, y0, _sources(rhs, K, len(y0)))
    return Trajectory(values, step.time_grid, space_tag)


def impulse_responses(step: StepMatrices, loads: np.ndarray, threads: int = 1) -> np.ndarray:
    """Batched impulse responses for the columns of ``loads``.

    Each response starts from ``A_expl w_0 = load`` and then evolves
    homogeneously.  Returns an array of shape ``(m, K+1, n)``.  With
    ``threads > 1`` column blocks are integrated concurrently over the shared
    factorization.
    """
    loads = np.asarray(loads, dtype=float)
    if loads.ndim == 1:
        loads = loads[:, None]
    w0 = np.asarray(step.explicit_factor().solve(loads)).reshape(loads.shape)
    if not np.all(np.isfinite(w0)):
        raise SolverError("impulse initial value is not finite; reduce dt")
    m = w0.shape[1]
    if threads > 1 and m > 1:
        blocks = np.array_split(np.arange(m), min(threads, m))
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            parts = list(pool.map(lambda idx: _march(step, w0[:, idx], None), blocks))
        out = np.concatenate(parts, axis=2)
    else:
        out = _march(step, w0, None)      # (K+1, n, m)
    return np.moveaxis(out, 2, 0)


def solve_impulse_theta(step: StepMatrices, impulse, load=None, space_tag: str = "W") -> Trajectory:
    """Impulse response for a spatial function ``impulse``.

    The initial value solves ``A_expl w_0 = M f``; pass ``load`` to give the
    right-hand side ``M f`` directly instead.
    """
    if load is None:
        load = step.mass @ np.atleast_1d(np.asarray(impulse, dtype=float))
    values = impulse_responses(step, np.asarray(load, dtype=float))[0]
    return Trajectory(values, step.time_grid, space_tag)


class FullOrderSystem:
    """Finite-element semilinear system ``M y' + a K y + b N(y) = F u``."""

    def __init__(self, ops: SpatialOperators, params: PdeParams):
        self.ops = ops
        self.params = params
        self.mass = ops.M
        self.diffusion = (params.a * ops.K).tocsr()
        self.load = ops.load_F
        self._mass_lu = None

    @property
    def n(self) -> int:
        return self.ops.n_dof

    def nonlinear(self, y):
        return self.params.b * self.ops.cubic(y)

    def nonlinear_jacobian(self, y):
        return self.params.b * self.ops.cubic_jacobian(y)

    def factor(self, A):
        return factor_spd(sp.csr_matrix(A))

    def dual_norm(self, r) -> float:
        """``(r^T M^{-1} r)^{1/2}``, the H-norm of the residual's Riesz representer."""
        if self._mass_lu is None:
            self._mass_lu = factor_spd(self.mass)
        return float(np.sqrt(max(r @ self._mass_lu.solve(r), 0.0)))


def integrate_semilinear(system, u, y0, time_grid: TimeGrid, theta: float = 1.0,
                         tol: float = 1e-11, max_iter: int = 25,
                         store_jacobians: bool = False):
    """Theta-scheme for ``M y' + A y + N(y) = f u`` with Newton on every step.

    Returns ``(values, jacobians)``; ``jacobians[k]`` factorizes the step-``k``
    Jacobian at the converged ``y_{k+1}`` when ``store_jacobians`` is set.
    """
    u = as_control(u, time_grid)
    dt = time_grid.dt
    K = time_grid.K_steps
    M, A, f = system.mass, system.diffusion, system.load
    y = np.array(y0, dtype=float)
    values = np.empty((K + 1, len(y)))
    values[0] = y
    jacobians = [] if store_jacobians else None
    Ny = system.nonlinear(y)
    fact, fact_at = None, None

    def jac(z):
        return system.factor(M / dt + theta * (A + system.nonlinear_jacobian(z)))

    for k in range(K):
        const = -(M @ y) / dt + (1.0 - theta) * (A @ y + Ny) - f * u[k]
        z = y.copy()
        Nz = Ny
        for it in range(max_iter + 1):
            R = (M @ z) / dt + theta * (A @ z + Nz) + const
            res = system.dual_norm(R)
            if not np.isfinite(res):
                raise SolverError(f"non-finite residual at step {k}", step=k)
            if res <= tol:
                break
            if it == max_iter:
                raise SolverError(
                    f"Newton did not converge in {max_iter} iterations at step {k} "
                    f"(residual {res:.3e})", step=k, residual=res)
            if fact_at is not z:
                fact, fact_at = jac(z), z
            z = z - fact.solve(R)
            Nz = system.nonlinear(z)
        if store_jacobians:
            if fact_at is not z:
                fact, fact_at = jac(z), z
            jacobians.append(fact)
        y, Ny = z, Nz
        values[k + 1] = y
    return values, jacobians


def solve_semilinear(ops: SpatialOperators, params: PdeParams, u, y0,
                     time_grid: Optional[TimeGrid] = None, tol: float = 1e-11,
                     max_iter: int = 25) -> Trajectory:
    """Full-order semilinear solve with the theta from ``params``."""
    tg = time_grid or TimeGrid.from_params(params)
    values, _ = integrate_semilinear(FullOrderSystem(ops, params), u, y0, tg,
                                     params.theta, tol, max_iter)
    return Trajectory(values, tg, "W")


def steady_state(system, u_bar: float, tol: float = 1e-11, max_iter: int = 100,
                 y_init=None) -> np.ndarray:
    """Damped Newton for ``A y + N(y) = f u_bar``."""
    if not np.isfinite(u_bar):
        raise ValueError("u_bar must be finite")
    A, f = system.diffusion, system.load
    y = np.zeros(system.n) if y_init is None else np.array(y_init, dtype=float)

    def residual(z):
        return A @ z + system.nonlinear(z) - f * u_bar

    R = residual(y)
    res = system.dual_norm(R)
    for _ in range(max_iter):
        if res <= tol:
            return y
        step = system.factor(A + system.nonlinear_jacobian(y)).solve(R)
        lam = 1.0
        while True:
            trial = y - lam * step
            R_trial = residual(trial)
            res_trial = system.dual_norm(R_trial)
            if res_trial < (1.0 - 1e-4 * lam) * res or lam < 1e-10:
                break
            lam *= 0.5
        if res_trial >= res:
            raise SolverError(f"steady-state Newton stalled at residual {res:.3e}",
                              residual=res)
        y, R, res = trial, R_trial, res_trial
    if res <= tol:
        return y
    raise SolverError(f"steady-state Newton did not converge (residual {res:.3e})",
                      residual=res)


def compute_steady_state(ops: SpatialOperators, params: PdeParams, u_bar: float,
                         tol: float = 1e-11) -> np.ndarray:
    return steady_state(FullOrderSystem(ops, params), u_bar, tol)
