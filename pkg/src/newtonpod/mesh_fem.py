"""Structured P1 finite elements on the unit interval / unit square.

Dirichlet boundary nodes are eliminated, so every assembled matrix lives on
the interior degrees of freedom only.  The cubic reaction term is integrated
exactly (degree-4 quadrature), which makes its Jacobian symmetric and lets the
linearized operator, the Newton right-hand sides and the nonlinearity snapshots
use one consistent discretization.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Grid",
    "PdeParams",
    "SpatialOperators",
    "build_grid",
    "assemble_operators",
    "node_matrices",
    "weighted_mass",
    "inner_product",
    "default_control_shape",
    "grid_to_json",
    "grid_from_json",
    "trajectory_norm",
]


# Degree-4 rule on the reference triangle (Dunavant, 6 points), barycentric.
_TRI_A = (0.445948490915965, 0.108103018168070, 0.223381589678011)
_TRI_B = (0.091576213509771, 0.816847572980459, 0.109951743655322)


def _triangle_rule():
    pts, wts = [], []
    for a, b, wt in (_TRI_A, _TRI_B):
        pts += [(b, a, a), (a, b, a), (a, a, b)]
        wts += [wt] * 3
    return np.array(pts), np.array(wts)


def _interval_rule():
    # 3-point Gauss-Legendre on [0, 1], exact to degree 5
    x, w = np.polynomial.legendre.leggauss(3)
    s = 0.5 * (x + 1.0)
    return np.column_stack([1.0 - s, s]), 0.5 * w


@dataclass(frozen=True)
class PdeParams:
    """Coefficients of ``y_t - a*Lap(y) + b*y**3 = F*u`` and the time grid."""

    a: float = 0.01
    b: float = 3.0
    T: float = 1.0
    theta: float = 1.0
    K_steps: int = 65

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if not self.b >= 0:
            raise ValueError(f"b must be non-negative, got {self.b}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [1/2, 1], got {self.theta}")
        if int(self.K_steps) != self.K_steps or self.K_steps < 1:
            raise ValueError(f"K_steps must be a positive integer, got {self.K_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.K_steps


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform mesh with interior-dof numbering.

    ``interior_index[node]`` is the dof number of ``node`` or -1 for
    Dirichlet nodes.  ``shape_mask`` marks active cells (``None``: all).
    """

    dimension: int
    cells_per_side: int
    nodes: np.ndarray
    elements: np.ndarray
    interior_index: np.ndarray
    h: float
    shape_mask: Optional[np.ndarray] = None
    mask_spec: object = None

    @property
    def n_dof(self) -> int:
        return int(np.count_nonzero(self.interior_index >= 0))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def dof_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.interior_index >= 0)

    @property
    def dof_coordinates(self) -> np.ndarray:
        return self.nodes[self.dof_nodes]

    def to_nodal(self, x: np.ndarray) -> np.ndarray:
        """Extend a dof vector by zero boundary values."""
        out = np.zeros(self.n_nodes)
        out[self.dof_nodes] = x
        return out

    @cached_property
    def _fem(self) -> "_ElementData":
        return _ElementData(self)


def build_grid(dimension: int = 2, cells_per_side: int = 32, mask=None) -> Grid:
    """Build a uniform P1 mesh of (0,1) or (0,1)^2.

    ``mask`` is ``None``, ``"L"`` (square minus the upper-right quadrant) or a
    boolean array of active cells, shape ``(n,)`` in 1D and ``(n, n)`` in 2D
    indexed ``[ix, iy]``.
    """
    n = int(cells_per_side)
    if n < 2:
        raise ValueError("cells_per_side must be at least 2")
    if dimension not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {dimension}")

    shape = (n,) if dimension == 1 else (n, n)
    if mask is None:
        active = np.ones(shape, dtype=bool)
    elif isinstance(mask, str):
        if mask.upper() != "L" or dimension != 2:
            raise ValueError(f"unknown mask {mask!r}")
        active = np.ones(shape, dtype=bool)
        active[n // 2:, n // 2:] = False
    else:
        active = np.asarray(mask, dtype=bool)
        if active.shape != shape:
            raise ValueError(f"mask shape {active.shape} does not match cells {shape}")
    if not active.any():
        raise ValueError("mask removes every cell")
    _check_connected(active)

    h = 1.0 / n
    if dimension == 1:
        coords = np.linspace(0.0, 1.0, n + 1)[:, None]
        cells = np.flatnonzero(active)
        elements = np.column_stack([cells, cells + 1])
        touched = np.zeros(n + 1, dtype=bool)
        touched[elements.ravel()] = True
        interior = np.zeros(n + 1, dtype=bool)
        interior[1:n] = active[:-1] & active[1:]
    else:
        xs = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        coords = np.column_stack([X.ravel(), Y.ravel()])

        def nid(i, j):
            return i * (n + 1) + j

        ci, cj = np.nonzero(active)
        n00, n10 = nid(ci, cj), nid(ci + 1, cj)
        n01, n11 = nid(ci, cj + 1), nid(ci + 1, cj + 1)
        # Friedrichs-Keller split along the (0,0)-(1,1) diagonal
        elements = np.concatenate([
            np.column_stack([n00, n10, n11]),
            np.column_stack([n00, n11, n01]),
        ])
        touched = np.zeros(len(coords), dtype=bool)
        touched[elements.ravel()] = True
        interior2 = np.zeros((n + 1, n + 1), dtype=bool)
        interior2[1:n, 1:n] = (active[:-1, :-1] & active[1:, :-1]
                               & active[:-1, 1:] & active[1:, 1:])
        interior = interior2.ravel()

    # drop nodes no active cell touches
    keep = np.flatnonzero(touched)
    renumber = -np.ones(len(coords), dtype=np.int64)
    renumber[keep] = np.arange(len(keep))
    elements = renumber[elements]
    interior = interior[keep]
    index = -np.ones(len(keep), dtype=np.int64)
    index[interior] = np.arange(np.count_nonzero(interior))
    return Grid(
        dimension=dimension,
        cells_per_side=n,
        nodes=coords[keep],
        elements=elements.astype(np.int64),
        interior_index=index,
        h=h,
        shape_mask=None if mask is None else active,
        mask_spec=mask if (mask is None or isinstance(mask, str)) else active.tolist(),
    )


def _check_connected(active: np.ndarray) -> None:
    idx = -np.ones(active.shape, dtype=np.int64)
    idx[active] = np.arange(np.count_nonzero(active))
    rows, cols = [], []
    for axis in range(active.ndim):
        lo = [slice(None)] * active.ndim
        hi = [slice(None)] * active.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        a, b = idx[tuple(lo)], idx[tuple(hi)]
        both = (a >= 0) & (b >= 0)
        rows.append(a[both])
        cols.append(b[both])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    m = int(np.count_nonzero(active))
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp > 1:
        raise ValueError(f"mask disconnects the domain into {n_comp} pieces")


class _ElementData:
    """Geometry, quadrature and scatter maps shared by all assembly routines."""

    def __init__(self, grid: Grid):
        self.grid = grid
        el = grid.elements
        X = grid.nodes[el]  # (E, nv, d)
        if grid.dimension == 1:
            size = X[:, 1, 0] - X[:, 0, 0]
            grads = np.stack([-1.0 / size, 1.0 / size], axis=1)[:, :, None]
            bary, qw = _interval_rule()
        else:
            e1 = X[:, 1] - X[:, 0]
            e2 = X[:, 2] - X[:, 0]
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            size = 0.5 * np.abs(det)
            # gradients of barycentric coordinates
            g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
            g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
            grads = np.stack([-g1 - g2, g1, g2], axis=1)
            bary, qw = _triangle_rule()
        if np.any(size <= 1e-14 * grid.h ** grid.dimension):
            raise ValueError("degenerate element (zero measure)")
        self.size = size
        self.grads = grads
        self.phi = bary                      # (nq, nv) basis values at quad points
        self.qweights = size[:, None] * qw[None, :]   # (E, nq)
        self.phiphi = np.einsum("qa,qb->qab", bary, bary)

        dof = grid.interior_index[el]        # (E, nv)
        self.dof = dof
        nv = el.shape[1]
        ia = np.repeat(np.arange(nv), nv)
        ib = np.tile(np.arange(nv), nv)
        r, c = dof[:, ia], dof[:, ib]
        valid = (r >= 0) & (c >= 0)
        n = grid.n_dof
        keys = (r.astype(np.int64) * max(n, 1) + c)[valid]
        uniq, inverse = np.unique(keys, return_inverse=True)
        self._valid = valid
        self._inverse = inverse
        self._nnz = len(uniq)
        self._indices = (uniq % max(n, 1)).astype(np.int32)
        rows = (uniq // max(n, 1)).astype(np.int64)
        self._indptr = np.searchsorted(rows, np.arange(n + 1)).astype(np.int32)
        self._vec_valid = dof >= 0

        # quadrature-point interpolation of dof vectors, element-major
        E, nq = self.qweights.shape
        qrow = np.repeat(np.arange(E * nq), nv).reshape(E, nq, nv)
        qcol = np.broadcast_to(dof[:, None, :], (E, nq, nv))
        qval = np.broadcast_to(bary[None, :, :], (E, nq, nv))
        ok = qcol >= 0
        self.interp = sp.csr_matrix(
            (qval[ok], (qrow[ok], qcol[ok])), shape=(E * nq, n))
        self.interp_T = self.interp.T.tocsr()
        self.qw_flat = self.qweights.ravel()

    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        """Scatter element matrices ``(E, nv, nv)`` into a dof CSR matrix."""
        vals = local.reshape(len(local), -1)[self._valid]
        data = np.bincount(self._inverse, weights=vals, minlength=self._nnz)
        n = self.grid.n_dof
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=(n, n))

    def vector(self, local: np.ndarray) -> np.ndarray:
        """Scatter element vectors ``(E, nv)`` into a dof vector."""
        return np.bincount(self.dof[self._vec_valid], weights=local[self._vec_valid],
                           minlength=self.grid.n_dof)

    def qmatrix(self, qweight: np.ndarray) -> sp.csr_matrix:
        """Matrix of ``int s(x) phi_i phi_j`` for ``s`` given at quadrature points."""
        s = (self.qweights * qweight.reshape(self.qweights.shape))
        return self.matrix(np.einsum("eq,qab->eab", s, self.phiphi))

    def nodal_to_quad(self, nodal: np.ndarray) -> np.ndarray:
        return (nodal[self.grid.elements] @ self.phi.T).ravel()


def node_matrices(grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Mass and stiffness over *all* nodes, before boundary elimination."""
    fem = grid._fem
    M_loc, K_loc = _local_matrices(grid, fem)
    el = grid.elements
    nv = el.shape[1]
    rows = np.repeat(el, nv, axis=1).ravel()
    cols = np.tile(el, (1, nv)).ravel()
    shape = (grid.n_nodes, grid.n_nodes)
    M = sp.csr_matrix((M_loc.ravel(), (rows, cols)), shape=shape)
    K = sp.csr_matrix((K_loc.ravel(), (rows, cols)), shape=shape)
    return M, K


def _local_matrices(grid: Grid, fem: _ElementData):
    size = fem.size
    if grid.dimension == 1:
        ref_m = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        ref_m = (np.ones((3, 3)) + np.eye(3)) / 12.0
    M_loc = size[:, None, None] * ref_m[None]
    K_loc = size[:, None, None] * np.einsum("ead,ebd->eab", fem.grads, fem.grads)
    return M_loc, K_loc


def default_control_shape(dimension: int, center=None, sigma: float = 0.2) -> Callable:
    """Gaussian bump ``exp(-|x - c|^2 / sigma^2)`` centred in the domain."""
    c = np.full(dimension, 0.5) if center is None else np.asarray(center, dtype=float)

    def shape(x):
        x = np.atleast_2d(x)
        return np.exp(-np.sum((x - c) ** 2, axis=1) / sigma ** 2)

    return shape


@dataclass(eq=False)
class SpatialOperators:
    """Assembled mass/stiffness matrices, W-Gram matrix and control load."""

    grid: Grid
    M: sp.csr_matrix
    K: sp.csr_matrix
    G_W: sp.csr_matrix
    F_h: np.ndarray
    load_F: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_dof(self) -> int:
        return self.grid.n_dof

    def gram(self, space: str) -> sp.csr_matrix:
        if space == "H":
            return self.M
        if space == "W":
            return self.G_W
        raise ValueError(f"space must be 'H' or 'W', got {space!r}")

    # -- cubic reaction term, integrated exactly ------------------------------
    def quad_values(self, x: np.ndarray) -> np.ndarray:
        """Values of dof vector(s) at all quadrature points."""
        return self.grid._fem.interp @ x

    def cubic(self, y: np.ndarray) -> np.ndarray:
        """Load vector ``int y^3 phi_i``."""
        fem = self.grid._fem
        yq = fem.interp @ y
        return fem.interp_T @ (fem.qw_flat * yq ** 3)

    def cubic_jacobian(self, y: np.ndarray) -> sp.csr_matrix:
        """Matrix ``int 3 y^2 phi_i phi_j``, the exact derivative of :meth:`cubic`."""
        fem = self.grid._fem
        yq = fem.interp @ y
        return fem.qmatrix(3.0 * yq ** 2)

    def triple_product(self, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Load of ``int a b c phi_i``; columns of 2-D inputs are processed together."""
        fem = self.grid._fem
        w = fem.qw_flat if np.ndim(a) == 1 else fem.qw_flat[:, None]
        prod = (fem.interp @ a) * (fem.interp @ b) * (fem.interp @ c)
        return fem.interp_T @ (w * prod)

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        if "M_lu" not in self._cache:
            from .linalg import factor_spd
            self._cache["M_lu"] = factor_spd(self.M)
        return self._cache["M_lu"].solve(rhs)


def assemble_operators(grid: Grid, control_shape: Optional[Callable] = None) -> SpatialOperators:
    """Assemble mass, stiffness, W-Gram matrix and the control load ``M F_h``."""
    fem = grid._fem
    M_loc, K_loc = _local_matrices(grid, fem)
    M = fem.matrix(M_loc)
    K = fem.matrix(K_loc)
    if control_shape is None:
        control_shape = default_control_shape(grid.dimension)
    F_h = np.asarray(control_shape(grid.dof_coordinates), dtype=float).reshape(-1)
    return SpatialOperators(grid=grid, M=M, K=K, G_W=(M + K).tocsr(), F_h=F_h, load_F=M @ F_h)


def weighted_mass(grid: Grid, weight: np.ndarray) -> sp.csr_matrix:
    """Matrix ``int w_h phi_i phi_j`` with ``w_h`` the P1 interpolant of ``weight``.

    ``weight`` holds either one value per dof (Dirichlet nodes get 0) or one
    value per mesh node.
    """
    weight = np.asarray(weight, dtype=float)
    if weight.shape == (grid.n_dof,):
        nodal = grid.to_nodal(weight)
    elif weight.shape == (grid.n_nodes,):
        nodal = weight
    else:
        raise ValueError(
            f"weight has length {weight.shape}, expected {grid.n_dof} dofs or {grid.n_nodes} nodes")
    fem = grid._fem
    return fem.qmatrix(fem.nodal_to_quad(nodal))


def inner_product(ops: SpatialOperators, x: np.ndarray, y: np.ndarray, space: str = "W") -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (ops.n_dof,) or y.shape != (ops.n_dof,):
        raise ValueError(f"expected vectors of length {ops.n_dof}, got {x.shape} and {y.shape}")
    return float(x @ (ops.gram(space) @ y))


def grid_to_json(grid: Grid) -> str:
    return json.dumps({"dimension": grid.dimension,
                       "cells_per_side": grid.cells_per_side,
                       "mask": grid.mask_spec}, indent=2)


def grid_from_json(text: str) -> Grid:
    spec = json.loads(text)
    return build_grid(spec["dimension"], spec["cells_per_side"], spec.get("mask"))


def trajectory_norm(ops: SpatialOperators, values: np.ndarray, dt: float, space: str = "W") -> float:
    """Discrete ``L2(0,T;X)`` norm ``(dt * sum_k |x_k|_X^2)^(1/2)`` over all rows."""
    G = ops.gram(space)
    vals = np.atleast_2d(values)
    return float(np.sqrt(dt * np.einsum("ki,ki->", vals, (G @ vals.T).T)))

