"""Independent oracles shared by several test modules."""
import numpy as np
from scipy import integrate

from newtonpod.linalg import factor_spd


class ScalarSystem:
    """``m y' + k y + b y^3 = f u`` with one unknown, in the integrator interface."""

    def __init__(self, m=1.0, k=0.0, b=1.0, f=1.0):
        self.mass = np.array([[m]])
        self.diffusion = np.array([[k]])
        self.load = np.array([f])
        self.b = b
        self.n = 1

    def nonlinear(self, y):
        return self.b * np.asarray(y) ** 3

    def nonlinear_jacobian(self, y):
        return np.diag(3.0 * self.b * np.asarray(y) ** 2)

    def factor(self, A):
        return factor_spd(np.atleast_2d(A))

    def dual_norm(self, r):
        return float(np.sqrt(np.sum(np.asarray(r) ** 2 / self.mass.diagonal())))


def hat(grid, i):
    """Callable for the 1-D hat function of dof ``i``."""
    xs = grid.nodes[:, 0]
    values = np.zeros(len(xs))
    values[grid.dof_nodes[i]] = 1.0
    order = np.argsort(xs)
    return lambda x: np.interp(x, xs[order], values[order])


def interpolant(grid, dof_values):
    xs = grid.nodes[:, 0]
    nodal = grid.to_nodal(np.asarray(dof_values, dtype=float))
    order = np.argsort(xs)
    return lambda x: np.interp(x, xs[order], nodal[order])


def integrate_1d(fun, grid):
    """Adaptive quadrature split at the mesh nodes."""
    breaks = np.sort(grid.nodes[:, 0])
    return sum(integrate.quad(fun, lo, hi, epsabs=1e-14, epsrel=1e-13)[0]
               for lo, hi in zip(breaks[:-1], breaks[1:]))


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, cond, n)) @ Q.T
