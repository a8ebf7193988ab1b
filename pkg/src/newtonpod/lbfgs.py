"""Limited-memory BFGS with Armijo backtracking."""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["LbfgsResult", "minimize_lbfgs"]


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    message: str
    grad_norms: list = field(default_factory=list)
    fun_values: list = field(default_factory=list)
    n_evals: int = 0
    wall_time: float = 0.0


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def minimize_lbfgs(fun: Callable, grad: Callable, x0, tol: float = 1e-8,
                   max_iter: int = 200, memory: int = 10, c1: float = 1e-4,
                   max_halvings: int = 30, callback=None) -> LbfgsResult:
    """Minimize ``fun`` from ``x0``.

    Stops when ``|grad|_2 <= tol * max(1, |grad(x0)|_2)``.  ``grad`` is always
    called right after ``fun`` at the same point, so callers may cache the
    forward solve.
    """
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    f = float(fun(x))
    g = np.asarray(grad(x), dtype=float)
    n_evals = 1
    gnorm = float(np.linalg.norm(g))
    target = tol * max(1.0, gnorm)
    pairs = deque(maxlen=memory)
    res = LbfgsResult(x, f, 0, False, "", [gnorm], [f])
    it = 0
    while True:
        if gnorm <= target:
            res.converged, res.message = True, "gradient tolerance reached"
            break
        if it >= max_iter:
            res.message = "maximum number of iterations reached"
            break
        d = -_two_loop(g, pairs)
        slope = g @ d
        if not slope < 0:
            pairs.clear()
            d, slope = -g, -(g @ g)
        alpha = 1.0 if pairs else 1.0 / gnorm
        for _ in range(max_halvings + 1):
            x_new = x + alpha * d
            f_new = float(fun(x_new))
            n_evals += 1
            if np.isfinite(f_new) and f_new <= f + c1 * alpha * slope:
                break
            alpha *= 0.5
        else:
            res.message = f"line search failed after {max_halvings} halvings"
            break
        g_new = np.asarray(grad(x_new), dtype=float)
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        it += 1
        res.grad_norms.append(gnorm)
        res.fun_values.append(f)
        if callback is not None:
            callback(it, x, f, gnorm)
    res.x, res.fun, res.iterations, res.n_evals = x, f, it, n_evals
    res.wall_time = time.perf_counter() - t0
    return res
