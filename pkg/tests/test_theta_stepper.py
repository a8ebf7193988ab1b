import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from helpers import ScalarSystem
from newtonpod.mesh_fem import PdeParams
from newtonpod.theta_stepper import (
    SolverError,
    TimeGrid,
    Trajectory,
    as_control,
    compute_steady_state,
    impulse_responses,
    integrate_semilinear,
    solve_impulse_theta,
    solve_linear_theta,
    solve_semilinear,
    step_matrices,
    steady_state,
)

TG2 = TimeGrid(1.0, 2)  # dt = 0.5


@pytest.mark.parametrize("theta,impl,expl", [(1.0, 1.5, 1.0), (0.5, 1.25, 0.75)])
def test_scalar_step_matrices(theta, impl, expl):
    s = step_matrices(1.0, 1.0, TG2, theta)
    assert s.A_impl[0, 0] == pytest.approx(impl)
    assert s.A_expl[0, 0] == pytest.approx(expl)


def test_zero_operator_gives_mass():
    s = step_matrices(np.eye(2), np.zeros((2, 2)), TG2, 0.5)
    np.testing.assert_array_equal(s.A_impl, np.eye(2))
    np.testing.assert_array_equal(s.A_expl, np.eye(2))


def test_theta_outside_range_rejected():
    with pytest.raises(ValueError):
        step_matrices(1.0, 1.0, TG2, 0.3)


def test_indefinite_step_raises_solver_error():
    with pytest.raises(SolverError):
        step_matrices(1.0, -10.0, TG2, 1.0)


def test_scalar_linear_recursion():
    s = step_matrices(1.0, 1.0, TG2, 1.0)
    y = solve_linear_theta(s, np.ones(1), np.zeros(1)).values[:, 0]
    np.testing.assert_allclose(y, [0.0, 1 / 3, 5 / 9], rtol=1e-15)


def test_zero_data_zero_solution(small):
    y = solve_linear_theta(small.lin.step, np.zeros(small.ops.n_dof), np.zeros(small.ops.n_dof))
    assert not y.values.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.5, 0.75, 1.0]))
def test_linear_superposition(seed, theta):
    r = np.random.default_rng(seed)
    n, tg = 4, TimeGrid(1.0, 6)
    A = r.standard_normal((n, n))
    s = step_matrices(np.eye(n) + 0.1 * A @ A.T, A @ A.T + np.eye(n), tg, theta)
    g1, g2 = r.standard_normal((6, n)), r.standard_normal((6, n))
    y12 = solve_linear_theta(s, g1 + g2, np.zeros(n)).values
    y1 = solve_linear_theta(s, g1, np.zeros(n)).values
    y2 = solve_linear_theta(s, g2, np.zeros(n)).values
    np.testing.assert_allclose(y12, y1 + y2, atol=1e-12 * max(1.0, np.abs(y12).max()))


def test_scalar_impulse_recursion():
    s = step_matrices(1.0, 1.0, TG2, 1.0)
    w = solve_impulse_theta(s, np.ones(1)).values[:, 0]
    np.testing.assert_allclose(w, [1.0, 2 / 3, 4 / 9], rtol=1e-15)
    assert not solve_impulse_theta(s, np.zeros(1)).values.any()


def test_impulse_start_value_for_backward_euler(small):
    f = small.ops.F_h
    w = solve_impulse_theta(small.lin.step, f)
    np.testing.assert_allclose(w.values[0], f, atol=1e-12)


def test_impulse_threads_match_serial(small):
    loads = np.random.default_rng(0).standard_normal((small.ops.n_dof, 7))
    serial = impulse_responses(small.lin.step, loads)
    threaded = impulse_responses(small.lin.step, loads, threads=3)
    np.testing.assert_array_equal(serial, threaded)


def test_semilinear_zero_fixed_point(small):
    y = solve_semilinear(small.ops, small.params, np.zeros(16), np.zeros(small.ops.n_dof))
    assert not y.values.any()


def test_semilinear_without_reaction_matches_linear(small, rng):
    p = PdeParams(a=0.01, b=0.0, K_steps=16)
    u = rng.standard_normal(16)
    y0 = rng.standard_normal(small.ops.n_dof)
    y = solve_semilinear(small.ops, p, u, y0).values
    s = step_matrices(small.ops, p.a * small.ops.K, small.tg, 1.0)
    ref = solve_linear_theta(s, u[:, None] * small.ops.load_F[None, :], y0).values
    np.testing.assert_allclose(y, ref, atol=1e-10 * np.abs(ref).max())


def test_scalar_cubic_step():
    # y1 - 1 + 0.1 y1^3 = 0; frozen from the bracketing root finder
    root = optimize.brentq(lambda y: y - 1 + 0.1 * y ** 3, 0.0, 1.0, xtol=1e-15)
    assert root == pytest.approx(0.9216989942046786, abs=1e-13)
    vals, _ = integrate_semilinear(ScalarSystem(b=1.0), np.zeros(1), np.ones(1), TimeGrid(0.1, 1))
    assert vals[1, 0] == pytest.approx(root, abs=1e-12)


def test_semilinear_dissipative(small):
    y0 = small.ybar * 1.5
    Y = solve_semilinear(small.ops, small.params, np.zeros(16), y0).values
    norms = np.sqrt(np.einsum("ki,ki->k", Y, (small.ops.M @ Y.T).T))
    assert np.all(np.diff(norms) <= 1e-14)


def test_newton_failure_reports_step():
    with pytest.raises(SolverError) as info:
        integrate_semilinear(ScalarSystem(b=1.0), np.zeros(3), np.ones(1), TimeGrid(1.0, 3),
                             max_iter=0)
    assert info.value.step == 0


def test_stored_jacobians_factor_step_matrix():
    sys_ = ScalarSystem(k=1.0, b=1.0)
    tg = TimeGrid(1.0, 4)
    vals, jac = integrate_semilinear(sys_, np.ones(4), np.zeros(1), tg, store_jacobians=True)
    for k in range(4):
        J = 1 / tg.dt + 1.0 + 3 * vals[k + 1, 0] ** 2
        assert jac[k].solve(np.array([J]))[0] == pytest.approx(1.0)


def test_scalar_steady_state():
    assert steady_state(ScalarSystem(k=1.0, b=1.0), 2.0)[0] == pytest.approx(1.0, abs=1e-12)


def test_steady_state_zero_and_monotone(small):
    z = compute_steady_state(small.ops, small.params, 0.0)
    assert not z.any()
    y1 = compute_steady_state(small.ops, small.params, 1.0)
    y2 = compute_steady_state(small.ops, small.params, 2.0)
    assert np.all(y2 >= y1 - 1e-14) and np.all(y1 >= -1e-14)


def test_steady_state_residual(small):
    p, ops = small.params, small.ops
    res = p.a * (ops.K @ small.ybar) + p.b * ops.cubic(small.ybar) - 2.0 * ops.load_F
    assert np.sqrt(res @ ops.solve_mass(res)) <= 1e-11
    with pytest.raises(ValueError):
        compute_steady_state(ops, p, np.inf)


def test_linear_adjoint_consistency(small, rng):
    # <y_K, p> forward equals the transposed backward recursion
    s = small.lin.step
    n, K, dt = small.ops.n_dof, small.tg.K_steps, small.tg.dt
    g, p = rng.standard_normal((K, n)), rng.standard_normal(n)
    forward = solve_linear_theta(s, g, np.zeros(n)).values[-1] @ p
    A = s.A_impl.toarray()
    lam = np.linalg.solve(A.T, p)
    backward = 0.0
    for k in range(K - 1, -1, -1):
        backward += dt * g[k] @ lam
        lam = np.linalg.solve(A.T, s.A_expl.T @ lam)
    assert forward == pytest.approx(backward, rel=1e-10)


def test_trajectory_and_control_validation():
    tg = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), tg)
    t = Trajectory(np.ones((5, 2)), tg)
    assert (t + t).values.max() == 2.0 and not (t - t).values.any()
    np.testing.assert_array_equal(as_control(2.0, tg), np.full(4, 2.0))
    with pytest.raises(ValueError):
        as_control(np.ones(3), tg)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 4)
