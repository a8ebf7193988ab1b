import numpy as np
import pytest
from scipy import optimize as sopt

from newtonpod.lbfgs import minimize_lbfgs
from newtonpod.mesh_fem import PdeParams, assemble_operators, build_grid
from newtonpod.ocp_solver import (
    OcpProblem,
    full_objective,
    make_tracking_problem,
    objective_and_gradient,
    optimize,
    reference_control,
    run_comparison_experiment,
    test_control as guiding_control,
)
from newtonpod.rom_galerkin import reduce_model
from newtonpod.snapshot_gen import combine_bases
from newtonpod.theta_stepper import FullOrderSystem, TimeGrid, solve_linear_theta, step_matrices


def models(setup):
    res = setup.result
    B1 = combine_bases(setup.ybar, res.first.B1, res.second.B2, setup.ops.G_W, n_second=0)
    return {
        "full": FullOrderSystem(setup.ops, setup.params),
        "B1": reduce_model(setup.ops, setup.params, B1),
        "B12": reduce_model(setup.ops, setup.params, res.B12),
    }


def test_stand_in_controls():
    tg = TimeGrid(1.0, 4)
    np.testing.assert_allclose(reference_control(tg), [2.0, 3.5, 2.0, 0.5], atol=1e-14)
    np.testing.assert_allclose(guiding_control(tg), [3.0, 2.0, 1.0, 2.0], atol=1e-14)


def test_zero_reference_zero_optimum(small):
    n = small.ops.n_dof
    prob = make_tracking_problem(FullOrderSystem(small.ops, small.params), np.zeros(16), 1e-3,
                                 np.zeros(n))
    assert not prob.target.values.any()
    J, g = objective_and_gradient(prob, np.zeros(16))
    assert J == 0.0 and not g.any()


def test_reference_control_only_pays_regularization(small):
    full = FullOrderSystem(small.ops, small.params)
    u_ref = reference_control(small.tg)
    gamma = 1e-3
    prob = make_tracking_problem(full, u_ref, gamma, small.ybar)
    assert prob.objective(u_ref) == pytest.approx(0.5 * gamma * small.tg.dt * u_ref @ u_ref, rel=1e-12)
    # with gamma = 0 the reference is stationary
    prob0 = make_tracking_problem(full, u_ref, 0.0, small.ybar)
    assert np.linalg.norm(prob0.gradient(u_ref)) <= 1e-14


@pytest.mark.parametrize("kind", ["full", "B1", "B12"])
def test_gradient_matches_finite_differences(small, kind, rng):
    model = models(small)[kind]
    prob = make_tracking_problem(model, reference_control(small.tg), 1e-4, small.ybar)
    u = 2.0 + 0.5 * rng.standard_normal(16)
    g = prob.gradient(u)
    h = 1e-5
    for _ in range(5):
        d = rng.standard_normal(16)
        fd = (prob.objective(u + h * d) - prob.objective(u - h * d)) / (2 * h)
        assert abs(fd - g @ d) <= 1e-5 * abs(fd)


def test_regularization_only_gradient(small, rng):
    full = FullOrderSystem(small.ops, small.params)
    prob = make_tracking_problem(full, reference_control(small.tg), 0.3, small.ybar)
    prob.tracking_weight = 0.0
    u = rng.standard_normal(16)
    np.testing.assert_allclose(prob.gradient(u), 0.3 * small.tg.dt * u, rtol=1e-14)


def test_crank_nicolson_falls_back_to_finite_differences():
    ops = assemble_operators(build_grid(2, 4))
    p = PdeParams(theta=0.5, K_steps=6)
    prob = make_tracking_problem(FullOrderSystem(ops, p), np.ones(6), 1e-3, np.zeros(ops.n_dof))
    with pytest.warns(RuntimeWarning, match="finite differences"):
        g = prob.gradient(np.zeros(6))
    ref = sopt.approx_fprime(np.zeros(6), prob.objective, 1e-7)
    np.testing.assert_allclose(g, ref, rtol=1e-4, atol=1e-12)


def test_linear_problem_matches_normal_equations():
    # 1-D, 8 dofs, 8 steps, no reaction: the objective is an exact quadratic
    ops = assemble_operators(build_grid(1, 9))
    p = PdeParams(a=0.05, b=0.0, K_steps=8)
    tg = TimeGrid.from_params(p)
    gamma, dt, n = 1e-3, tg.dt, ops.n_dof
    y0 = np.sin(np.pi * ops.grid.dof_coordinates[:, 0])
    prob = make_tracking_problem(FullOrderSystem(ops, p), 1.0 + np.arange(8) % 3, gamma, y0)
    step = step_matrices(ops, p.a * ops.K, tg, 1.0)
    free = solve_linear_theta(step, np.zeros(n), y0).values[1:].ravel()
    S = np.column_stack([
        solve_linear_theta(step, np.outer(np.eye(8)[j], ops.load_F), np.zeros(n)).values[1:].ravel()
        for j in range(8)])
    Mb = np.kron(np.eye(8), ops.M.toarray())
    yd = prob.target.values[1:].ravel()
    H = dt * S.T @ Mb @ S + gamma * dt * np.eye(8)
    u_star = np.linalg.solve(H, dt * S.T @ Mb @ (yd - free))
    res = optimize(prob, tol=1e-13, max_iter=500)
    np.testing.assert_allclose(res.u_opt, u_star, rtol=1e-8, atol=1e-8 * np.abs(u_star).max())


def test_objective_decreases_along_iterates(small):
    prob = make_tracking_problem(FullOrderSystem(small.ops, small.params),
                                 reference_control(small.tg), 1e-7, small.ybar)
    res = optimize(prob, tol=1e-9)
    assert res.converged
    assert np.all(np.diff(res.objective_history) <= 0)
    assert 1 <= res.iterations <= 200
    with pytest.raises(ValueError):
        optimize(prob, tol=0.0)


def test_full_objective_agrees_with_problem(small):
    full = FullOrderSystem(small.ops, small.params)
    prob = make_tracking_problem(full, reference_control(small.tg), 1e-5, small.ybar)
    u = np.full(16, 2.0)
    assert full_objective(small.ops, small.params, prob.target, 1e-5, small.ybar, u) == \
        pytest.approx(prob.objective(u), rel=1e-14)
    with pytest.raises(ValueError):
        OcpProblem(full, prob.target, -1.0, small.ybar)


def test_comparison_experiment_rows(small):
    m = models(small)
    rows = run_comparison_experiment(small.ops, small.params, small.ybar,
                                     [("B1", m["B1"]), ("B12", m["B12"])], gamma=1e-7, tol=1e-9)
    assert [r["label"] for r in rows] == ["FEM", "B1", "B12"]
    assert rows[0]["size"] == small.ops.n_dof and rows[0]["relobj"] == 0.0
    assert rows[1]["size"] == m["B1"].n
    for r in rows[1:]:
        assert r["relobj"] == r["relobj_model"] > 0
        assert r["relobj_fem"] >= 0
    assert rows[2]["relobj"] < rows[1]["relobj"]
    with pytest.raises(ValueError):
        run_comparison_experiment(small.ops, small.params, small.ybar, [], relobj="other")


def test_lbfgs_rosenbrock():
    res = minimize_lbfgs(sopt.rosen, sopt.rosen_der, np.array([-1.2, 1.0]), tol=1e-10,
                         max_iter=2000)
    assert res.converged
    np.testing.assert_allclose(res.x, np.ones(2), atol=1e-8)
    assert np.all(np.diff(res.fun_values) <= 0)


def test_lbfgs_quadratic_and_limits(rng):
    A = rng.standard_normal((6, 6))
    A = A @ A.T + np.eye(6)
    b = rng.standard_normal(6)
    res = minimize_lbfgs(lambda x: 0.5 * x @ A @ x - b @ x, lambda x: A @ x - b, np.zeros(6),
                         tol=1e-12)
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), rtol=1e-9)
    capped = minimize_lbfgs(sopt.rosen, sopt.rosen_der, np.zeros(3), max_iter=2)
    assert not capped.converged and capped.iterations == 2
