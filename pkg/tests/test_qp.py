import numpy as np
import pytest
import scipy.linalg
from pydantic import ValidationError
from scipy.optimize import minimize

from trendbal.errors import QpInfeasibleError
from trendbal.qp import QpProblem, kkt_residual, solve_qp


def make_qp(P, f, Aeq, beq, nonneg=True):
    n = len(f)
    mask = np.full(n, nonneg, dtype=bool) if isinstance(nonneg, bool) else nonneg
    return QpProblem(P=P, f=f, Aeq=np.atleast_2d(Aeq), beq=np.atleast_1d(beq), nonneg=mask)


def random_convex_qp(rng, n=6, p=2):
    M = rng.standard_normal((n, n))
    P = M @ M.T + 0.5 * np.eye(n)
    f = rng.standard_normal(n)
    A = rng.standard_normal((p, n))
    x0 = rng.uniform(0.5, 1.5, size=n)
    return make_qp(0.5 * (P + P.T), f, A, A @ x0), x0


def test_simplex_midpoint():
    sol = solve_qp(make_qp(np.eye(2), np.zeros(2), [[1.0, 1.0]], [1.0]))
    assert sol.x == pytest.approx([0.5, 0.5], abs=1e-9)
    assert sol.kkt_residual <= 1e-7


def test_equality_only_is_minimum_norm():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((2, 5))
    b = rng.standard_normal(2)
    sol = solve_qp(make_qp(np.eye(5), np.zeros(5), A, b, nonneg=False))
    expected = A.T @ np.linalg.solve(A @ A.T, b)
    assert sol.x == pytest.approx(expected, abs=1e-9)


def test_matches_slsqp_oracle():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        problem, x0 = random_convex_qp(rng)
        sol = solve_qp(problem)
        oracle = minimize(
            problem.objective,
            x0,
            jac=lambda x: problem.P @ x + problem.f,
            method="SLSQP",
            bounds=[(0.0, None)] * problem.n,
            constraints=[{"type": "eq", "fun": lambda x: problem.Aeq @ x - problem.beq, "jac": lambda x: problem.Aeq}],
            options={"ftol": 1e-14, "maxiter": 1000},
        )
        assert oracle.success
        assert sol.obj <= problem.objective(oracle.x) + 1e-8
        assert sol.x == pytest.approx(oracle.x, abs=1e-5)


def test_certificate_and_feasibility():
    rng = np.random.default_rng(11)
    problem, _ = random_convex_qp(rng, n=8, p=3)
    sol = solve_qp(problem)
    assert sol.x.min() >= -1e-12
    assert np.max(np.abs(problem.Aeq @ sol.x - problem.beq)) <= 1e-9 * (1 + np.max(np.abs(problem.beq)))
    scale = max(1.0, np.max(np.abs(problem.P)), np.max(np.abs(problem.f)))
    residual = kkt_residual(
        problem.P, problem.f, problem.Aeq, sol.x, sol.eq_multipliers, sol.bound_multipliers, problem.nonneg
    )
    assert residual <= 1e-6 * scale
    assert sol.bound_multipliers.min() >= -1e-6 * scale


def test_no_sampled_feasible_point_does_better():
    rng = np.random.default_rng(12)
    problem, x0 = random_convex_qp(rng, n=7, p=2)
    sol = solve_qp(problem)
    null = scipy.linalg.null_space(problem.Aeq)
    checked = 0
    while checked < 100:
        x = x0 + null @ (0.3 * rng.standard_normal(null.shape[1]))
        if x.min() < 0:
            continue
        assert sol.obj <= problem.objective(x) + 1e-9
        checked += 1


def test_objective_scaling_does_not_move_the_solution():
    rng = np.random.default_rng(13)
    problem, _ = random_convex_qp(rng)
    scaled = QpProblem(
        P=1000.0 * problem.P, f=1000.0 * problem.f, Aeq=problem.Aeq, beq=problem.beq, nonneg=problem.nonneg
    )
    assert solve_qp(scaled).x == pytest.approx(solve_qp(problem).x, abs=1e-7)


def test_infeasible_bounds():
    with pytest.raises(QpInfeasibleError) as info:
        solve_qp(make_qp(np.eye(2), np.zeros(2), [[1.0, 1.0]], [-1.0]))
    assert info.value.certificate > 0


def test_unconstrained_bounds_only():
    sol = solve_qp(QpProblem(P=np.eye(3), f=[1.0, -2.0, 0.5], Aeq=np.zeros((0, 3)), beq=np.zeros(0), nonneg=[True] * 3))
    assert sol.x == pytest.approx([0.0, 2.0, 0.0], abs=1e-9)


def test_problem_validation():
    with pytest.raises(ValidationError):
        make_qp([[1.0, 0.5], [0.0, 1.0]], np.zeros(2), [[1.0, 1.0]], [1.0])
    with pytest.raises(ValidationError):
        make_qp(np.eye(2), np.zeros(2), [[1.0, 1.0], [2.0, 2.0]], [1.0, 2.0])
