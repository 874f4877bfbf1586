import logging

import numpy as np
import pytest
import scipy.linalg

from trendbal.errors import SingularityError
from trendbal.solvers import (
    adh_inner,
    basis_pursuit,
    constrained_elastic_net,
    constrained_lasso,
    constrained_ridge,
    fit_weights,
    max_shrinkage,
    ridge_decomposition,
    soft_nonneg_lasso,
)

from helpers import feasible_samples, make_problem, random_problem


def vertex_problem(rng, J=6, K=2):
    """Intercept plus K rows with z1 equal to the control that maximizes the first row."""
    Z = np.vstack([np.ones(J), rng.standard_normal((K, J))])
    j = int(np.argmax(Z[1]))
    return make_problem(Z[:, j], Z), j


def test_max_shrinkage_uniform_for_intercept_only():
    sol = max_shrinkage(make_problem([1.0], np.ones((1, 4))))
    assert sol.w == pytest.approx(np.full(4, 0.25))
    assert sol.method == "MaxShrink"
    assert sol.feas_residual <= 1e-12


def test_square_system_returns_the_unique_weight(caplog):
    prob = make_problem([1.0, 0.5], [[1.0, 1.0], [0.0, 1.0]])
    with caplog.at_level(logging.WARNING, logger="trendbal.solvers"):
        sol = max_shrinkage(prob)
    assert sol.w == pytest.approx([0.5, 0.5])
    assert any("square" in note for note in sol.notes)
    assert "square" in caplog.text


def test_max_shrinkage_has_the_smallest_norm():
    rng = np.random.default_rng(0)
    prob = random_problem(rng, J=8, K=2)
    sol = max_shrinkage(prob)
    for w in feasible_samples(prob, rng):
        assert sol.w @ sol.w <= w @ w + 1e-12


def test_max_shrinkage_is_row_scaling_invariant():
    rng = np.random.default_rng(1)
    prob = random_problem(rng, J=9, K=3)
    d = rng.uniform(0.1, 10.0, size=prob.n_constraints)
    scaled = make_problem(d * prob.z1, d[:, None] * prob.Z)
    assert max_shrinkage(scaled).w == pytest.approx(max_shrinkage(prob).w, abs=1e-10)


def test_basis_pursuit_intercept_only_is_uniform():
    sol = basis_pursuit(make_problem([1.0], np.ones((1, 5))))
    assert sol.w == pytest.approx(np.full(5, 0.2), abs=1e-6)
    assert sol.method == "BasisPursuit"


def test_basis_pursuit_picks_the_matching_control():
    rng = np.random.default_rng(2)
    prob, j = vertex_problem(rng)
    sol = basis_pursuit(prob)
    assert sol.w == pytest.approx(np.eye(prob.n_controls)[j], abs=1e-6)


def test_basis_pursuit_l1_not_above_max_shrinkage():
    eps = 1e-4
    for seed in range(5):
        rng = np.random.default_rng(seed)
        prob = random_problem(rng, J=6, K=1)
        w_bp = basis_pursuit(prob, epsilon=eps).w
        w_a = max_shrinkage(prob).w
        assert np.abs(w_bp).sum() <= np.abs(w_a).sum() + eps * (w_a @ w_a) + 1e-8
        assert np.max(np.abs(prob.z1 - prob.Z @ w_bp)) <= 1e-8


def test_ridge_two_controls():
    prob = make_problem([1.0], [[1.0, 1.0]], q1=[1.0], Q=[[1.0, 0.0]])
    sol = constrained_ridge(prob, 1.0)
    assert sol.w == pytest.approx([2.0 / 3.0, 1.0 / 3.0])
    assert sol.kkt_residual <= 1e-12


def test_ridge_without_balancing_rows_is_max_shrinkage():
    rng = np.random.default_rng(3)
    prob = random_problem(rng, J=7, K=2)
    flat = make_problem(prob.z1, prob.Z, q1=np.zeros(3), Q=np.zeros((3, 7)))
    assert constrained_ridge(flat, 1.0).w == pytest.approx(max_shrinkage(prob).w, abs=1e-10)


def test_ridge_huge_lambda_tends_to_max_shrinkage():
    rng = np.random.default_rng(4)
    prob = random_problem(rng, J=10, K=2, m=8)
    assert constrained_ridge(prob, 1e12).w == pytest.approx(max_shrinkage(prob).w, abs=1e-4)


def test_ridge_matches_its_decomposition():
    rng = np.random.default_rng(5)
    for _ in range(100):
        J = int(rng.integers(4, 41))
        K = int(rng.integers(0, min(5, J - 2) + 1))
        m = int(rng.integers(2, 61))
        prob = random_problem(rng, J=J, K=K, m=m)
        lam = float(rng.uniform(0.5, 5.0))
        direct = constrained_ridge(prob, lam).w
        split = ridge_decomposition(prob, lam).w
        assert split == pytest.approx(direct, abs=1e-8 * max(1.0, np.abs(direct).max()))


def test_balancing_rows_in_the_null_space_reduce_to_ridge():
    rng = np.random.default_rng(6)
    base = random_problem(rng, J=8, K=1)
    null = np.linalg.svd(base.Z)[2][base.n_constraints :]
    Q = rng.standard_normal((5, null.shape[0])) @ null
    q1 = rng.standard_normal(5)
    prob = make_problem(base.z1, base.Z, q1=q1, Q=Q)
    w_a = max_shrinkage(base).w
    w_b = np.linalg.solve(Q.T @ Q + 2.0 * np.eye(8), Q.T @ q1)
    assert constrained_ridge(prob, 2.0).w == pytest.approx(w_a + w_b, abs=1e-10)


def test_balancing_rows_spanned_by_z_give_max_shrinkage():
    rng = np.random.default_rng(7)
    base = random_problem(rng, J=8, K=2)
    B = rng.standard_normal((4, base.n_constraints))
    prob = make_problem(base.z1, base.Z, q1=B @ base.z1, Q=B @ base.Z)
    for lam in (0.1, 1.0, 10.0):
        assert constrained_ridge(prob, lam).w == pytest.approx(max_shrinkage(base).w, abs=1e-9)


def test_ridge_is_row_scaling_invariant():
    rng = np.random.default_rng(8)
    prob = random_problem(rng, J=9, K=2, m=7)
    d = rng.uniform(0.1, 10.0, size=prob.n_constraints)
    scaled = make_problem(d * prob.z1, d[:, None] * prob.Z, q1=prob.q1, Q=prob.Q)
    assert constrained_ridge(scaled, 1.5).w == pytest.approx(constrained_ridge(prob, 1.5).w, abs=1e-9)


def test_ridge_monotone_and_continuous_in_lambda():
    rng = np.random.default_rng(9)
    prob = random_problem(rng, J=12, K=2, m=10)
    norms, fits = [], []
    for lam in (0.01, 0.1, 1.0, 10.0, 100.0):
        w = constrained_ridge(prob, lam).w
        norms.append(w @ w)
        fits.append(np.sum((prob.q1 - prob.Q @ w) ** 2))
    assert all(a >= b - 1e-10 for a, b in zip(norms, norms[1:]))
    assert all(a <= b + 1e-10 for a, b in zip(fits, fits[1:]))
    near = constrained_ridge(prob, 1.0 + 1e-7).w
    assert near == pytest.approx(constrained_ridge(prob, 1.0).w, abs=1e-5)


def test_ridge_zero_lambda_needs_nonsingular_gram():
    rng = np.random.default_rng(10)
    prob = random_problem(rng, J=10, K=1, m=4)
    with pytest.raises(SingularityError):
        constrained_ridge(prob, 0.0)


def test_l1_family_at_zero_lambda_with_fewer_balancing_rows_than_controls():
    rng = np.random.default_rng(22)
    prob = random_problem(rng, J=10, K=1, m=4)
    ties = scipy.linalg.null_space(np.vstack([prob.Z, prob.Q]))
    assert ties.shape[1] > 0
    fits = [
        constrained_lasso(prob, 0.0),
        soft_nonneg_lasso(prob, 0.0, 3.0),
        constrained_elastic_net(prob, 0.0, 0.5),
    ]
    for sol in fits:
        assert sol.feas_residual <= 1e-8 * (1 + np.abs(prob.z1).max())
        assert sol.kkt_residual <= 1e-8
        assert sol.objective == pytest.approx(0.0, abs=1e-10)
        for shift in ties.T:
            other = sol.w + shift
            assert sol.w @ sol.w <= other @ other + 1e-12
    assert fits[1].w == pytest.approx(fits[0].w, abs=1e-12)
    assert fits[2].w == pytest.approx(fits[0].w, abs=1e-12)


def test_l1_family_at_zero_lambda_keeps_the_best_fit():
    rng = np.random.default_rng(23)
    prob = random_problem(rng, J=12, K=2, m=6)
    sol = constrained_lasso(prob, 0.0)
    best = 0.5 * np.sum((prob.q1 - prob.Q @ sol.w) ** 2)
    for w in feasible_samples(prob, rng):
        assert best <= 0.5 * np.sum((prob.q1 - prob.Q @ w) ** 2) + 1e-10


def test_lasso_zero_lambda_is_limit_of_ridge():
    rng = np.random.default_rng(11)
    prob = random_problem(rng, J=8, K=1, m=15)
    assert constrained_lasso(prob, 0.0).w == pytest.approx(constrained_ridge(prob, 1e-10).w, abs=1e-6)


def test_lasso_huge_lambda_reaches_basis_pursuit_l1():
    rng = np.random.default_rng(12)
    prob = random_problem(rng, J=7, K=1, m=5)
    w_lasso = constrained_lasso(prob, 1e9).w
    w_bp = basis_pursuit(prob).w
    assert np.abs(w_lasso).sum() == pytest.approx(np.abs(w_bp).sum(), abs=1e-5)


def test_lasso_certificate():
    rng = np.random.default_rng(13)
    prob = random_problem(rng, J=8, K=2, m=12)
    sol = constrained_lasso(prob, 2.0)
    assert sol.method == "CLasso"
    assert sol.kkt_residual <= 1e-6
    assert sol.feas_residual <= 1e-8 * (1 + np.abs(prob.z1).max())


def test_elastic_net_endpoints():
    rng = np.random.default_rng(14)
    prob = random_problem(rng, J=8, K=1, m=6)
    assert constrained_elastic_net(prob, 1.5, 0.0).w == pytest.approx(constrained_ridge(prob, 1.5).w, abs=1e-9)
    assert constrained_elastic_net(prob, 1.5, 1.0).w == pytest.approx(constrained_lasso(prob, 1.5).w, abs=1e-12)


def test_elastic_net_beats_sampled_feasible_points():
    rng = np.random.default_rng(15)
    prob = random_problem(rng, J=8, K=2, m=6)
    lam, alpha = 1.0, 0.5

    def objective(w):
        fit = prob.q1 - prob.Q @ w
        return 0.5 * fit @ fit + 0.5 * lam * (1 - alpha) * w @ w + lam * alpha * np.abs(w).sum()

    sol = constrained_elastic_net(prob, lam, alpha)
    assert sol.objective == pytest.approx(objective(sol.w))
    for w in feasible_samples(prob, rng, scale=0.5):
        assert sol.objective <= objective(w) + 1e-9


def test_lasso_beats_sampled_feasible_points():
    rng = np.random.default_rng(24)
    prob = random_problem(rng, J=9, K=2, m=7)
    lam = 0.8

    def objective(w):
        fit = prob.q1 - prob.Q @ w
        return 0.5 * fit @ fit + lam * np.abs(w).sum()

    sol = constrained_lasso(prob, lam)
    assert sol.objective == pytest.approx(objective(sol.w))
    for w in feasible_samples(prob, rng, scale=0.5):
        assert sol.objective <= objective(w) + 1e-9


def test_soft_nonneg_beats_sampled_feasible_points():
    rng = np.random.default_rng(25)
    prob = random_problem(rng, J=9, K=2, m=7)
    lam, kappa = 0.8, 4.0

    def objective(w):
        fit = prob.q1 - prob.Q @ w
        return 0.5 * fit @ fit + lam * (np.maximum(w, 0.0).sum() + kappa * np.maximum(-w, 0.0).sum())

    sol = soft_nonneg_lasso(prob, lam, kappa)
    assert sol.objective == pytest.approx(objective(sol.w))
    for w in feasible_samples(prob, rng, scale=0.5):
        assert sol.objective <= objective(w) + 1e-9


@pytest.mark.parametrize(
    "fit",
    [
        lambda prob: constrained_lasso(prob, 1.0),
        lambda prob: soft_nonneg_lasso(prob, 1.0, 3.0),
        lambda prob: constrained_elastic_net(prob, 1.0, 0.5),
        lambda prob: basis_pursuit(prob),
    ],
    ids=["classo", "softnn", "cenet", "bp"],
)
def test_l1_solvers_are_row_scaling_invariant(fit):
    rng = np.random.default_rng(26)
    prob = random_problem(rng, J=9, K=2, m=7)
    d = rng.uniform(0.1, 10.0, size=prob.n_constraints)
    scaled = make_problem(d * prob.z1, d[:, None] * prob.Z, q1=prob.q1, Q=prob.Q)
    assert fit(scaled).w == pytest.approx(fit(prob).w, abs=1e-6)


def test_soft_nonneg_kappa_one_is_lasso():
    rng = np.random.default_rng(16)
    prob = random_problem(rng, J=8, K=1, m=6)
    assert soft_nonneg_lasso(prob, 1.0, 1.0).w == pytest.approx(constrained_lasso(prob, 1.0).w, abs=1e-12)


def test_soft_nonneg_large_kappa_is_nonnegative():
    rng = np.random.default_rng(17)
    prob = random_problem(rng, J=10, K=2, m=6, nonneg=True)
    sol = soft_nonneg_lasso(prob, 1.0, 1e6)
    assert sol.w.min() >= -1e-6
    assert sol.feas_residual <= 1e-8


def test_soft_nonneg_outside_the_hull_stays_feasible():
    rng = np.random.default_rng(18)
    x = rng.standard_normal(6)
    prob = make_problem([1.0, x.max() + 1.0], np.vstack([np.ones(6), x]), q1=np.zeros(2), Q=rng.standard_normal((2, 6)))
    sol = soft_nonneg_lasso(prob, 1.0, 10.0)
    assert sol.w.min() < 0
    assert sol.feas_residual <= 1e-8
    with pytest.raises(ValueError):
        soft_nonneg_lasso(prob, 1.0, 0.5)


def test_adh_recovers_a_hull_vertex():
    rng = np.random.default_rng(19)
    prob, j = vertex_problem(rng)
    sol = adh_inner(prob)
    assert sol.w == pytest.approx(np.eye(prob.n_controls)[j], abs=1e-6)
    assert sol.objective <= 1e-10


def test_adh_symmetric_kernel_is_uniform():
    prob = make_problem([1.0, 0.0], [[1.0, 1.0, 1.0, 1.0], [-2.0, -1.0, 1.0, 2.0]])
    sol = adh_inner(prob)
    assert sol.w == pytest.approx(np.full(4, 0.25), abs=1e-6)
    assert any("tie-break" in note for note in sol.notes)


def test_adh_outside_the_hull_goes_to_the_nearest_control():
    x = np.array([0.3, -1.0, 2.0, 0.7, 1.1])
    prob = make_problem([1.0, 3.0], np.vstack([np.ones(5), x]))
    sol = adh_inner(prob)
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    assert sol.w == pytest.approx(np.eye(5)[2], abs=1e-6)
    assert sol.w.sum() == pytest.approx(1.0, abs=1e-9)
    assert sol.feas_residual == pytest.approx(1.0, abs=1e-6)


def test_every_equality_method_is_feasible():
    rng = np.random.default_rng(20)
    prob = random_problem(rng, J=10, K=2, m=8)
    bound = 1e-8 * (1 + np.abs(prob.z1).max())
    for method in ("maxshrink", "bp", "cridge", "classo", "cenet", "softnn"):
        sol = fit_weights(prob, method, lam=1.0, alpha=0.5, kappa=2.0)
        assert sol.feas_residual <= bound, method


def test_dispatch_and_outcome_dependence():
    rng = np.random.default_rng(21)
    base = random_problem(rng, J=8, K=1, m=5)
    prob = base.model_copy(update={"balancing_uses_outcomes": True})
    assert fit_weights(prob, "cridge", lam=1.0).depends_on_pre_outcomes
    assert not fit_weights(prob, "maxshrink").depends_on_pre_outcomes
    assert fit_weights(prob, "CRidge", lam=1.0).method == "CRidge"
    with pytest.raises(ValueError):
        fit_weights(prob, "lasso-ish")
