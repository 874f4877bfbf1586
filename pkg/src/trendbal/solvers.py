"""Weight estimators that balance trending covariates exactly.

Every solver returns a ``WeightSolution`` whose ``feas_residual`` is
``max|z1 - Zw|``. The closed-form estimators factor once with Cholesky and
solve the Schur complement; the l1-type estimators split ``w = w+ - w-`` and go
through ``trendbal.qp.solve_qp``.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, null_space

from .config import settings
from .dto import CovariateProblem, MethodTag, WeightSolution
from .errors import RankDeficientError, SingularityError
from .qp import QpProblem, QpSolution, solve_qp


logger = logging.getLogger("trendbal.solvers")

_ZERO_TOL = 1e-8

_USES_BALANCING = {"CRidge", "CLasso", "CElasticNet", "SoftNonneg"}


def _feasibility(prob: CovariateProblem, w: np.ndarray) -> float:
    return float(np.max(np.abs(prob.z1 - prob.Z @ w), initial=0.0))


def _depends(prob: CovariateProblem, method: MethodTag) -> bool:
    if prob.trending_uses_outcomes:
        return True
    return method in _USES_BALANCING and prob.balancing_uses_outcomes and prob.n_balancing > 0


def _warn_square(prob: CovariateProblem, notes: List[str]) -> None:
    if prob.n_constraints == prob.n_controls:
        message = "square constraint system; the unique feasible weight is returned"
        logger.warning(message)
        notes.append(message)


def _cholesky(matrix: np.ndarray, what: str):
    try:
        return cho_factor(matrix, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError(f"{what} is not positive definite") from exc


def _equality_constrained(
    G: np.ndarray,
    rhs: np.ndarray,
    Z: np.ndarray,
    z1: np.ndarray,
    what: str,
) -> Tuple[np.ndarray, np.ndarray]:
    """Minimize ``w'Gw/2 - rhs'w`` subject to ``Zw = z1`` for positive definite G.

    Returns the weights and the multipliers of ``Gw - rhs + Z'nu = 0``.
    """
    factor = _cholesky(G, what)
    w_free = cho_solve(factor, rhs)
    GiZt = cho_solve(factor, Z.T)
    schur = Z @ GiZt
    schur_factor = _cholesky(schur, "Z G^-1 Z'")
    nu = cho_solve(schur_factor, Z @ w_free - z1)
    return w_free - GiZt @ nu, nu


def max_shrinkage(prob: CovariateProblem) -> WeightSolution:
    """Minimum-norm feasible weights ``Z'(ZZ')^-1 z1``."""
    Z = prob.Z
    try:
        factor = cho_factor(Z @ Z.T, check_finite=False)
    except LinAlgError as exc:
        raise RankDeficientError("ZZ' is singular; Z must have full row rank") from exc
    w = Z.T @ cho_solve(factor, prob.z1)
    notes: List[str] = []
    _warn_square(prob, notes)
    return WeightSolution(
        w=w,
        method="MaxShrink",
        feas_residual=_feasibility(prob, w),
        objective=float(w @ w),
        depends_on_pre_outcomes=_depends(prob, "MaxShrink"),
        notes=notes,
    )


def constrained_ridge_arrays(
    q1: np.ndarray,
    Q: np.ndarray,
    z1: np.ndarray,
    Z: np.ndarray,
    lam: float,
) -> Tuple[np.ndarray, float]:
    """Closed-form constrained ridge: weights and relative KKT residual."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    J = Z.shape[1]
    if lam == 0.0 and (Q.shape[0] < J or np.linalg.matrix_rank(Q) < J):
        raise SingularityError("Q'Q is singular at lambda=0; use lambda > 0")
    G = Q.T @ Q + lam * np.eye(J)
    rhs = Q.T @ q1
    w, nu = _equality_constrained(G, rhs, Z, z1, "Q'Q + lambda*I")
    stationarity = G @ w - rhs + Z.T @ nu
    scale = max(1.0, float(np.max(np.abs(rhs), initial=0.0)), float(np.max(np.abs(G), initial=0.0)))
    return w, float(np.max(np.abs(stationarity), initial=0.0)) / scale


def constrained_ridge(prob: CovariateProblem, lam: float) -> WeightSolution:
    """Minimize ``|q1 - Qw|^2 + lam*w'w`` subject to ``z1 = Zw``."""
    w, residual = constrained_ridge_arrays(prob.q1, prob.Q, prob.z1, prob.Z, float(lam))
    notes: List[str] = []
    _warn_square(prob, notes)
    fit = prob.q1 - prob.Q @ w
    return WeightSolution(
        w=w,
        method="CRidge",
        lam=lam,
        alpha=0.0,
        feas_residual=_feasibility(prob, w),
        kkt_residual=residual,
        objective=float(fit @ fit + lam * w @ w),
        depends_on_pre_outcomes=_depends(prob, "CRidge"),
        notes=notes,
    )


def ridge_decomposition(prob: CovariateProblem, lam: float) -> WeightSolution:
    """Constrained ridge as max-shrinkage plus a ridge fit on the residualized system.

    ``B = QZ'(ZZ')^-1``, ``Qt = Q - BZ`` and ``qt = q1 - Bz1``; the second part is
    confined to the null space of Z because the rows of Qt are.
    """
    lam = float(lam)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    Z = prob.Z
    Q = prob.Q
    J = prob.n_controls
    if lam == 0.0 and (Q.shape[0] < J or np.linalg.matrix_rank(Q) < J):
        raise SingularityError("Q'Q is singular at lambda=0; use lambda > 0")
    zz = _cholesky(Z @ Z.T, "ZZ'")
    w_a = Z.T @ cho_solve(zz, prob.z1)
    B = cho_solve(zz, Z @ Q.T).T
    Q_tilde = Q - B @ Z
    q_tilde = prob.q1 - B @ prob.z1
    if lam > 0.0:
        factor = _cholesky(Q_tilde.T @ Q_tilde + lam * np.eye(J), "Qt'Qt + lambda*I")
        w_b = cho_solve(factor, Q_tilde.T @ q_tilde)
    else:
        w_b, *_ = np.linalg.lstsq(Q_tilde, q_tilde, rcond=None)
    w = w_a + w_b
    fit = prob.q1 - Q @ w
    return WeightSolution(
        w=w,
        method="CRidge",
        lam=lam,
        alpha=0.0,
        feas_residual=_feasibility(prob, w),
        objective=float(fit @ fit + lam * w @ w),
        depends_on_pre_outcomes=_depends(prob, "CRidge"),
        notes=["ridge decomposition"],
    )


def _min_norm_least_squares(
    prob: CovariateProblem,
    q1: np.ndarray,
    Q: np.ndarray,
) -> Tuple[np.ndarray, float]:
    """Smallest-norm minimizer of ``|q1 - Qw|^2`` over ``Zw = z1`` and its relative stationarity residual.

    With ``w = w_a + Nv`` for an orthonormal null-space basis N of Z, the
    minimum-norm least-squares ``v`` gives the minimum-norm ``w`` since ``w_a``
    is orthogonal to the null space. Unique minimizers are returned unchanged.
    """
    zz = _cholesky(prob.Z @ prob.Z.T, "ZZ'")
    w_a = prob.Z.T @ cho_solve(zz, prob.z1)
    N = null_space(prob.Z)
    QN = Q @ N
    if QN.size:
        v, *_ = np.linalg.lstsq(QN, q1 - Q @ w_a, rcond=None)
    else:
        v = np.zeros(N.shape[1])
    w = w_a + N @ v
    grad = QN.T @ (Q @ w - q1)
    scale = max(
        1.0,
        float(np.max(np.abs(Q.T @ q1), initial=0.0)),
        float(np.max(np.abs(Q.T @ Q), initial=0.0)),
    )
    return w, float(np.max(np.abs(grad), initial=0.0)) / scale


def _split_qp(
    prob: CovariateProblem,
    q1: np.ndarray,
    Q: np.ndarray,
    pen_pos: float,
    pen_neg: float,
    quad: float,
) -> QpProblem:
    """``1/2|q1 - Qw|^2 + quad*w'w + pen_pos*sum(w+) + pen_neg*sum(w-)`` in split variables."""
    J = prob.n_controls
    D = np.hstack([np.eye(J), -np.eye(J)])
    gram = Q.T @ Q + 2.0 * quad * np.eye(J)
    P = D.T @ gram @ D
    P = 0.5 * (P + P.T)
    f = -D.T @ (Q.T @ q1) + np.concatenate([np.full(J, pen_pos), np.full(J, pen_neg)])
    return QpProblem(P=P, f=f, Aeq=prob.Z @ D, beq=prob.z1, nonneg=np.ones(2 * J, dtype=bool))


def l1_certificate(
    prob: CovariateProblem,
    w: np.ndarray,
    nu: np.ndarray,
    *,
    q1: Optional[np.ndarray] = None,
    Q: Optional[np.ndarray] = None,
    pen_pos: float,
    pen_neg: float,
    quad: float = 0.0,
) -> float:
    """Subgradient optimality violation of an l1-type weight, relative to the problem scale.

    With ``g = Q'(q1 - Qw) - 2*quad*w - Z'nu``: ``g_j = pen_pos`` where ``w_j > 0``,
    ``g_j = -pen_neg`` where ``w_j < 0`` and ``-pen_neg <= g_j <= pen_pos`` otherwise.
    """
    q1 = prob.q1 if q1 is None else q1
    Q = prob.Q if Q is None else Q
    g = Q.T @ (q1 - Q @ w) - 2.0 * quad * w - prob.Z.T @ nu
    scale = max(
        1.0,
        pen_pos,
        pen_neg,
        float(np.max(np.abs(Q.T @ q1), initial=0.0)),
        float(np.max(np.abs(Q.T @ Q), initial=0.0)),
    )
    return subgradient_violation(g, w, pen_pos, pen_neg) / scale


def subgradient_violation(g: np.ndarray, w: np.ndarray, pen_pos: float, pen_neg: float) -> float:
    """Largest distance of ``g_j`` from the subdifferential of the split l1 penalty at ``w_j``."""
    pos = w > _ZERO_TOL
    neg = w < -_ZERO_TOL
    zero = ~(pos | neg)
    violation = np.zeros_like(w)
    violation[pos] = np.abs(g[pos] - pen_pos)
    violation[neg] = np.abs(g[neg] + pen_neg)
    violation[zero] = np.maximum(np.maximum(g[zero] - pen_pos, -pen_neg - g[zero]), 0.0)
    return float(np.max(violation, initial=0.0))


def _solve_split(
    prob: CovariateProblem,
    q1: np.ndarray,
    Q: np.ndarray,
    pen_pos: float,
    pen_neg: float,
    quad: float,
) -> Tuple[np.ndarray, QpSolution, float]:
    J = prob.n_controls
    solution = solve_qp(_split_qp(prob, q1, Q, pen_pos, pen_neg, quad))
    w = solution.x[:J] - solution.x[J:]
    certificate = l1_certificate(
        prob, w, solution.eq_multipliers, q1=q1, Q=Q, pen_pos=pen_pos, pen_neg=pen_neg, quad=quad
    )
    return w, solution, certificate


def basis_pursuit(
    prob: CovariateProblem,
    epsilon: float = settings.bp_epsilon,
    alpha: float = 1.0,
) -> WeightSolution:
    """Minimize ``alpha*|w|_1 + (1-alpha)/2*w'w + epsilon*w'w`` subject to ``z1 = Zw``."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    J = prob.n_controls
    quad = epsilon + 0.5 * (1.0 - alpha)
    empty_q = np.zeros(0)
    empty_Q = np.zeros((0, J))
    w, solution, certificate = _solve_split(prob, empty_q, empty_Q, alpha, alpha, quad)
    notes: List[str] = []
    _warn_square(prob, notes)
    if solution.regularized:
        notes.append("KKT matrix regularized with 1e-12 ridge")
    return WeightSolution(
        w=w,
        method="BasisPursuit",
        alpha=alpha,
        epsilon=epsilon,
        feas_residual=_feasibility(prob, w),
        kkt_residual=max(solution.kkt_residual, certificate),
        objective=float(alpha * np.abs(w).sum() + quad * w @ w),
        regularized=solution.regularized,
        depends_on_pre_outcomes=_depends(prob, "BasisPursuit"),
        notes=notes,
    )


def _lasso_like(
    prob: CovariateProblem,
    method: MethodTag,
    lam: float,
    alpha: float,
    kappa: float,
) -> WeightSolution:
    """Shared path of the lasso, elastic-net and soft-nonnegativity estimators."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    notes: List[str] = []
    _warn_square(prob, notes)
    q1 = prob.q1
    Q = prob.Q
    ridge_weight = lam * (1.0 - alpha)
    if ridge_weight > 0.0:
        J = prob.n_controls
        q1 = np.concatenate([q1, np.zeros(J)])
        Q = np.vstack([Q, np.sqrt(ridge_weight) * np.eye(J)])
    pen_pos = lam * alpha
    pen_neg = pen_pos * kappa

    regularized = False
    if pen_pos == 0.0:
        # no l1 part left; ties in the null space of Q go to the smallest norm
        w, residual = _min_norm_least_squares(prob, q1, Q)
    else:
        w, solution, certificate = _solve_split(prob, q1, Q, pen_pos, pen_neg, 0.0)
        residual = max(solution.kkt_residual, certificate)
        regularized = solution.regularized
        if regularized:
            notes.append("KKT matrix regularized with 1e-12 ridge")
    fit = prob.q1 - prob.Q @ w
    penalty = pen_pos * np.maximum(w, 0.0).sum() + pen_neg * np.maximum(-w, 0.0).sum()
    return WeightSolution(
        w=w,
        method=method,
        lam=lam,
        alpha=alpha,
        kappa=kappa,
        feas_residual=_feasibility(prob, w),
        kkt_residual=residual,
        objective=float(0.5 * fit @ fit + 0.5 * ridge_weight * w @ w + penalty),
        regularized=regularized,
        depends_on_pre_outcomes=_depends(prob, method),
        notes=notes,
    )


def constrained_lasso(prob: CovariateProblem, lam: float) -> WeightSolution:
    """Minimize ``1/2|q1 - Qw|^2 + lam*|w|_1`` subject to ``z1 = Zw``."""
    return _lasso_like(prob, "CLasso", float(lam), 1.0, 1.0)


def constrained_elastic_net(prob: CovariateProblem, lam: float, alpha: float) -> WeightSolution:
    """Lasso on ``[q1; 0]``, ``[Q; sqrt(lam*(1-alpha)) I]`` with penalty ``lam*alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return _lasso_like(prob, "CElasticNet", float(lam), float(alpha), 1.0)


def soft_nonneg_lasso(prob: CovariateProblem, lam: float, kappa: float) -> WeightSolution:
    """Lasso whose negative parts cost ``kappa`` times the positive parts."""
    if kappa < 1.0:
        raise ValueError("kappa must be at least 1")
    return _lasso_like(prob, "SoftNonneg", float(lam), 1.0, float(kappa))


def _is_intercept_row(z1: float, row: np.ndarray) -> bool:
    return z1 == 1.0 and bool(np.all(row == 1.0))


def adh_inner(
    prob: CovariateProblem,
    V: Optional[np.ndarray] = None,
    ridge: float = settings.adh_ridge,
) -> WeightSolution:
    """Simplex weights minimizing ``(z1 - Zw)'V(z1 - Zw)`` over the non-intercept rows.

    ``V`` is the diagonal, one entry per non-intercept row (default all ones). A
    ``ridge*w'w`` term picks one weight among tied minimizers.
    """
    keep = [k for k in range(prob.n_constraints) if not _is_intercept_row(prob.z1[k], prob.Z[k])]
    Zt = prob.Z[keep]
    zt = prob.z1[keep]
    J = prob.n_controls
    if V is None:
        diag = np.ones(len(keep))
    else:
        diag = np.asarray(V, dtype=float).reshape(-1)
        if diag.shape[0] != len(keep):
            raise ValueError(f"V needs {len(keep)} diagonal entries, got {diag.shape[0]}")
        if np.any(diag < 0) or not np.all(np.isfinite(diag)):
            raise ValueError("V entries must be finite and nonnegative")
    weighted = Zt.T * diag
    P = 2.0 * (weighted @ Zt + ridge * np.eye(J))
    P = 0.5 * (P + P.T)
    f = -2.0 * weighted @ zt
    problem = QpProblem(P=P, f=f, Aeq=np.ones((1, J)), beq=np.ones(1), nonneg=np.ones(J, dtype=bool))
    solution = solve_qp(problem)
    w = solution.x
    gap = zt - Zt @ w
    notes = [f"tie-break ridge {ridge:.0e}*w'w added to the V-objective"]
    if solution.regularized:
        notes.append("KKT matrix regularized with 1e-12 ridge")
    return WeightSolution(
        w=w,
        method="AdhInner",
        feas_residual=_feasibility(prob, w),
        kkt_residual=solution.kkt_residual,
        objective=float(gap @ (diag * gap)),
        regularized=solution.regularized,
        depends_on_pre_outcomes=_depends(prob, "AdhInner"),
        notes=notes,
    )


METHOD_NAMES: Dict[str, MethodTag] = {
    "maxshrink": "MaxShrink",
    "bp": "BasisPursuit",
    "cridge": "CRidge",
    "classo": "CLasso",
    "cenet": "CElasticNet",
    "softnn": "SoftNonneg",
    "adh": "AdhInner",
}


def fit_weights(
    prob: CovariateProblem,
    method: str,
    *,
    lam: float = 0.0,
    alpha: float = 1.0,
    kappa: float = 1.0,
    epsilon: float = settings.bp_epsilon,
    V: Optional[np.ndarray] = None,
) -> WeightSolution:
    """Dispatch on a CLI method name or a method tag."""
    tag = METHOD_NAMES.get(method.lower(), method)
    dispatch: Dict[str, Callable[[], WeightSolution]] = {
        "MaxShrink": lambda: max_shrinkage(prob),
        "BasisPursuit": lambda: basis_pursuit(prob, epsilon=epsilon, alpha=alpha),
        "CRidge": lambda: constrained_ridge(prob, lam),
        "CLasso": lambda: constrained_lasso(prob, lam),
        "CElasticNet": lambda: constrained_elastic_net(prob, lam, alpha),
        "SoftNonneg": lambda: soft_nonneg_lasso(prob, lam, kappa),
        "AdhInner": lambda: adh_inner(prob, V),
    }
    if tag not in dispatch:
        raise ValueError(f"unknown method: {method!r}")
    return dispatch[tag]()


__all__ = [
    "max_shrinkage",
    "basis_pursuit",
    "constrained_ridge",
    "ridge_decomposition",
    "constrained_ridge_arrays",
    "constrained_lasso",
    "constrained_elastic_net",
    "soft_nonneg_lasso",
    "adh_inner",
    "l1_certificate",
    "subgradient_violation",
    "fit_weights",
    "METHOD_NAMES",
]
