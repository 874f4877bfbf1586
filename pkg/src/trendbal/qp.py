"""Small dense convex QP kernel with equality constraints and nonnegativity bounds.

Solves ``min 1/2 x'Px + f'x  s.t.  Aeq x = beq,  x_i >= 0 for masked i`` with a
Mehrotra predictor-corrector interior point method followed by an active-set
polish that fixes the identified bounds at zero and solves the remaining
equality-constrained QP in the null space of the active constraints. Every
returned point carries its KKT certificate.
"""

from __future__ import annotations

import logging
import warnings
from typing import Any, Optional, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.optimize import linprog

from .config import settings
from .dto import _coerce_array
from .errors import QpInfeasibleError, QpNonConvergenceError


logger = logging.getLogger("trendbal.qp")

_FRACTION_TO_BOUNDARY = 0.995
_REGULARIZATION = 1e-12


class QpProblem(BaseModel):
    P: np.ndarray
    f: np.ndarray
    Aeq: np.ndarray
    beq: np.ndarray
    nonneg: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("P", "Aeq", mode="before")
    @classmethod
    def _parse_matrix(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=2)

    @field_validator("f", "beq", mode="before")
    @classmethod
    def _parse_vector(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=1)

    @field_validator("nonneg", mode="before")
    @classmethod
    def _parse_mask(cls, value: Any) -> np.ndarray:
        mask = np.array(value, dtype=bool)
        if mask.ndim != 1:
            raise ValueError("nonneg must be a boolean vector")
        mask.setflags(write=False)
        return mask

    @model_validator(mode="after")
    def _check_invariants(self) -> "QpProblem":
        n = self.f.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.P.shape}")
        if self.nonneg.shape[0] != n:
            raise ValueError("nonneg mask must have one entry per variable")
        if not np.allclose(self.P, self.P.T, atol=1e-10, rtol=0.0):
            raise ValueError("P must be symmetric")
        p = self.beq.shape[0]
        if self.Aeq.shape != (p, n) and not (p == 0 and self.Aeq.size == 0):
            raise ValueError(f"Aeq must be {p}x{n}, got {self.Aeq.shape}")
        if p > n:
            raise ValueError("more equality constraints than variables")
        if p and np.linalg.matrix_rank(self.Aeq) < p:
            raise ValueError("Aeq must have full row rank")
        return self

    @property
    def n(self) -> int:
        return self.f.shape[0]

    @property
    def p(self) -> int:
        return self.beq.shape[0]

    def equality_matrix(self) -> np.ndarray:
        return self.Aeq.reshape(self.p, self.n)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.f @ x)


class QpSolution(BaseModel):
    x: np.ndarray
    eq_multipliers: np.ndarray
    bound_multipliers: np.ndarray
    obj: float
    kkt_residual: float
    feas_residual: float
    iterations: int
    regularized: bool = False
    polished: bool = False

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("x", "eq_multipliers", "bound_multipliers", mode="before")
    @classmethod
    def _parse_vector(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=1)


def kkt_residual(
    P: np.ndarray,
    f: np.ndarray,
    A: np.ndarray,
    x: np.ndarray,
    nu: np.ndarray,
    mu: np.ndarray,
    mask: np.ndarray,
) -> float:
    """Worst violation of stationarity, dual feasibility and complementarity."""
    bound = np.zeros_like(x)
    bound[mask] = mu
    stationarity = P @ x + f + A.T @ nu - bound
    parts = [np.max(np.abs(stationarity), initial=0.0)]
    if mask.any():
        xb = x[mask]
        parts.append(np.max(np.abs(mu * xb), initial=0.0))
        parts.append(np.max(np.maximum(-mu, 0.0), initial=0.0))
        parts.append(np.max(np.maximum(-xb, 0.0), initial=0.0))
    return float(max(parts))


def _phase_one(A: np.ndarray, b: np.ndarray, mask: np.ndarray, feas_tol: float) -> None:
    """Raise ``QpInfeasibleError`` when no x >= 0 (on the mask) satisfies Ax = b."""
    p, n = A.shape
    if p == 0 or not mask.any():
        return
    cost = np.concatenate([np.zeros(n), np.ones(2 * p)])
    a_eq = np.hstack([A, np.eye(p), -np.eye(p)])
    bounds = [(0.0, None) if flag else (None, None) for flag in mask] + [(0.0, None)] * (2 * p)
    result = linprog(cost, A_eq=a_eq, b_eq=b, bounds=bounds, method="highs")
    if result.status == 2:
        raise QpInfeasibleError(float("inf"))
    if not result.success:
        logger.debug("phase-one LP ended with status %s: %s", result.status, result.message)
        return
    if result.fun > feas_tol * (1.0 + np.max(np.abs(b), initial=0.0)) * max(p, 1):
        raise QpInfeasibleError(float(result.fun))


def _factor(kkt: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            lu, piv = scipy.linalg.lu_factor(kkt, check_finite=False)
        except (scipy.linalg.LinAlgWarning, np.linalg.LinAlgError, ValueError):
            return None
    if not np.all(np.isfinite(lu)) or np.min(np.abs(np.diag(lu))) == 0.0:
        return None
    return lu, piv


def _interior_point(
    P: np.ndarray,
    f: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    mask: np.ndarray,
    feas_tol: float,
    kkt_tol: float,
    max_iter: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, bool]:
    n = f.shape[0]
    p = b.shape[0]
    idx = np.flatnonzero(mask)
    m = idx.size
    x = np.zeros(n)
    x[idx] = 1.0
    mu = np.ones(m)
    nu = np.zeros(p)
    regularized = False
    inner_tol = 1e-3 * kkt_tol
    b_scale = 1.0 + np.max(np.abs(b), initial=0.0)

    iteration = 0
    for iteration in range(1, max_iter + 1):
        bound = np.zeros(n)
        bound[idx] = mu
        r_d = P @ x + f + A.T @ nu - bound
        r_p = A @ x - b
        xb = x[idx]
        gap = float(xb @ mu / m) if m else 0.0
        if (
            np.max(np.abs(r_p), initial=0.0) <= feas_tol * b_scale
            and np.max(np.abs(r_d), initial=0.0) <= inner_tol
            and np.max(xb * mu, initial=0.0) <= inner_tol
        ):
            break

        H = P.copy()
        H[idx, idx] += mu / xb
        kkt = np.block([[H, A.T], [A, np.zeros((p, p))]])
        factors = _factor(kkt)
        if factors is None:
            regularized = True
            kkt[:n, :n] += _REGULARIZATION * np.eye(n)
            factors = _factor(kkt)
            if factors is None:
                break

        def _newton(r_c: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
            top = -r_d.copy()
            top[idx] += r_c / xb
            sol = scipy.linalg.lu_solve(factors, np.concatenate([top, -r_p]), check_finite=False)
            dx = sol[:n]
            dnu = sol[n:]
            dmu = (r_c - mu * dx[idx]) / xb
            return dx, dnu, dmu

        def _max_step(dx: np.ndarray, dmu: np.ndarray) -> float:
            step = 1.0
            neg_x = dx[idx] < 0
            if neg_x.any():
                step = min(step, float(np.min(-xb[neg_x] / dx[idx][neg_x])))
            neg_mu = dmu < 0
            if neg_mu.any():
                step = min(step, float(np.min(-mu[neg_mu] / dmu[neg_mu])))
            return step

        dx, dnu, dmu = _newton(-xb * mu)
        if m:
            step_aff = _max_step(dx, dmu)
            gap_aff = float((xb + step_aff * dx[idx]) @ (mu + step_aff * dmu) / m)
            sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
            r_c = sigma * gap - xb * mu - dx[idx] * dmu
            dx, dnu, dmu = _newton(r_c)
            step = min(1.0, _FRACTION_TO_BOUNDARY * _max_step(dx, dmu))
        else:
            step = 1.0
        if step < 1e-14:
            break
        x = x + step * dx
        nu = nu + step * dnu
        mu = mu + step * dmu
        if m:
            x[idx] = np.maximum(x[idx], 1e-300)
            mu = np.maximum(mu, 1e-300)
    return x, nu, mu, iteration, regularized


def _polish(
    P: np.ndarray,
    f: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    mask: np.ndarray,
    x: np.ndarray,
    mu: np.ndarray,
) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Fix identified active bounds at zero and solve the remaining EQP exactly."""
    n = f.shape[0]
    idx = np.flatnonzero(mask)
    active = np.zeros(n, dtype=bool)
    active[idx] = x[idx] <= mu
    free = ~active
    Af = A[:, free]
    Pff = P[np.ix_(free, free)]
    ff = f[free]
    if Af.shape[0]:
        x_part, *_ = np.linalg.lstsq(Af, b, rcond=None)
        null = scipy.linalg.null_space(Af)
    else:
        x_part = np.zeros(int(free.sum()))
        null = np.eye(int(free.sum()))
    if null.shape[1]:
        reduced = null.T @ Pff @ null
        rhs = -null.T @ (Pff @ x_part + ff)
        y, *_ = np.linalg.lstsq(reduced, rhs, rcond=None)
        x_free = x_part + null @ y
    else:
        x_free = x_part
    x_new = np.zeros(n)
    x_new[free] = x_free
    grad = P @ x_new + f
    if A.shape[0]:
        nu, *_ = np.linalg.lstsq(Af.T, -grad[free], rcond=None)
    else:
        nu = np.zeros(0)
    full = grad + A.T @ nu
    mu_new = np.where(active, full, 0.0)[idx]
    return x_new, nu, mu_new


def solve_qp(
    problem: QpProblem,
    feas_tol: float = settings.feas_tol,
    kkt_tol: float = settings.kkt_tol,
    max_iter: int = settings.qp_max_iter,
) -> QpSolution:
    """Return a certified KKT point of the convex QP ``problem``."""
    A = problem.equality_matrix()
    b = problem.beq
    mask = problem.nonneg
    _phase_one(A, b, mask, feas_tol)

    scale = max(
        1.0,
        float(np.max(np.abs(problem.P), initial=0.0)),
        float(np.max(np.abs(problem.f), initial=0.0)),
    )
    P = problem.P / scale
    f = problem.f / scale
    b_scale = 1.0 + np.max(np.abs(b), initial=0.0)

    x, nu, mu, iterations, regularized = _interior_point(P, f, A, b, mask, feas_tol, kkt_tol, max_iter)
    if regularized:
        logger.warning("KKT matrix was singular; added %.0e ridge to P", _REGULARIZATION)
    best = (x, nu, mu, kkt_residual(P, f, A, x, nu, mu, mask), False)

    polished = _polish(P, f, A, b, mask, x, mu)
    if polished is not None:
        px, pnu, pmu = polished
        residual = kkt_residual(P, f, A, px, pnu, pmu, mask)
        feasible = np.max(np.abs(A @ px - b), initial=0.0) <= feas_tol * b_scale
        if feasible and residual <= max(best[3], kkt_tol):
            best = (px, pnu, pmu, residual, True)

    x, nu, mu, residual, was_polished = best
    feas = float(np.max(np.abs(A @ x - b), initial=0.0))
    if residual > kkt_tol or feas > feas_tol * b_scale:
        raise QpNonConvergenceError(iterations, residual, x * 1.0)
    logger.debug(
        "QP solved: n=%d p=%d iterations=%d residual=%.2e polished=%s",
        problem.n,
        problem.p,
        iterations,
        residual,
        was_polished,
    )
    return QpSolution(
        x=x,
        eq_multipliers=nu * scale,
        bound_multipliers=mu * scale,
        obj=problem.objective(x),
        kkt_residual=residual,
        feas_residual=feas,
        iterations=iterations,
        regularized=regularized,
        polished=was_polished,
    )


__all__ = ["QpProblem", "QpSolution", "solve_qp", "kkt_residual"]
