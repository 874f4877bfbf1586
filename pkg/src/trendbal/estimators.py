"""Effect estimation from weights, plus the HCW and DI baseline fits."""

from __future__ import annotations

import logging
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import settings
from .dto import EffectEstimate, InterceptFit, PanelDataset, WeightSolution
from .errors import RankDeficientError, SingularityError, WeightContractError
from .qp import QpProblem, solve_qp
from .solvers import constrained_ridge_arrays, subgradient_violation


logger = logging.getLogger("trendbal.estimators")

WeightsLike = Union[WeightSolution, InterceptFit, np.ndarray, Sequence[float]]

_CONTRACT_TOL = 1e-9


def _weights_of(w: WeightsLike, n_controls: int) -> Tuple[np.ndarray, str]:
    if isinstance(w, WeightSolution):
        vec, method = w.w, w.method
    elif isinstance(w, InterceptFit):
        vec, method = w.w, w.method
    else:
        vec, method = np.asarray(w, dtype=float), "custom"
    if vec.shape != (n_controls,):
        raise WeightContractError(f"weights must have length J={n_controls}, got shape {vec.shape}")
    return vec, method


def default_ate_weights(t0: int, n_periods: int) -> np.ndarray:
    """``-1/T0`` on pre-treatment periods and ``1/T1`` on post-treatment periods."""
    c = np.full(n_periods, -1.0 / t0)
    c[t0:] = 1.0 / (n_periods - t0)
    return c


def _check_ate_weights(c: np.ndarray, t0: int, n_periods: int) -> None:
    if c.shape != (n_periods,):
        raise WeightContractError(f"ATE weights need {n_periods} entries, got shape {c.shape}")
    pre, post = c[:t0], c[t0:]
    if np.any(pre > _CONTRACT_TOL) or abs(pre.sum() + 1.0) > _CONTRACT_TOL:
        raise WeightContractError("pre-treatment ATE weights must be <= 0 and sum to -1")
    if np.any(post < -_CONTRACT_TOL) or abs(post.sum() - 1.0) > _CONTRACT_TOL:
        raise WeightContractError("post-treatment ATE weights must be >= 0 and sum to 1")


def did_effects(
    data: PanelDataset,
    w: WeightsLike,
    pre_weighting: Any = "mean",
) -> EffectEstimate:
    """Per-period DID effects of the treated unit against the weighted controls.

    ``pre_weighting`` is ``"mean"`` (the pre-period average gap is the reference)
    or the label of a single pre-treatment period.
    """
    vec, method = _weights_of(w, data.n_controls)
    gap = data.y1 - data.Y @ vec
    t0 = data.t0
    intercept = float(gap[:t0].mean())
    if isinstance(pre_weighting, str) and pre_weighting == "mean":
        reference = intercept
    else:
        s = data.period_index(pre_weighting)
        if s >= t0:
            raise WeightContractError(f"reference period {pre_weighting!r} is not pre-treatment")
        reference = float(gap[s])
    c = default_ate_weights(t0, data.n_periods)
    return EffectEstimate(
        tau_by_period=gap[t0:] - reference,
        ate=float(c @ gap),
        c_weights=c,
        counterfactual=intercept + data.Y @ vec,
        gap_series=gap,
        intercept=intercept,
        weights=vec,
        method=method,
        w_used=w if isinstance(w, WeightSolution) else None,
    )


def ate(effects: EffectEstimate, c: Optional[Sequence[float]] = None) -> float:
    """``c'(y1 - Yw)``; the default ``c`` is the one stored on ``effects``."""
    if c is None:
        weights = effects.c_weights
    else:
        weights = np.asarray(c, dtype=float)
        n_periods = effects.gap_series.shape[0]
        t0 = n_periods - effects.tau_by_period.shape[0]
        _check_ate_weights(weights, t0, n_periods)
    return float(weights @ effects.gap_series)


def counterfactual(
    data: PanelDataset,
    w: WeightsLike,
    intercept: Optional[float] = None,
) -> np.ndarray:
    """``c0 + Y w`` with ``c0`` the pre-period mean gap unless given."""
    vec, _ = _weights_of(w, data.n_controls)
    synthetic = data.Y @ vec
    if intercept is None:
        intercept = float((data.y1[: data.t0] - synthetic[: data.t0]).mean())
    return intercept + synthetic


def _subset_indices(data: PanelDataset, subset: Optional[Sequence[int]]) -> List[int]:
    if subset is None:
        return list(range(data.n_controls))
    indices = sorted(set(int(j) for j in subset))
    if not indices or indices[0] < 0 or indices[-1] >= data.n_controls:
        raise ValueError(f"subset indices must lie in [0, {data.n_controls})")
    return indices


def hcw_ols(
    data: PanelDataset,
    subset: Optional[Sequence[int]] = None,
    constraints: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> InterceptFit:
    """Pre-period regression of the treated outcome on an intercept and selected controls.

    ``constraints`` is ``(z1, Z)`` over all J controls; the slope then satisfies
    ``z1 = Z w`` (for example ``1'w = 1``) with zeros outside the subset.
    """
    indices = _subset_indices(data, subset)
    t0 = data.t0
    y = data.y1[:t0]
    X = data.Y[:t0, indices]
    if t0 <= len(indices) + 1:
        raise RankDeficientError(
            f"T0={t0} periods cannot identify {len(indices)} slopes and an intercept; "
            f"select a subset of at most {t0 - 2} controls"
        )
    y_mean = y.mean()
    x_mean = X.mean(axis=0)
    yc = y - y_mean
    Xc = X - x_mean
    w_sub: np.ndarray
    kkt = 0.0
    if constraints is None:
        design = np.column_stack([np.ones(t0), X])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise RankDeficientError("pre-period design is singular; select a subset of controls")
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        c, w_sub = float(coef[0]), coef[1:]
        method = "HCW"
    else:
        z1 = np.asarray(constraints[0], dtype=float).reshape(-1)
        Z = np.atleast_2d(np.asarray(constraints[1], dtype=float))
        if Z.shape != (z1.shape[0], data.n_controls):
            raise ValueError(f"constraint matrix must be {z1.shape[0]}x{data.n_controls}")
        try:
            w_sub, kkt = constrained_ridge_arrays(yc, Xc, z1, Z[:, indices], 0.0)
        except SingularityError as exc:
            raise RankDeficientError(f"constrained pre-period design is singular ({exc}); select a subset") from exc
        c = float(y_mean - x_mean @ w_sub)
        method = "HCWConstrained"
    w = np.zeros(data.n_controls)
    w[indices] = w_sub
    resid = y - c - X @ w_sub
    return InterceptFit(
        c=c,
        w=w,
        residual_sse=float(resid @ resid),
        method=method,
        subset=indices if subset is not None else [],
        kkt_residual=kkt,
    )


def di_elastic_net(
    data: PanelDataset,
    lam: float = settings.di_lambda,
    alpha: float = settings.di_alpha,
) -> InterceptFit:
    """Unconstrained elastic net with a free intercept on the pre-period.

    Loss ``(1/2T0)|y - c - Yw|^2 + lam*((1-alpha)/2 |w|^2 + alpha |w|_1)``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if lam == 0.0:
        fit = hcw_ols(data)
        return fit.model_copy(update={"method": "DI", "alpha": alpha})

    t0 = data.t0
    J = data.n_controls
    y = data.y1[:t0]
    X = data.Y[:t0]
    y_mean = y.mean()
    x_mean = X.mean(axis=0)
    yc = y - y_mean
    Xc = X - x_mean
    ridge = t0 * lam * (1.0 - alpha)
    pen = t0 * lam * alpha
    gram = Xc.T @ Xc + ridge * np.eye(J)
    rhs = Xc.T @ yc

    if pen == 0.0:
        w = np.linalg.solve(gram, rhs)
        kkt = float(np.max(np.abs(gram @ w - rhs), initial=0.0)) / max(1.0, float(np.max(np.abs(rhs), initial=0.0)))
    else:
        D = np.hstack([np.eye(J), -np.eye(J)])
        P = D.T @ gram @ D
        problem = QpProblem(
            P=0.5 * (P + P.T),
            f=-D.T @ rhs + pen,
            Aeq=np.zeros((0, 2 * J)),
            beq=np.zeros(0),
            nonneg=np.ones(2 * J, dtype=bool),
        )
        solution = solve_qp(problem)
        w = solution.x[:J] - solution.x[J:]
        g = rhs - gram @ w
        scale = max(1.0, pen, float(np.max(np.abs(rhs), initial=0.0)), float(np.max(np.abs(gram), initial=0.0)))
        kkt = max(solution.kkt_residual, subgradient_violation(g, w, pen, pen) / scale)
    c = float(y_mean - x_mean @ w)
    resid = y - c - X @ w
    logger.debug("DI fit: lambda=%g alpha=%g nonzero=%d", lam, alpha, int(np.count_nonzero(w)))
    return InterceptFit(
        c=c,
        w=w,
        residual_sse=float(resid @ resid),
        method="DI",
        lam=lam,
        alpha=alpha,
        kkt_residual=kkt,
    )


__all__ = [
    "did_effects",
    "ate",
    "counterfactual",
    "default_ate_weights",
    "hcw_ols",
    "di_elastic_net",
]
