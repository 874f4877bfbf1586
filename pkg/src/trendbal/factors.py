"""Latent factor loadings from pre-treatment outcomes and constraint augmentation."""

from __future__ import annotations

import logging
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict

from .dto import CovariateProblem, FactorEstimate, PanelDataset, WeightSolution
from .errors import DimensionError, ProjectionError, RankDeficientError
from .estimators import counterfactual
from .panel import check_full_row_rank
from .solvers import fit_weights


logger = logging.getLogger("trendbal.factors")

_EIGEN_GAP = 1e-10


def _residualize(basis: np.ndarray, target: np.ndarray, what: str) -> np.ndarray:
    """Residuals of the columns of ``target`` on the columns of ``basis``."""
    if np.linalg.matrix_rank(basis) < basis.shape[1]:
        raise ProjectionError(f"{what} is rank deficient; the projection is undefined")
    coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return target - basis @ coef


def build_projected_matrix(
    data: PanelDataset,
    prob: CovariateProblem,
    g: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Doubly projected pre-treatment outcomes ``M_G Y* M_Z*``.

    ``M_G`` removes the span of ``[1, g]`` over time; ``M_Z*`` removes the span of
    the trending covariates across all J+1 units.
    """
    t0 = data.t0
    basis = np.ones((t0, 1))
    if g is not None:
        g = np.asarray(g, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        if g.shape[0] != t0:
            raise ProjectionError(f"observed factors need {t0} rows, got {g.shape[0]}")
        basis = np.hstack([basis, g])
    if t0 <= basis.shape[1]:
        raise ProjectionError(f"T0={t0} must exceed the {basis.shape[1]} time regressors")
    y_star = np.array(data.outcomes[:t0])
    timed = _residualize(basis, y_star, "[1, g]")
    z_star = np.column_stack([prob.z1, prob.Z])
    projected = _residualize(z_star.T, timed.T, "Z*").T
    return projected


def _sign_normalize(factors: np.ndarray, loadings: np.ndarray) -> None:
    for k in range(loadings.shape[0]):
        row = loadings[k]
        cutoff = 1e-12 * max(float(np.max(np.abs(row), initial=0.0)), 1e-300)
        nonzero = np.flatnonzero(np.abs(row) > cutoff)
        if nonzero.size and row[nonzero[0]] < 0:
            loadings[k] *= -1.0
            factors[:, k] *= -1.0


def estimate_factors(A: np.ndarray, r: int) -> FactorEstimate:
    """Top-r factors of ``A`` from the eigenvectors of ``AA'``.

    Factors are ``sqrt(T0)`` times the orthonormal eigenvectors, loadings are
    ``factors' A / T0``, and eigenvalues are reported divided by T0.
    """
    A = np.asarray(A, dtype=float)
    t0, n_units = A.shape
    if r < 0 or r > min(t0, n_units):
        raise DimensionError(f"r={r} must lie in [0, min(T0={t0}, J+1={n_units})]")
    values, vectors = scipy.linalg.eigh(A @ A.T)
    order = np.argsort(-values, kind="stable")
    values = np.maximum(values[order], 0.0)
    vectors = vectors[:, order]
    spectrum = values / t0
    if 0 < r < t0 and spectrum[r - 1] - spectrum[r] < _EIGEN_GAP * max(1.0, spectrum[0]):
        logger.warning(
            "eigenvalues %d and %d are nearly tied (%.3e, %.3e); the factor space is not identified",
            r,
            r + 1,
            spectrum[r - 1],
            spectrum[r],
        )
    factors = np.sqrt(t0) * vectors[:, :r]
    loadings = factors.T @ A / t0
    _sign_normalize(factors, loadings)
    residual = float(np.linalg.norm(A - factors @ loadings))
    return FactorEstimate(
        r=r,
        factors=factors,
        loadings=loadings,
        eigenvalues=spectrum[:r],
        spectrum=spectrum,
        residual_fro=residual,
    )


def augment_constraints(prob: CovariateProblem, fe: FactorEstimate) -> CovariateProblem:
    """Stack the estimated loadings under the trending covariates as extra exact constraints."""
    if fe.r == 0:
        return prob
    if fe.loadings.shape[1] != prob.n_controls + 1:
        raise DimensionError("loadings must cover the treated unit and every control")
    Z = np.vstack([prob.Z, fe.H])
    z1 = np.concatenate([prob.z1, fe.h1])
    names = prob.row_names() + [f"h{k + 1}" for k in range(fe.r)]
    if Z.shape[0] > prob.n_controls:
        raise RankDeficientError(
            f"{Z.shape[0]} constraints exceed J={prob.n_controls} controls; use r <= "
            f"{prob.n_controls - prob.n_constraints}",
            names[-1],
        )
    try:
        check_full_row_rank(Z, names, what="augmented Z")
    except RankDeficientError as exc:
        raise RankDeficientError(f"{exc}; try a smaller r", exc.label) from exc
    if Z.shape[0] == prob.n_controls:
        logger.warning("r=%d makes the constraint system square", fe.r)
    return CovariateProblem(
        z1=z1,
        Z=Z,
        q1=prob.q1,
        Q=prob.Q,
        normalization=prob.normalization,
        z_names=names,
        q_names=prob.q_names,
        trending_uses_outcomes=True,
        balancing_uses_outcomes=prob.balancing_uses_outcomes,
    )


def loading_r_squared(values: Mapping[str, np.ndarray], fe: FactorEstimate) -> Dict[str, float]:
    """R-squared of each predictor regressed on the loadings, with intercept, across all units."""
    design = np.column_stack([np.ones(fe.loadings.shape[1]), fe.loadings.T])
    out: Dict[str, float] = {}
    for name, series in values.items():
        y = np.asarray(series, dtype=float)
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        resid = y - design @ coef
        centered = y - y.mean()
        total = float(centered @ centered)
        out[name] = 1.0 - float(resid @ resid) / total if total > 0 else 1.0
    return out


class FactorSweepEntry(BaseModel):
    r: int
    estimate: FactorEstimate
    weights: WeightSolution
    counterfactual: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


def sweep_factors(
    data: PanelDataset,
    prob: CovariateProblem,
    r_values: Sequence[int],
    *,
    method: str = "cridge",
    lam: float = 0.0,
    alpha: float = 1.0,
    kappa: float = 1.0,
    g: Optional[np.ndarray] = None,
) -> List[FactorSweepEntry]:
    """Refit the weights with r = each value in ``r_values`` estimated factors added."""
    A = build_projected_matrix(data, prob, g)
    entries: List[FactorSweepEntry] = []
    for r in sorted(set(int(value) for value in r_values)):
        fe = estimate_factors(A, r)
        augmented = augment_constraints(prob, fe)
        weights = fit_weights(augmented, method, lam=lam, alpha=alpha, kappa=kappa)
        logger.info("r=%d: feas_residual=%.2e", r, weights.feas_residual)
        entries.append(
            FactorSweepEntry(r=r, estimate=fe, weights=weights, counterfactual=counterfactual(data, weights))
        )
    return entries


__all__ = [
    "build_projected_matrix",
    "estimate_factors",
    "augment_constraints",
    "loading_r_squared",
    "sweep_factors",
    "FactorSweepEntry",
]
