"""Pre-trend and weight-compatibility regressions with classical OLS inference."""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import statsmodels.api as sm
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import stats

from .dto import DiagnosticsReport, InterceptFit, PanelDataset, WeightSolution, _coerce_array
from .errors import InsufficientDataError, WeightContractError
from .panel import check_full_row_rank


logger = logging.getLogger("trendbal.diagnostics")

WeightInput = Union[WeightSolution, InterceptFit, np.ndarray]


class OlsFit(BaseModel):
    names: List[str]
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    sse: float
    n_obs: int
    df_resid: int
    f_stat: Optional[float] = None
    f_p_value: Optional[float] = None

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("coefficients", "std_errors", "t_stats", "p_values", mode="before")
    @classmethod
    def _parse_vector(cls, value) -> np.ndarray:
        return _coerce_array(value, ndim=1, finite=False)

    def named(self, values: np.ndarray) -> Dict[str, float]:
        return {name: float(value) for name, value in zip(self.names, values)}


def _t_stats(coef: np.ndarray, se: np.ndarray) -> np.ndarray:
    out = np.zeros_like(coef)
    positive = se > 0
    out[positive] = coef[positive] / se[positive]
    exact = ~positive & (coef != 0)
    out[exact] = np.sign(coef[exact]) * np.inf
    return out


def ols_fit(
    X: np.ndarray,
    y: np.ndarray,
    names: Optional[Sequence[str]] = None,
    intercept: bool = True,
) -> OlsFit:
    """statsmodels OLS with homoskedastic standard errors.

    With ``intercept`` the first column is the constant and the F statistic tests
    every other coefficient against zero.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    labels = list(names) if names is not None else [f"x{j}" for j in range(k)]
    if n <= k:
        raise InsufficientDataError(f"{n} observations cannot support {k} regressors")
    check_full_row_rank(X.T, labels, what="design")

    results = sm.OLS(y, X).fit()
    coef = np.asarray(results.params, dtype=float)
    se = np.asarray(results.bse, dtype=float)
    sse = float(results.ssr)
    df = int(round(results.df_resid))
    if sse > 0.0:
        t = np.asarray(results.tvalues, dtype=float)
        p = np.asarray(results.pvalues, dtype=float)
    else:
        # exact fit: statsmodels divides zero by zero
        t = _t_stats(coef, se)
        p = 2.0 * stats.t.sf(np.abs(t), df)

    f_stat: Optional[float] = None
    f_p: Optional[float] = None
    if intercept and k > 1:
        centered = y - y.mean()
        explained = max(float(centered @ centered) - sse, 0.0)
        if explained == 0.0:
            f_stat, f_p = 0.0, 1.0
        elif sse == 0.0:
            f_stat, f_p = float("inf"), 0.0
        else:
            test = results.f_test(np.eye(k)[1:])
            f_stat = float(np.squeeze(test.fvalue))
            f_p = float(np.squeeze(test.pvalue))
    return OlsFit(
        names=labels,
        coefficients=coef,
        std_errors=se,
        t_stats=t,
        p_values=np.clip(p, 0.0, 1.0),
        sse=sse,
        n_obs=n,
        df_resid=df,
        f_stat=f_stat,
        f_p_value=f_p,
    )


def _as_vector(w: WeightInput, n_controls: int) -> np.ndarray:
    vec = w.w if isinstance(w, (WeightSolution, InterceptFit)) else np.asarray(w, dtype=float)
    if vec.shape != (n_controls,):
        raise WeightContractError(f"weights must have length J={n_controls}, got shape {vec.shape}")
    return vec


def _caveat(w: WeightInput) -> bool:
    if isinstance(w, WeightSolution):
        return w.depends_on_pre_outcomes
    # regression baselines are fit on the pre-period outcomes themselves
    return isinstance(w, InterceptFit)


def _report(kind: str, fit: OlsFit, caveat: bool) -> DiagnosticsReport:
    return DiagnosticsReport(
        test_kind=kind,
        coefficients=fit.named(fit.coefficients),
        std_errors=fit.named(fit.std_errors),
        t_stats=fit.named(fit.t_stats),
        p_values=fit.named(fit.p_values),
        f_stat=fit.f_stat,
        f_p_value=fit.f_p_value,
        n_obs=fit.n_obs,
        df_resid=fit.df_resid,
        caveat=caveat,
    )


def pretrend_test(data: PanelDataset, w: WeightInput) -> DiagnosticsReport:
    """Slope of the pre-period gap ``y1 - Yw`` on time."""
    if data.t0 < 4:
        raise InsufficientDataError(f"the pre-trend regression needs T0 >= 4 (T0={data.t0})")
    vec = _as_vector(w, data.n_controls)
    gap = (data.y1 - data.Y @ vec)[: data.t0]
    t = np.arange(1, data.t0 + 1, dtype=float)
    fit = ols_fit(np.column_stack([np.ones_like(t), t]), gap, ["(intercept)", "t"])
    report = _report("PreTrend", fit, _caveat(w))
    return report.model_copy(update={"f_stat": None, "f_p_value": None})


def compatibility_test(data: PanelDataset, w1: WeightInput, w2: WeightInput) -> DiagnosticsReport:
    """Regress ``Y(w1 - w2)`` on ``1, t-T0, after, after*(t-T0)`` over all periods."""
    if data.n_periods < 6:
        raise InsufficientDataError(f"the compatibility regression needs T >= 6 (T={data.n_periods})")
    diff = _as_vector(w1, data.n_controls) - _as_vector(w2, data.n_controls)
    if not np.any(diff):
        logger.warning("compatibility test on identical weights; the regression is degenerate")
    y = data.Y @ diff
    rel = np.arange(1, data.n_periods + 1, dtype=float) - data.t0
    after = (rel > 0).astype(float)
    X = np.column_stack([np.ones_like(rel), rel, after, after * rel])
    fit = ols_fit(X, y, ["(intercept)", "t-T0", "after", "after*(t-T0)"])
    return _report("Compatibility", fit, _caveat(w1) or _caveat(w2))


__all__ = ["OlsFit", "ols_fit", "pretrend_test", "compatibility_test"]
