"""Checks against the public California tobacco panel.

Set ``TRENDBAL_ADH_DATA`` to a directory with ``smoking_wide.csv`` (period column
then one column per state, California included) and ``smoking_covariates.csv``
(``unit,lnincome,age15to24,retprice,beer``).
"""

import os
from pathlib import Path

import numpy as np
import pytest

from trendbal.dto import CovariateSpec
from trendbal.estimators import counterfactual
from trendbal.factors import build_projected_matrix, estimate_factors, loading_r_squared
from trendbal.panel import build_problem, load_covariates, load_panel, parse_covariates
from trendbal.solvers import fit_weights


DATA_DIR = os.environ.get("TRENDBAL_ADH_DATA")

pytestmark = pytest.mark.skipif(
    not DATA_DIR or not (Path(DATA_DIR) / "smoking_wide.csv").exists(),
    reason="TRENDBAL_ADH_DATA does not point at the smoking panel",
)

PREDICTORS = ["lnincome", "age15to24", "retprice", "beer"]
LAGS = ["y@1988", "y@1980", "y@1975"]


@pytest.fixture(scope="module")
def smoking():
    root = Path(DATA_DIR)
    data = load_panel(root / "smoking_wide.csv", "wide", treated="California", t0_label=1988)
    externals = load_covariates(root / "smoking_covariates.csv")
    return data, externals


def test_loadings_explain_lagged_sales_not_the_other_predictors(smoking):
    data, externals = smoking
    prob = build_problem(data, CovariateSpec())
    fe = estimate_factors(build_projected_matrix(data, prob), 4)
    values = {name: externals.loc[data.unit_labels, name].to_numpy() for name in PREDICTORS}
    for token in LAGS:
        values[token] = data.outcomes[data.period_index(token[2:])]
    scores = loading_r_squared(values, fe)
    expected = dict(zip(PREDICTORS + LAGS, [0.348, 0.106, 0.538, 0.390, 0.987, 0.992, 0.995]))
    for name, value in expected.items():
        assert scores[name] == pytest.approx(value, abs=0.02), name


def test_balanced_counterfactuals_sit_above_the_simplex_fit(smoking):
    data, externals = smoking
    spec = CovariateSpec(
        trending=parse_covariates(",".join(PREDICTORS + LAGS)),
        balancing=parse_covariates("pre"),
    )
    prob = build_problem(data, spec, externals)
    post = slice(data.t0, None)
    simplex = counterfactual(data, fit_weights(prob, "adh"))[post].mean()
    for method in ("cridge", "classo"):
        weights = fit_weights(prob, method, lam=2.0)
        assert weights.feas_residual <= 1e-6
        assert counterfactual(data, weights)[post].mean() > simplex, method
    assert np.isfinite(simplex)
