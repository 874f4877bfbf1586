"""Panel ingestion and construction of constraint/balancing systems."""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .dto import CovariateDef, CovariateProblem, CovariateSpec, PanelDataset
from .errors import (
    BalancedPanelError,
    CovariateError,
    LabelLookupError,
    PanelParseError,
    RankDeficientError,
    UnderdeterminedError,
)


logger = logging.getLogger("trendbal.panel")

PathLike = Union[str, Path]

_INT_RE = re.compile(r"^[+-]?\d+$")
_DIGITS_RE = re.compile(r"(\d+)")


def _normalize_periods(raw: Sequence[str]) -> List[Any]:
    values = [str(item).strip() for item in raw]
    if values and all(_INT_RE.match(item) for item in values):
        return [int(item) for item in values]
    try:
        return [float(item) for item in values]
    except ValueError:
        return values


def _unit_sort_key(label: str) -> List[Any]:
    """Natural order: 'c2' before 'c10'."""
    return [(0, int(part), part) if part.isdigit() else (1, 0, part) for part in _DIGITS_RE.split(label)]


def _to_matrix(table: pd.DataFrame) -> np.ndarray:
    """Parse a period x unit table of raw strings into floats."""
    raw = table.astype(object)
    missing = raw.isna() | raw.map(lambda cell: isinstance(cell, str) and not cell.strip())
    if missing.to_numpy().any():
        row, col = np.argwhere(missing.to_numpy())[0]
        raise BalancedPanelError(table.columns[col], table.index[row])
    numeric = raw.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy() | ~np.isfinite(numeric.to_numpy(dtype=float))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise PanelParseError(
            f"non-numeric outcome {raw.iat[row, col]!r} for unit={table.columns[col]!r}, "
            f"period={table.index[row]!r}"
        )
    return numeric.to_numpy(dtype=np.float64)


def _read_wide(path: PathLike) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if not len(frame.columns) or frame.columns[0] != "period":
        raise PanelParseError("wide panels need a leading 'period' column")
    periods = _normalize_periods(frame["period"].tolist())
    if len(set(periods)) != len(periods):
        raise PanelParseError("duplicate period rows in wide panel")
    table = frame.drop(columns=["period"])
    table.index = periods
    table.columns = [str(col) for col in table.columns]
    return table.sort_index()


def _read_long(path: PathLike) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing_cols = {"unit", "period", "outcome"} - set(frame.columns)
    if missing_cols:
        raise PanelParseError(f"long panels need columns unit, period, outcome (missing {sorted(missing_cols)})")
    frame = frame.assign(
        unit=frame["unit"].astype(str).str.strip(),
        period=_normalize_periods(frame["period"].tolist()),
    )
    dup = frame.duplicated(subset=["unit", "period"], keep=False)
    if dup.any():
        first = frame[dup].iloc[0]
        raise BalancedPanelError(first["unit"], first["period"], detail="duplicate cell")
    units = sorted(set(frame["unit"]), key=_unit_sort_key)
    periods = sorted(set(frame["period"]))
    table = frame.pivot(index="period", columns="unit", values="outcome")
    return table.reindex(index=periods, columns=units)


def load_panel(
    path: PathLike,
    layout: str = "wide",
    treated: Optional[str] = None,
    t0_label: Any = None,
) -> PanelDataset:
    """Read a balanced panel; ``t0_label`` names the last pre-treatment period."""
    if layout == "wide":
        table = _read_wide(path)
    elif layout == "long":
        table = _read_long(path)
    else:
        raise PanelParseError(f"unknown layout: {layout!r}")
    units = [str(col) for col in table.columns]
    if treated is None:
        treated = units[0]
    treated = str(treated)
    if treated not in units:
        raise LabelLookupError(f"unknown treated unit: {treated!r}")
    order = [treated] + [unit for unit in units if unit != treated]
    table = table[order]
    outcomes = _to_matrix(table)
    periods = list(table.index)
    if t0_label is None:
        raise LabelLookupError("the last pre-treatment period label is required")
    keys = [str(p) for p in periods]
    if str(t0_label) not in keys:
        raise LabelLookupError(f"unknown period label: {t0_label!r}")
    t0 = keys.index(str(t0_label)) + 1
    logger.info("loaded %s panel %s: T=%d, J=%d, t0=%d", layout, path, len(periods), len(order) - 1, t0)
    return PanelDataset(outcomes=outcomes, unit_labels=order, period_labels=periods, t0=t0)


def to_long(data: PanelDataset) -> pd.DataFrame:
    n_periods, n_units = data.outcomes.shape
    return pd.DataFrame(
        {
            "unit": np.repeat(np.array(data.unit_labels, dtype=object), n_periods),
            "period": list(data.period_labels) * n_units,
            "outcome": data.outcomes.T.reshape(-1),
        }
    )


def to_wide(data: PanelDataset) -> pd.DataFrame:
    frame = pd.DataFrame(np.array(data.outcomes), columns=data.unit_labels)
    frame.insert(0, "period", list(data.period_labels))
    return frame


def write_panel(data: PanelDataset, path: PathLike, layout: str = "wide") -> None:
    frame = to_wide(data) if layout == "wide" else to_long(data)
    frame.to_csv(path, index=False)


def load_covariates(path: PathLike) -> pd.DataFrame:
    """Read ``unit,<var1>,...`` into a float frame indexed by unit label."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if not len(frame.columns) or frame.columns[0] != "unit":
        raise PanelParseError("covariate files need a leading 'unit' column")
    frame["unit"] = frame["unit"].astype(str).str.strip()
    frame = frame.set_index("unit")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise PanelParseError(
            f"non-numeric covariate {frame.iat[row, col]!r} for unit={frame.index[row]!r}, "
            f"column={frame.columns[col]!r}"
        )
    return numeric.astype(np.float64)


def parse_covariate(token: str) -> CovariateDef:
    """Parse a CLI covariate token.

    ``pre`` all pre-treatment outcomes, ``y@P`` one lag, ``y@P1:P2`` one row per
    period, ``ymean@P1:P2`` a window mean, anything else an external column.
    """
    token = token.strip()
    if not token:
        raise CovariateError("empty covariate token", token)
    if token == "pre":
        return CovariateDef(kind="outcomes")
    if token.startswith("ymean@"):
        body = token[len("ymean@"):]
        if ":" not in body:
            raise CovariateError(f"window covariate needs start:end: {token!r}", token)
        start, end = body.split(":", 1)
        return CovariateDef(kind="window", start=start, end=end)
    if token.startswith("y@"):
        body = token[len("y@"):]
        if ":" in body:
            start, end = body.split(":", 1)
            return CovariateDef(kind="outcomes", start=start, end=end)
        return CovariateDef(kind="lag", start=body)
    return CovariateDef(kind="column", name=token)


def parse_covariates(tokens: Optional[str]) -> List[CovariateDef]:
    if not tokens:
        return []
    return [parse_covariate(token) for token in tokens.split(",") if token.strip()]


def _pre_index(data: PanelDataset, label: Any, token: str) -> int:
    idx = data.period_index(label)
    if idx >= data.t0:
        raise CovariateError(f"covariate {token!r} references post-treatment period {label!r}", token)
    return idx


def _covariate_rows(
    data: PanelDataset,
    definition: CovariateDef,
    externals: Optional[pd.DataFrame],
) -> List[Tuple[str, np.ndarray]]:
    token = definition.label
    if definition.kind == "column":
        name = str(definition.name)
        if externals is None or name not in externals.columns:
            raise CovariateError(f"unknown covariate column: {name}", name)
        missing = [unit for unit in data.unit_labels if unit not in externals.index]
        if missing:
            raise CovariateError(f"covariate column {name} has no value for unit {missing[0]!r}", name)
        return [(name, externals.loc[data.unit_labels, name].to_numpy(dtype=np.float64))]
    if definition.kind == "lag":
        idx = _pre_index(data, definition.start, token)
        return [(token, np.array(data.outcomes[idx]))]
    if definition.kind == "window":
        first = _pre_index(data, definition.start, token)
        last = _pre_index(data, definition.end, token)
        if last < first:
            raise CovariateError(f"window {token!r} ends before it starts", token)
        return [(token, data.outcomes[first : last + 1].mean(axis=0))]
    first = 0 if definition.start is None else _pre_index(data, definition.start, token)
    last = data.t0 - 1 if definition.end is None else _pre_index(data, definition.end, token)
    if last < first:
        raise CovariateError(f"outcome range {token!r} ends before it starts", token)
    return [(f"y@{data.period_labels[idx]}", np.array(data.outcomes[idx])) for idx in range(first, last + 1)]


def check_full_row_rank(matrix: np.ndarray, names: Optional[Sequence[str]] = None, what: str = "Z") -> None:
    """Raise ``RankDeficientError`` naming the first row that depends on earlier rows."""
    rank = 0
    for k in range(matrix.shape[0]):
        current = np.linalg.matrix_rank(matrix[: k + 1])
        if current <= rank:
            label = names[k] if names and k < len(names) else f"row {k}"
            raise RankDeficientError(
                f"{what} is not of full row rank: {label!r} is linearly dependent on earlier rows",
                label,
            )
        rank = current


def balancing_scale_factors(Q: np.ndarray, *, ddof: int = 0) -> np.ndarray:
    """Per-row factors 1/sd over untreated units; rows with no spread keep 1."""
    if Q.shape[0] == 0:
        return np.ones(0)
    count = Q.shape[1]
    divisor = max(count - ddof, 1)
    mean = Q.mean(axis=1, keepdims=True)
    std = np.sqrt(((Q - mean) ** 2).sum(axis=1) / divisor)
    factors = np.ones(Q.shape[0])
    positive = std > 0.0
    factors[positive] = 1.0 / std[positive]
    return factors


def build_problem(
    data: PanelDataset,
    spec: CovariateSpec,
    externals: Optional[pd.DataFrame] = None,
) -> CovariateProblem:
    """Stack trending rows into (z1, Z) and balancing rows into (q1, Q)."""
    z_rows: List[Tuple[str, np.ndarray]] = []
    if spec.include_intercept_in_z:
        z_rows.append(("(intercept)", np.ones(data.n_controls + 1)))
    for definition in spec.trending:
        z_rows.extend(_covariate_rows(data, definition, externals))
    q_rows: List[Tuple[str, np.ndarray]] = []
    for definition in spec.balancing:
        q_rows.extend(_covariate_rows(data, definition, externals))

    if not z_rows:
        raise CovariateError("at least one trending covariate (or the intercept) is required")
    n_controls = data.n_controls
    if len(z_rows) >= n_controls:
        raise UnderdeterminedError(
            f"{len(z_rows)} trending rows need more than {len(z_rows)} control units (J={n_controls})"
        )

    z_names = [name for name, _ in z_rows]
    z_full = np.vstack([row for _, row in z_rows])
    if not np.all(np.isfinite(z_full)):
        raise CovariateError("trending covariates contain non-finite values")
    check_full_row_rank(z_full[:, 1:], z_names, what="Z")

    q_names = [name for name, _ in q_rows]
    if q_rows:
        q_full = np.vstack([row for _, row in q_rows])
    else:
        q_full = np.zeros((0, n_controls + 1))
    if not np.all(np.isfinite(q_full)):
        raise CovariateError("balancing covariates contain non-finite values")

    normalization = None
    if spec.standardize_balancing:
        normalization = balancing_scale_factors(q_full[:, 1:])
        q_full = q_full * normalization[:, None]

    return CovariateProblem(
        z1=z_full[:, 0],
        Z=z_full[:, 1:],
        q1=q_full[:, 0],
        Q=q_full[:, 1:],
        normalization=normalization,
        z_names=z_names,
        q_names=q_names,
        trending_uses_outcomes=any(d.references_outcomes for d in spec.trending),
        balancing_uses_outcomes=any(d.references_outcomes for d in spec.balancing),
    )


__all__ = [
    "load_panel",
    "load_covariates",
    "to_long",
    "to_wide",
    "write_panel",
    "parse_covariate",
    "parse_covariates",
    "build_problem",
    "check_full_row_rank",
    "balancing_scale_factors",
]
