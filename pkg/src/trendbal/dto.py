"""Typed representations of panels, covariate systems, weights and effects."""

from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import LabelLookupError


MethodTag = Literal[
    "MaxShrink",
    "BasisPursuit",
    "CRidge",
    "CLasso",
    "CElasticNet",
    "SoftNonneg",
    "AdhInner",
]
FitTag = Literal["HCW", "HCWConstrained", "DI"]
TestKind = Literal["PreTrend", "Compatibility"]


def _coerce_array(value: Any, *, ndim: int, finite: bool = True) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"cannot convert to a float array: {exc}") from exc
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite values")
    arr.setflags(write=False)
    return arr


def to_wire(value: Any) -> Any:
    """Convert numpy containers inside ``value`` to plain JSON-ready objects."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(key): to_wire(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_wire(item) for item in value]
    return value


class PanelDataset(BaseModel):
    """Balanced panel, periods in rows, the treated unit in column 0."""

    outcomes: np.ndarray
    unit_labels: List[str]
    period_labels: List[Any]
    t0: int

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("outcomes", mode="before")
    @classmethod
    def _parse_outcomes(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=2)

    @model_validator(mode="after")
    def _check_shape(self) -> "PanelDataset":
        n_periods, n_units = self.outcomes.shape
        if len(self.unit_labels) != n_units:
            raise ValueError("unit_labels must match the number of outcome columns")
        if len(self.period_labels) != n_periods:
            raise ValueError("period_labels must match the number of outcome rows")
        if len(set(self.unit_labels)) != n_units:
            raise ValueError("unit labels must be unique")
        if len({str(p) for p in self.period_labels}) != n_periods:
            raise ValueError("period labels must be unique")
        if n_units < 2:
            raise ValueError("a panel needs the treated unit and at least one control")
        if not 1 <= self.t0 < n_periods:
            raise ValueError(f"t0 must satisfy 1 <= t0 < T (t0={self.t0}, T={n_periods})")
        return self

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_controls(self) -> int:
        return self.outcomes.shape[1] - 1

    @property
    def t1(self) -> int:
        return self.n_periods - self.t0

    @property
    def treated_label(self) -> str:
        return self.unit_labels[0]

    @property
    def control_labels(self) -> List[str]:
        return self.unit_labels[1:]

    @property
    def y1(self) -> np.ndarray:
        return self.outcomes[:, 0]

    @property
    def Y(self) -> np.ndarray:
        return self.outcomes[:, 1:]

    def period_index(self, label: Any) -> int:
        key = str(label)
        for idx, period in enumerate(self.period_labels):
            if str(period) == key:
                return idx
        raise LabelLookupError(f"unknown period label: {label!r}")


class CovariateDef(BaseModel):
    """One covariate: an external column, a lag, a window mean, or a run of outcomes."""

    kind: Literal["column", "lag", "window", "outcomes"]
    name: Optional[str] = None
    start: Optional[Any] = None
    end: Optional[Any] = None

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_fields(self) -> "CovariateDef":
        if self.kind == "column" and not self.name:
            raise ValueError("column covariates need a name")
        if self.kind == "lag" and self.start is None:
            raise ValueError("lag covariates need a period")
        if self.kind == "window" and (self.start is None or self.end is None):
            raise ValueError("window covariates need start and end periods")
        return self

    @property
    def references_outcomes(self) -> bool:
        return self.kind != "column"

    @property
    def label(self) -> str:
        if self.kind == "column":
            return str(self.name)
        if self.kind == "lag":
            return f"y@{self.start}"
        if self.kind == "window":
            return f"ymean@{self.start}:{self.end}"
        if self.start is None and self.end is None:
            return "pre"
        return f"y@{self.start}:{self.end}"


class CovariateSpec(BaseModel):
    trending: List[CovariateDef] = Field(default_factory=list)
    balancing: List[CovariateDef] = Field(default_factory=list)
    include_intercept_in_z: bool = True
    standardize_balancing: bool = False

    model_config = ConfigDict(frozen=True)


class CovariateProblem(BaseModel):
    """Constraint system (z1, Z) and balancing system (q1, Q)."""

    z1: np.ndarray
    Z: np.ndarray
    q1: np.ndarray
    Q: np.ndarray
    normalization: Optional[np.ndarray] = None
    z_names: List[str] = Field(default_factory=list)
    q_names: List[str] = Field(default_factory=list)
    trending_uses_outcomes: bool = False
    balancing_uses_outcomes: bool = False

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("z1", "q1", mode="before")
    @classmethod
    def _parse_vector(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=1)

    @field_validator("Z", "Q", mode="before")
    @classmethod
    def _parse_matrix(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=2)

    @field_validator("normalization", mode="before")
    @classmethod
    def _parse_normalization(cls, value: Any) -> Optional[np.ndarray]:
        if value is None:
            return None
        return _coerce_array(value, ndim=1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "CovariateProblem":
        if self.Z.shape[0] != self.z1.shape[0]:
            raise ValueError("z1 length must equal the number of rows of Z")
        if self.Q.shape[0] != self.q1.shape[0]:
            raise ValueError("q1 length must equal the number of rows of Q")
        if self.Q.shape[1] != self.Z.shape[1]:
            raise ValueError("Z and Q must have one column per control unit")
        if self.Z.shape[0] < 1:
            raise ValueError("at least one trending covariate row is required")
        if self.normalization is not None and self.normalization.shape[0] != self.q1.shape[0]:
            raise ValueError("normalization needs one factor per balancing row")
        if self.z_names and len(self.z_names) != self.Z.shape[0]:
            raise ValueError("z_names must label every row of Z")
        if self.q_names and len(self.q_names) != self.Q.shape[0]:
            raise ValueError("q_names must label every row of Q")
        return self

    @property
    def n_controls(self) -> int:
        return self.Z.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.Z.shape[0]

    @property
    def n_balancing(self) -> int:
        return self.Q.shape[0]

    def row_names(self) -> List[str]:
        return self.z_names or [f"z{k}" for k in range(self.n_constraints)]


class WeightSolution(BaseModel):
    w: np.ndarray
    method: MethodTag
    lam: float = Field(0.0, alias="lambda")
    alpha: float = 1.0
    kappa: float = 1.0
    epsilon: float = 0.0
    feas_residual: float = 0.0
    kkt_residual: float = 0.0
    objective: float = 0.0
    regularized: bool = False
    depends_on_pre_outcomes: bool = False
    notes: List[str] = Field(default_factory=list)

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, populate_by_name=True)

    @field_validator("w", mode="before")
    @classmethod
    def _parse_w(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=1)

    def for_wire(self) -> dict:
        return to_wire(self.model_dump(by_alias=True))


class FactorEstimate(BaseModel):
    r: int
    factors: np.ndarray
    loadings: np.ndarray
    eigenvalues: np.ndarray
    spectrum: np.ndarray
    residual_fro: float

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("factors", "loadings", mode="before")
    @classmethod
    def _parse_matrix(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=2)

    @field_validator("eigenvalues", "spectrum", mode="before")
    @classmethod
    def _parse_vector(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=1)

    @property
    def h1(self) -> np.ndarray:
        return self.loadings[:, 0]

    @property
    def H(self) -> np.ndarray:
        return self.loadings[:, 1:]

    def for_wire(self) -> dict:
        return to_wire(self.model_dump())


class InterceptFit(BaseModel):
    """Intercept-plus-slope fit of the treated unit on the controls."""

    c: float
    w: np.ndarray
    residual_sse: float
    method: FitTag = "HCW"
    subset: List[int] = Field(default_factory=list)
    lam: float = Field(0.0, alias="lambda")
    alpha: float = 1.0
    kkt_residual: float = 0.0

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, populate_by_name=True)

    @field_validator("w", mode="before")
    @classmethod
    def _parse_w(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=1)

    def counterfactual(self, data: PanelDataset) -> np.ndarray:
        return self.c + data.Y @ self.w

    def for_wire(self) -> dict:
        return to_wire(self.model_dump(by_alias=True))


class EffectEstimate(BaseModel):
    tau_by_period: np.ndarray
    ate: float
    c_weights: np.ndarray
    counterfactual: np.ndarray
    gap_series: np.ndarray
    intercept: float
    weights: np.ndarray
    method: str
    w_used: Optional[WeightSolution] = None

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("tau_by_period", "c_weights", "counterfactual", "gap_series", "weights", mode="before")
    @classmethod
    def _parse_vector(cls, value: Any) -> np.ndarray:
        return _coerce_array(value, ndim=1)

    def for_wire(self) -> dict:
        data = self.model_dump(exclude={"w_used"})
        return to_wire(data)


class DiagnosticsReport(BaseModel):
    test_kind: TestKind
    coefficients: Dict[str, float]
    std_errors: Dict[str, float]
    t_stats: Dict[str, float]
    p_values: Dict[str, float]
    f_stat: Optional[float] = None
    f_p_value: Optional[float] = None
    n_obs: int
    df_resid: int
    caveat: bool = False

    model_config = ConfigDict(frozen=True)

    @property
    def label(self) -> str:
        return "DIAGNOSTIC" if self.caveat else "TEST"

    def for_wire(self) -> dict:
        data = self.model_dump()
        data["label"] = self.label
        return data


__all__ = [
    "MethodTag",
    "FitTag",
    "TestKind",
    "PanelDataset",
    "CovariateDef",
    "CovariateSpec",
    "CovariateProblem",
    "WeightSolution",
    "FactorEstimate",
    "InterceptFit",
    "EffectEstimate",
    "DiagnosticsReport",
    "to_wire",
]
