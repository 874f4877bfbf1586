"""Exception hierarchy shared by every trendbal module."""

from __future__ import annotations

from typing import Any, Optional


class TrendBalError(ValueError):
    """Base class for all recoverable trendbal failures."""


class BalancedPanelError(TrendBalError):
    def __init__(self, unit: Any, period: Any, detail: str = "missing cell") -> None:
        self.unit = unit
        self.period = period
        super().__init__(f"panel is not balanced: {detail} for unit={unit!r}, period={period!r}")


class LabelLookupError(TrendBalError):
    pass


class PanelParseError(TrendBalError):
    pass


class CovariateError(TrendBalError):
    def __init__(self, message: str, token: Optional[str] = None) -> None:
        self.token = token
        super().__init__(message)


class UnderdeterminedError(TrendBalError):
    pass


class RankDeficientError(TrendBalError):
    def __init__(self, message: str, label: Optional[str] = None) -> None:
        self.label = label
        super().__init__(message)


class SingularityError(TrendBalError):
    pass


class ProjectionError(TrendBalError):
    pass


class DimensionError(TrendBalError):
    pass


class QpInfeasibleError(TrendBalError):
    def __init__(self, certificate: float) -> None:
        self.certificate = certificate
        super().__init__(
            f"equality and bound constraints are infeasible (minimum l1 violation {certificate:.3e})"
        )


class QpNonConvergenceError(TrendBalError):
    def __init__(self, iterations: int, residual: float, best_x: Any) -> None:
        self.iterations = iterations
        self.residual = residual
        self.best_x = best_x
        super().__init__(
            f"QP did not converge in {iterations} iterations (best KKT residual {residual:.3e})"
        )


class WeightContractError(TrendBalError):
    pass


class InsufficientDataError(TrendBalError):
    pass


__all__ = [
    "TrendBalError",
    "BalancedPanelError",
    "LabelLookupError",
    "PanelParseError",
    "CovariateError",
    "UnderdeterminedError",
    "RankDeficientError",
    "SingularityError",
    "ProjectionError",
    "DimensionError",
    "QpInfeasibleError",
    "QpNonConvergenceError",
    "WeightContractError",
    "InsufficientDataError",
]
