"""Exact trend-balancing weights for counterfactual estimation on panel data."""

__version__ = "0.1.0"

__all__ = [
    "config",
    "errors",
    "dto",
    "panel",
    "qp",
    "solvers",
    "factors",
    "estimators",
    "diagnostics",
    "simulation",
    "report",
    "cli",
]
