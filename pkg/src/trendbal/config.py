"""Configuration helpers for trendbal."""

from __future__ import annotations

from dataclasses import dataclass
import os


def _float_env(key: str, default: float) -> float:
    raw = os.environ.get(key)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        return default


def _int_env(key: str, default: int) -> int:
    raw = os.environ.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        return default


def _default_threads() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


@dataclass(frozen=True)
class Settings:
    """Runtime settings with environment overrides."""

    threads: int = max(1, _int_env("TRENDBAL_THREADS", _default_threads()))
    log_level: str = os.environ.get("TRENDBAL_LOG_LEVEL", "WARNING")
    feas_tol: float = _float_env("TRENDBAL_FEAS_TOL", 1e-9)
    kkt_tol: float = _float_env("TRENDBAL_KKT_TOL", 1e-7)
    qp_max_iter: int = _int_env("TRENDBAL_QP_MAX_ITER", 200)
    bp_epsilon: float = _float_env("TRENDBAL_BP_EPSILON", 1e-4)
    adh_ridge: float = _float_env("TRENDBAL_ADH_RIDGE", 1e-10)
    di_alpha: float = _float_env("TRENDBAL_DI_ALPHA", 0.9)
    di_lambda: float = _float_env("TRENDBAL_DI_LAMBDA", 0.01)
    sig_digits: int = _int_env("TRENDBAL_SIG_DIGITS", 12)


settings = Settings()
