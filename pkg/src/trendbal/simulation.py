"""Synthetic trending-panel generator and the Monte Carlo benchmark harness.

Random numbers come from ``numpy.random.Generator(PCG64(seed))``; normal
variates use numpy's ziggurat transform of the PCG64 stream, so a (config, seed)
pair reproduces the same panel on every platform numpy supports.
"""

from __future__ import annotations

import logging
import math
from functools import partial
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import anyio
import anyio.to_thread
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import settings
from .dto import CovariateProblem, PanelDataset, _coerce_array, to_wire
from .errors import TrendBalError
from .estimators import counterfactual, di_elastic_net, hcw_ols
from .solvers import METHOD_NAMES, fit_weights


logger = logging.getLogger("trendbal.simulation")


class SimulationConfig(BaseModel):
    J: int = 38
    T0: int = 20
    T1: int = 10
    K: int = 4
    variant: Literal["A", "B"] = "A"
    noise_scale: float = 0.1
    ar_coef: float = 0.2
    burn_in: int = 10
    seed: int = 0
    effect: float = 0.0
    mode: Literal["appendix", "endogeneity"] = "appendix"
    sigma_gamma: float = 1.0
    sigma_u: float = 1.0

    model_config = ConfigDict(frozen=True)

    @field_validator("variant", mode="before")
    @classmethod
    def _upper_variant(cls, value):
        return value.upper() if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check(self) -> "SimulationConfig":
        if self.J < 1 or self.T0 < 1 or self.T1 < 1 or self.K < 0:
            raise ValueError("J, T0 and T1 must be positive and K nonnegative")
        if self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")
        if not -1.0 < self.ar_coef < 1.0:
            raise ValueError("ar_coef must lie in (-1, 1)")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.sigma_gamma < 0 or self.sigma_u < 0 or self.noise_scale < 0:
            raise ValueError("scales must be nonnegative")
        return self

    @property
    def T(self) -> int:
        return self.T0 + self.T1

    def with_seed(self, seed: int) -> "SimulationConfig":
        return self.model_copy(update={"seed": seed})


class SimulationTruth(BaseModel):
    """Components of the untreated outcomes; ``y0 = mu + gamma0 + gamma z' + u``."""

    mu: np.ndarray
    gamma0: np.ndarray
    gamma: np.ndarray
    z: np.ndarray
    u: np.ndarray
    y0: np.ndarray
    tau: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("mu", "gamma0", "tau", mode="before")
    @classmethod
    def _parse_vector(cls, value) -> np.ndarray:
        return _coerce_array(value, ndim=1)

    @field_validator("gamma", "z", "u", "y0", mode="before")
    @classmethod
    def _parse_matrix(cls, value) -> np.ndarray:
        return _coerce_array(value, ndim=2)

    def reconstruct(self) -> np.ndarray:
        return self.mu[None, :] + self.gamma0[:, None] + self.gamma @ self.z.T + self.u


def ar1_noise(rng: np.random.Generator, n_periods: int, n_units: int, coef: float, burn_in: int) -> np.ndarray:
    """AR(1) paths started at zero ``burn_in`` periods before period 1."""
    shocks = rng.standard_normal((burn_in + n_periods, n_units))
    level = np.zeros(n_units)
    out = np.empty((n_periods, n_units))
    for step in range(burn_in + n_periods):
        level = coef * level + shocks[step]
        if step >= burn_in:
            out[step - burn_in] = level
    return out


def _appendix_components(config: SimulationConfig, rng: np.random.Generator):
    J, K, T, T0 = config.J, config.K, config.T, config.T0
    n_units = J + 1
    t = np.arange(1, T + 1, dtype=float)
    i = np.arange(1, n_units + 1, dtype=float)
    k = np.arange(1, K + 1, dtype=float)

    gamma0 = 0.5 * np.sin(1.0 + 1.5 * np.pi * t / T) + 2.0 * t / T0
    signs = (-1.0) ** (k - 1.0)
    gamma = signs[None, :] * 0.6 * np.cos(-0.2 * np.pi * np.log(k)[None, :] + 2.0 * np.pi * t[:, None] / T)
    if config.variant == "B":
        gamma0[:T0] = gamma0[T0 - 1]
        gamma[:T0] = gamma[T0 - 1]

    z = rng.standard_normal((n_units, K)) - (i / J)[:, None] + k[None, :]
    z_bar = z.mean(axis=1) if K else np.zeros(n_units)
    mu = z_bar - i / J + rng.standard_normal(n_units)
    u = config.noise_scale * ar1_noise(rng, T, n_units, config.ar_coef, config.burn_in)
    return mu, gamma0, gamma, z, u


def _endogeneity_components(config: SimulationConfig, rng: np.random.Generator):
    n_units = config.J + 1
    T = config.T
    mu = rng.standard_normal(n_units)
    gamma0 = config.sigma_gamma * rng.standard_normal(T)
    u = config.sigma_u * rng.standard_normal((T, n_units))
    return mu, gamma0, np.zeros((T, 0)), np.zeros((n_units, 0)), u


def simulate_dgp(config: SimulationConfig) -> Tuple[PanelDataset, SimulationTruth]:
    """Generate J+1 units (unit 1 treated) and the components of their untreated outcomes."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    if config.mode == "appendix":
        mu, gamma0, gamma, z, u = _appendix_components(config, rng)
    else:
        mu, gamma0, gamma, z, u = _endogeneity_components(config, rng)
    y0 = mu[None, :] + gamma0[:, None] + gamma @ z.T + u
    tau = np.full(config.T1, config.effect)
    outcomes = y0.copy()
    outcomes[config.T0 :, 0] += tau
    data = PanelDataset(
        outcomes=outcomes,
        unit_labels=[f"unit{i}" for i in range(1, config.J + 2)],
        period_labels=list(range(1, config.T + 1)),
        t0=config.T0,
    )
    truth = SimulationTruth(mu=mu, gamma0=gamma0, gamma=gamma, z=z, u=u, y0=y0, tau=tau)
    return data, truth


def truth_problem(
    data: PanelDataset,
    truth: SimulationTruth,
    balance_pre_outcomes: bool = True,
) -> CovariateProblem:
    """Trending rows ``(1, z_i)`` from the truth record; balancing rows are the pre-period outcomes."""
    z_star = np.vstack([np.ones(data.n_controls + 1), truth.z.T])
    z_names = ["(intercept)"] + [f"z{k + 1}" for k in range(truth.z.shape[1])]
    if balance_pre_outcomes:
        q_star = np.array(data.outcomes[: data.t0])
        q_names = [f"y@{p}" for p in data.period_labels[: data.t0]]
    else:
        q_star = np.zeros((0, data.n_controls + 1))
        q_names = []
    return CovariateProblem(
        z1=z_star[:, 0],
        Z=z_star[:, 1:],
        q1=q_star[:, 0],
        Q=q_star[:, 1:],
        z_names=z_names,
        q_names=q_names,
        balancing_uses_outcomes=balance_pre_outcomes,
    )


BaselineName = Literal["hcw", "hcw_constrained", "di"]


class MethodConfig(BaseModel):
    """One benchmarked estimator: a weight method name or a regression baseline."""

    name: str
    lam: float = Field(0.0, alias="lambda")
    alpha: float = 1.0
    kappa: float = 1.0
    epsilon: float = settings.bp_epsilon
    subset: Optional[List[int]] = None

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    @field_validator("name", mode="before")
    @classmethod
    def _normalize_name(cls, value):
        name = str(value).strip().lower()
        if name not in METHOD_NAMES and name not in ("hcw", "hcw_constrained", "di"):
            raise ValueError(f"unknown method: {value!r}")
        return name

    @property
    def label(self) -> str:
        if self.name in ("cridge", "classo", "softnn"):
            return f"{self.name}(lambda={self.lam:g})"
        if self.name == "cenet":
            return f"cenet(lambda={self.lam:g},alpha={self.alpha:g})"
        if self.name == "di":
            return f"di(lambda={self.lam:g},alpha={self.alpha:g})"
        return self.name

    @classmethod
    def di_default(cls) -> "MethodConfig":
        return cls(name="di", lam=settings.di_lambda, alpha=settings.di_alpha)


def default_hcw_subset(data: PanelDataset) -> Optional[List[int]]:
    """All controls when the pre-period can identify them, else the first ``T0 // 2``."""
    if data.n_controls <= data.t0 - 2:
        return None
    return list(range(max(1, data.t0 // 2)))


def fit_method(method: MethodConfig, data: PanelDataset, prob: CovariateProblem) -> Tuple[np.ndarray, np.ndarray]:
    """Counterfactual series and slope weights of ``method`` on ``data``."""
    if method.name == "di":
        fit = di_elastic_net(data, lam=method.lam, alpha=method.alpha)
        return fit.counterfactual(data), fit.w
    if method.name in ("hcw", "hcw_constrained"):
        subset = method.subset if method.subset is not None else default_hcw_subset(data)
        constraints = (prob.z1, prob.Z) if method.name == "hcw_constrained" else None
        fit = hcw_ols(data, subset=subset, constraints=constraints)
        return fit.counterfactual(data), fit.w
    weights = fit_weights(
        prob,
        method.name,
        lam=method.lam,
        alpha=method.alpha,
        kappa=method.kappa,
        epsilon=method.epsilon,
    )
    return counterfactual(data, weights), weights.w


class SeedOutcome(BaseModel):
    seed: int
    post_rmse: Dict[str, Optional[float]]
    pre_rmse: Dict[str, Optional[float]]
    post_error: Dict[str, List[float]]
    errors: Dict[str, str]
    one_minus_sum: Optional[float] = None


class MethodSummary(BaseModel):
    post_rmse: List[Optional[float]]
    pre_rmse: List[Optional[float]]
    bias: List[float]
    median_post_rmse: Optional[float]
    median_pre_rmse: Optional[float]
    failures: List[Dict[str, object]]


class EndogeneityCheck(BaseModel):
    mean_one_minus_sum: float
    mc_std_error: float
    analytic: float
    n_ok: int


class BenchmarkReport(BaseModel):
    config: Dict[str, object]
    methods: List[Dict[str, object]]
    seeds: List[int]
    n_seeds: int
    per_method: Dict[str, MethodSummary]
    endogeneity: Optional[EndogeneityCheck] = None

    def for_wire(self) -> dict:
        return to_wire(self.model_dump())


def _rmse(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values**2)))


def run_seed(config: SimulationConfig, methods: Sequence[MethodConfig], seed: int) -> SeedOutcome:
    """Fit every method on one simulated panel; failures are recorded per method."""
    data, truth = simulate_dgp(config.with_seed(seed))
    prob = truth_problem(data, truth)
    target = truth.y0[:, 0]
    t0 = data.t0
    post_rmse: Dict[str, Optional[float]] = {}
    pre_rmse: Dict[str, Optional[float]] = {}
    post_error: Dict[str, List[float]] = {}
    errors: Dict[str, str] = {}
    for method in methods:
        try:
            series, _ = fit_method(method, data, prob)
        except (TrendBalError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("seed %d: %s failed: %s", seed, method.label, exc)
            post_rmse[method.label] = None
            pre_rmse[method.label] = None
            errors[method.label] = str(exc)
            continue
        error = series - target
        post_rmse[method.label] = _rmse(error[t0:])
        pre_rmse[method.label] = _rmse(error[:t0])
        post_error[method.label] = error[t0:].tolist()

    one_minus_sum = None
    if config.mode == "endogeneity":
        try:
            fit = hcw_ols(data)
            one_minus_sum = float(1.0 - fit.w.sum())
        except TrendBalError as exc:
            logger.warning("seed %d: endogeneity regression failed: %s", seed, exc)
    return SeedOutcome(
        seed=seed,
        post_rmse=post_rmse,
        pre_rmse=pre_rmse,
        post_error=post_error,
        errors=errors,
        one_minus_sum=one_minus_sum,
    )


async def _run_seeds(
    config: SimulationConfig,
    methods: Sequence[MethodConfig],
    seeds: Sequence[int],
    threads: int,
) -> List[SeedOutcome]:
    limiter = anyio.CapacityLimiter(max(1, threads))
    results: Dict[int, SeedOutcome] = {}

    async def _worker(seed: int) -> None:
        results[seed] = await anyio.to_thread.run_sync(partial(run_seed, config, methods, seed), limiter=limiter)

    async with anyio.create_task_group() as tg:
        for seed in seeds:
            tg.start_soon(_worker, seed)
    return [results[seed] for seed in seeds]


def _median(values: List[Optional[float]]) -> Optional[float]:
    ok = [v for v in values if v is not None]
    return float(np.median(ok)) if ok else None


def run_benchmark(
    config: SimulationConfig,
    methods: Sequence[MethodConfig],
    n_seeds: int,
    threads: int = settings.threads,
) -> BenchmarkReport:
    """Run ``n_seeds`` consecutive seeds starting at ``config.seed`` and aggregate by method."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    seeds = [config.seed + offset for offset in range(n_seeds)]
    if threads > 1 and n_seeds > 1:
        outcomes = anyio.run(_run_seeds, config, methods, seeds, threads)
    else:
        outcomes = [run_seed(config, methods, seed) for seed in seeds]

    per_method: Dict[str, MethodSummary] = {}
    for method in methods:
        label = method.label
        post = [o.post_rmse.get(label) for o in outcomes]
        pre = [o.pre_rmse.get(label) for o in outcomes]
        errors = [o.post_error[label] for o in outcomes if label in o.post_error]
        bias = np.mean(np.array(errors), axis=0).tolist() if errors else []
        per_method[label] = MethodSummary(
            post_rmse=post,
            pre_rmse=pre,
            bias=bias,
            median_post_rmse=_median(post),
            median_pre_rmse=_median(pre),
            failures=[{"seed": o.seed, "error": o.errors[label]} for o in outcomes if label in o.errors],
        )
        logger.info("%s: median post-period RMSE %s", label, per_method[label].median_post_rmse)

    endogeneity = None
    if config.mode == "endogeneity":
        values = np.array([o.one_minus_sum for o in outcomes if o.one_minus_sum is not None])
        if values.size:
            ratio = config.J * config.sigma_gamma**2 / config.sigma_u**2 if config.sigma_u > 0 else math.inf
            spread = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
            endogeneity = EndogeneityCheck(
                mean_one_minus_sum=float(values.mean()),
                mc_std_error=spread,
                analytic=1.0 / (1.0 + ratio),
                n_ok=int(values.size),
            )

    return BenchmarkReport(
        config=config.model_dump(),
        methods=[m.model_dump(by_alias=True) for m in methods],
        seeds=seeds,
        n_seeds=n_seeds,
        per_method=per_method,
        endogeneity=endogeneity,
    )


__all__ = [
    "SimulationConfig",
    "SimulationTruth",
    "MethodConfig",
    "MethodSummary",
    "EndogeneityCheck",
    "BenchmarkReport",
    "SeedOutcome",
    "ar1_noise",
    "simulate_dgp",
    "truth_problem",
    "fit_method",
    "default_hcw_subset",
    "run_seed",
    "run_benchmark",
]
