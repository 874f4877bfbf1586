"""Command-line entry point: fit, factors, simulate, compare, diagnose."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .config import settings
from .diagnostics import compatibility_test, pretrend_test
from .dto import CovariateProblem, CovariateSpec, PanelDataset, WeightSolution
from .errors import TrendBalError
from .estimators import did_effects
from .factors import build_projected_matrix, estimate_factors, sweep_factors
from .panel import build_problem, load_covariates, load_panel, parse_covariates, write_panel
from .report import write_csv, write_json
from .simulation import MethodConfig, SimulationConfig, run_benchmark, simulate_dgp
from .solvers import METHOD_NAMES, fit_weights


logger = logging.getLogger("trendbal.cli")

_LAMBDA_METHODS = {"cridge", "classo", "cenet", "softnn"}
_ALPHA_METHODS = {"cenet", "bp"}


def _float_grid(raw: Optional[str]) -> List[float]:
    if raw is None or not str(raw).strip():
        return []
    return [float(item) for item in str(raw).split(",") if item.strip()]


def _int_grid(raw: Optional[str]) -> List[int]:
    """``"0,1,3"`` or ``"0..3"``."""
    if raw is None or not str(raw).strip():
        return []
    text = str(raw).strip()
    if ".." in text:
        start, end = text.split("..", 1)
        return list(range(int(start), int(end) + 1))
    return [int(item) for item in text.split(",") if item.strip()]


class RunConfig(BaseModel):
    """Parsed flags of one CLI invocation."""

    command: str
    data: Optional[Path] = None
    layout: str = "wide"
    covariates: Optional[Path] = None
    trending: str = ""
    balancing: str = ""
    standardize: bool = False
    treated: Optional[str] = None
    t0: Optional[str] = None
    out: Path = Path(".")
    seed: int = 0
    deterministic: bool = False
    quiet: bool = False
    methods: List[str] = Field(default_factory=lambda: ["cridge"])
    lambdas: List[float] = Field(default_factory=list)
    alphas: List[float] = Field(default_factory=lambda: [1.0])
    kappa: float = 1.0
    epsilon: float = settings.bp_epsilon
    V: Optional[List[float]] = None
    r_values: List[int] = Field(default_factory=list)
    observed_trend: str = "none"

    model_config = ConfigDict(frozen=True)

    @field_validator("lambdas", mode="after")
    @classmethod
    def _sort_lambdas(cls, value: List[float]) -> List[float]:
        if any(lam < 0 for lam in value):
            raise ValueError("lambda grid entries must be nonnegative")
        return sorted(set(value))

    @field_validator("alphas", mode="after")
    @classmethod
    def _check_alphas(cls, value: List[float]) -> List[float]:
        if any(not 0.0 <= a <= 1.0 for a in value):
            raise ValueError("alpha grid entries must lie in [0, 1]")
        return sorted(set(value)) or [1.0]

    @field_validator("methods", mode="after")
    @classmethod
    def _check_methods(cls, value: List[str]) -> List[str]:
        names = [item.strip().lower() for item in value if item.strip()]
        unknown = [name for name in names if name not in METHOD_NAMES]
        if unknown:
            raise ValueError(f"unknown method(s): {', '.join(unknown)}")
        return names

    @model_validator(mode="after")
    def _require_lambda(self) -> "RunConfig":
        penalized = [name for name in self.methods if name in _LAMBDA_METHODS]
        if self.command in ("fit", "factors", "diagnose") and penalized and not self.lambdas:
            raise ValueError(f"--lambda is required for {', '.join(penalized)}")
        return self

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        fields: Dict[str, Any] = {"command": args.command}
        for name in (
            "data",
            "layout",
            "covariates",
            "trending",
            "balancing",
            "standardize",
            "treated",
            "t0",
            "out",
            "seed",
            "deterministic",
            "quiet",
            "kappa",
            "epsilon",
            "observed_trend",
        ):
            value = getattr(args, name, None)
            if value is not None:
                fields[name] = value
        if getattr(args, "method", None):
            fields["methods"] = str(args.method).split(",")
        if getattr(args, "lam", None) is not None:
            fields["lambdas"] = _float_grid(args.lam)
        if getattr(args, "alpha", None) is not None:
            fields["alphas"] = _float_grid(args.alpha)
        if getattr(args, "V", None):
            fields["V"] = _float_grid(args.V)
        if getattr(args, "r", None) is not None:
            fields["r_values"] = _int_grid(args.r)
        return cls(**fields)


def _configure_logging(verbose: bool) -> None:
    level = logging.INFO if verbose else settings.log_level
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _prepare_out(config: RunConfig) -> Path:
    config.out.mkdir(parents=True, exist_ok=True)
    return config.out


def _load_inputs(config: RunConfig) -> Tuple[PanelDataset, CovariateProblem]:
    if config.data is None or config.t0 is None:
        raise TrendBalError("--data and --t0 are required")
    data = load_panel(config.data, layout=config.layout, treated=config.treated, t0_label=config.t0)
    externals = load_covariates(config.covariates) if config.covariates else None
    spec = CovariateSpec(
        trending=parse_covariates(config.trending),
        balancing=parse_covariates(config.balancing),
        standardize_balancing=config.standardize,
    )
    return data, build_problem(data, spec, externals)


def _weight_label(weights: WeightSolution, name: str) -> str:
    if name in ("cenet",):
        return f"{name}(lambda={weights.lam:g},alpha={weights.alpha:g})"
    if name in _LAMBDA_METHODS:
        return f"{name}(lambda={weights.lam:g})"
    if name == "bp" and weights.alpha != 1.0:
        return f"bp(alpha={weights.alpha:g})"
    return name


def _grid_points(config: RunConfig) -> List[Tuple[str, float, float]]:
    """Every (method, lambda, alpha) combination the flags ask for."""
    points: List[Tuple[str, float, float]] = []
    for name in config.methods:
        lambdas = config.lambdas if name in _LAMBDA_METHODS else [0.0]
        alphas = config.alphas if name in _ALPHA_METHODS else [1.0]
        points.extend((name, lam, alpha) for lam in lambdas for alpha in alphas)
    return points


def _weight_grid(config: RunConfig, prob: CovariateProblem) -> List[Tuple[str, WeightSolution]]:
    V = np.asarray(config.V) if config.V else None
    out: List[Tuple[str, WeightSolution]] = []
    for name, lam, alpha in _grid_points(config):
        weights = fit_weights(
            prob,
            name,
            lam=lam,
            alpha=alpha,
            kappa=config.kappa,
            epsilon=config.epsilon,
            V=V,
        )
        out.append((_weight_label(weights, name), weights))
    return out



def _print_table(console: Console, title: str, columns: List[str], rows: Iterable[List[str]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*row)
    console.print(table)


def cmd_fit(config: RunConfig) -> int:
    data, prob = _load_inputs(config)
    out = _prepare_out(config)
    grid = _weight_grid(config, prob)
    periods = list(data.period_labels)

    weight_docs = []
    effect_docs = []
    counterfactuals: Dict[str, Any] = {"period": periods, "actual": np.array(data.y1)}
    gaps: Dict[str, Any] = {"period": periods}
    for label, weights in grid:
        effects = did_effects(data, weights)
        weight_docs.append({"label": label, **weights.for_wire()})
        effect_docs.append({"label": label, **effects.for_wire()})
        counterfactuals[label] = effects.counterfactual
        gaps[label] = effects.gap_series

    write_json(
        out / "weights.json",
        {
            "weights": weight_docs,
            "control_labels": data.control_labels,
            "covariates": {"trending": prob.row_names(), "balancing": prob.q_names},
        },
        command="fit",
        seed=config.seed,
        deterministic=config.deterministic,
    )
    write_json(
        out / "effects.json",
        {"effects": effect_docs, "periods": periods, "t0": data.t0},
        command="fit",
        seed=config.seed,
        deterministic=config.deterministic,
    )
    write_csv(out / "counterfactual.csv", pd.DataFrame(counterfactuals))
    write_csv(out / "gap.csv", pd.DataFrame(gaps))

    if not config.quiet:
        rows = [
            [label, f"{w.feas_residual:.2e}", f"{w.kkt_residual:.2e}", f"{e['ate']:.6g}"]
            for (label, w), e in zip(grid, effect_docs)
        ]
        _print_table(Console(), "fit", ["weights", "feas", "kkt", "ATE"], rows)
    return 0


def _observed_trend(kind: str, t0: int) -> Optional[np.ndarray]:
    t = np.arange(1, t0 + 1, dtype=float)
    if kind == "none":
        return None
    if kind == "linear":
        return t[:, None]
    if kind == "quadratic":
        return np.column_stack([t, t**2])
    raise TrendBalError(f"unknown observed trend: {kind!r}")


def cmd_factors(config: RunConfig) -> int:
    data, prob = _load_inputs(config)
    out = _prepare_out(config)
    g = _observed_trend(config.observed_trend, data.t0)
    r_values = config.r_values or [0]
    points = _grid_points(config)

    A = build_projected_matrix(data, prob, g)
    full = estimate_factors(A, max(r_values))
    series: Dict[str, Any] = {"period": list(data.period_labels), "actual": np.array(data.y1)}
    sweep_docs = []
    for name, lam, alpha in points:
        entries = sweep_factors(
            data, prob, r_values, method=name, lam=lam, alpha=alpha, kappa=config.kappa, g=g
        )
        label = _weight_label(entries[0].weights, name)
        # a single grid point keeps the bare r=<r> column names
        prefix = "" if len(points) == 1 else f"{label} "
        for entry in entries:
            series[f"{prefix}r={entry.r}"] = entry.counterfactual
            sweep_docs.append(
                {
                    "label": label,
                    "r": entry.r,
                    "eigenvalues": entry.estimate.eigenvalues,
                    "residual_fro": entry.estimate.residual_fro,
                    "loadings": entry.estimate.loadings,
                    "weights": entry.weights.for_wire(),
                }
            )

    write_csv(
        out / "eigenvalues.csv",
        pd.DataFrame({"k": np.arange(1, full.spectrum.shape[0] + 1), "eigenvalue": full.spectrum}),
    )
    loadings = pd.DataFrame({"unit": data.unit_labels})
    for k in range(full.r):
        loadings[f"h{k + 1}"] = full.loadings[k]
    write_csv(out / "loadings.csv", loadings)
    write_csv(out / "counterfactual.csv", pd.DataFrame(series))
    write_json(
        out / "factors.json",
        {"spectrum": full.spectrum, "unit_labels": data.unit_labels, "sweep": sweep_docs},
        command="factors",
        seed=config.seed,
        deterministic=config.deterministic,
    )
    return 0



def cmd_simulate(config: RunConfig, sim: SimulationConfig) -> int:
    out = _prepare_out(config)
    data, truth = simulate_dgp(sim)
    write_panel(data, out / "panel.csv", layout="wide")
    periods = list(data.period_labels)
    truth_frame = pd.DataFrame({"period": periods, "gamma0": truth.gamma0})
    for k in range(truth.gamma.shape[1]):
        truth_frame[f"gamma{k + 1}"] = truth.gamma[:, k]
    for j, unit in enumerate(data.unit_labels):
        truth_frame[f"y0_{unit}"] = truth.y0[:, j]
    write_csv(out / "truth.csv", truth_frame)
    covariates = pd.DataFrame({"unit": data.unit_labels, "mu": truth.mu})
    for k in range(truth.z.shape[1]):
        covariates[f"z{k + 1}"] = truth.z[:, k]
    write_csv(out / "covariates.csv", covariates)
    logger.info("simulated %d units x %d periods (variant %s, seed %d)", data.n_controls + 1, data.n_periods, sim.variant, sim.seed)
    return 0


def _benchmark_methods(args: argparse.Namespace) -> List[MethodConfig]:
    methods: List[MethodConfig] = []
    lam = float(args.lam) if args.lam is not None else 2.0
    alpha = float(args.alpha) if args.alpha is not None else 1.0
    for name in [item.strip().lower() for item in args.methods.split(",") if item.strip()]:
        if name == "di":
            methods.append(MethodConfig(name="di", lam=args.di_lambda, alpha=args.di_alpha))
        elif name in _LAMBDA_METHODS:
            methods.append(MethodConfig(name=name, lam=lam, alpha=alpha, kappa=args.kappa or 1.0))
        else:
            methods.append(MethodConfig(name=name, alpha=alpha))
    return methods


def cmd_compare(config: RunConfig, sim: SimulationConfig, methods: List[MethodConfig], n_seeds: int, threads: int) -> int:
    out = _prepare_out(config)
    report = run_benchmark(sim, methods, n_seeds, threads=threads)
    write_json(
        out / "benchmark.json",
        report.for_wire(),
        command="compare",
        seed=sim.seed,
        deterministic=config.deterministic,
    )
    rows = []
    for label, summary in report.per_method.items():
        for seed, post, pre in zip(report.seeds, summary.post_rmse, summary.pre_rmse):
            failure = next((f["error"] for f in summary.failures if f["seed"] == seed), "")
            rows.append({"seed": seed, "method": label, "post_rmse": post, "pre_rmse": pre, "error": failure})
    write_csv(out / "benchmark_seeds.csv", pd.DataFrame(rows, columns=["seed", "method", "post_rmse", "pre_rmse", "error"]))

    if not config.quiet:
        table_rows = [
            [
                label,
                "-" if s.median_post_rmse is None else f"{s.median_post_rmse:.4g}",
                "-" if s.median_pre_rmse is None else f"{s.median_pre_rmse:.4g}",
                str(len(s.failures)),
            ]
            for label, s in report.per_method.items()
        ]
        _print_table(Console(), f"compare ({n_seeds} seeds)", ["method", "median post RMSE", "median pre RMSE", "failures"], table_rows)
        if report.endogeneity is not None:
            e = report.endogeneity
            Console().print(f"1 - 1'w: {e.mean_one_minus_sum:.4f} (s.e. {e.mc_std_error:.4f}), limit {e.analytic:.4f}")
    return 0


def cmd_diagnose(config: RunConfig, pretrend: bool, compatibility: bool, against: str) -> int:
    data, prob = _load_inputs(config)
    out = _prepare_out(config)
    if not pretrend and not compatibility:
        pretrend = True
    grid = _weight_grid(config, prob)
    reference = fit_weights(prob, against, epsilon=config.epsilon) if compatibility else None
    reports = []
    for label, weights in grid:
        if pretrend:
            reports.append({"weights_label": label, **pretrend_test(data, weights).for_wire()})
        if reference is not None:
            report = compatibility_test(data, weights, reference)
            reports.append({"weights_label": f"{label} vs {against}", **report.for_wire()})
    write_json(
        out / "diagnostics.json",
        {"reports": reports},
        command="diagnose",
        seed=config.seed,
        deterministic=config.deterministic,
    )
    return 0


def _add_common(parser: argparse.ArgumentParser, data_required: bool = True) -> None:
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deterministic", action="store_true", help="omit the timestamp from JSON metadata")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--quiet", action="store_true", help="suppress summary tables")
    if not data_required:
        return
    parser.add_argument("--data", type=Path, required=True, help="panel CSV")
    parser.add_argument("--layout", choices=["wide", "long"], default="wide")
    parser.add_argument("--covariates", type=Path, help="unit,<var1>,... CSV")
    parser.add_argument("--trending", default="", help="comma-separated covariate tokens for z")
    parser.add_argument("--balancing", default="", help="comma-separated covariate tokens for q")
    parser.add_argument("--standardize", action="store_true", help="scale balancing rows by their spread")
    parser.add_argument("--treated", help="treated unit label (default: first wide column, or first unit in natural order for long panels)")
    parser.add_argument("--t0", required=True, help="label of the last pre-treatment period")
    parser.add_argument("--method", default="cridge", help=f"one or more of {','.join(METHOD_NAMES)}")
    parser.add_argument(
        "--lambda",
        dest="lam",
        help="comma-separated lambda grid; required for cridge, classo, cenet and softnn (no default)",
    )
    parser.add_argument("--alpha", help="comma-separated alpha grid")
    parser.add_argument("--kappa", type=float, default=1.0)
    parser.add_argument("--epsilon", type=float, default=settings.bp_epsilon)
    parser.add_argument("--v", dest="V", help="comma-separated diagonal of V for adh")


def _add_simulation(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", type=str.upper, choices=["A", "B"], default="A")
    parser.add_argument("--mode", choices=["appendix", "endogeneity"], default="appendix")
    parser.add_argument("--J", type=int, default=38)
    parser.add_argument("--T0", type=int, default=20)
    parser.add_argument("--T1", type=int, default=10)
    parser.add_argument("--K", type=int, default=4)
    parser.add_argument("--noise-scale", type=float, default=0.1)
    parser.add_argument("--ar-coef", type=float, default=0.2)
    parser.add_argument("--burn-in", type=int, default=10)
    parser.add_argument("--effect", type=float, default=0.0)
    parser.add_argument("--sigma-gamma", type=float, default=1.0)
    parser.add_argument("--sigma-u", type=float, default=1.0)


def _simulation_config(args: argparse.Namespace) -> SimulationConfig:
    return SimulationConfig(
        J=args.J,
        T0=args.T0,
        T1=args.T1,
        K=args.K,
        variant=args.variant,
        noise_scale=args.noise_scale,
        ar_coef=args.ar_coef,
        burn_in=args.burn_in,
        seed=args.seed,
        effect=args.effect,
        mode=args.mode,
        sigma_gamma=args.sigma_gamma,
        sigma_u=args.sigma_u,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trendbal", description="Exact trend-balancing counterfactual weights.")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit weights and effects")
    _add_common(fit)

    factors = sub.add_parser("factors", help="estimate factor loadings and sweep r")
    _add_common(factors)
    factors.add_argument("--r", default="0", help="factor counts, e.g. 0,1,2 or 0..3")
    factors.add_argument("--observed-trend", choices=["none", "linear", "quadratic"], default="none")

    simulate = sub.add_parser("simulate", help="generate a synthetic panel with its truth record")
    _add_common(simulate, data_required=False)
    _add_simulation(simulate)

    compare = sub.add_parser("compare", help="Monte Carlo benchmark on synthetic panels")
    _add_common(compare, data_required=False)
    _add_simulation(compare)
    compare.add_argument("--methods", default="cridge,di,hcw")
    compare.add_argument("--lambda", dest="lam", help="lambda for the constrained methods (default 2)")
    compare.add_argument("--alpha")
    compare.add_argument("--kappa", type=float, default=1.0)
    compare.add_argument("--di-lambda", type=float, default=settings.di_lambda)
    compare.add_argument("--di-alpha", type=float, default=settings.di_alpha)
    compare.add_argument("--seeds", type=int, default=50, help="number of seeds")
    compare.add_argument("--threads", type=int, default=settings.threads)

    diagnose = sub.add_parser("diagnose", help="pre-trend and compatibility regressions")
    _add_common(diagnose)
    diagnose.add_argument("--pretrend", action="store_true")
    diagnose.add_argument("--compatibility", action="store_true")
    diagnose.add_argument("--against", default="maxshrink", help="reference weights for --compatibility")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        if args.command == "simulate":
            config = RunConfig(command="simulate", out=args.out, seed=args.seed, deterministic=args.deterministic, quiet=args.quiet)
            return cmd_simulate(config, _simulation_config(args))
        if args.command == "compare":
            config = RunConfig(command="compare", out=args.out, seed=args.seed, deterministic=args.deterministic, quiet=args.quiet)
            return cmd_compare(config, _simulation_config(args), _benchmark_methods(args), args.seeds, args.threads)
        config = RunConfig.from_args(args)
        if args.command == "fit":
            return cmd_fit(config)
        if args.command == "factors":
            return cmd_factors(config)
        return cmd_diagnose(config, args.pretrend, args.compatibility, args.against)
    except (TrendBalError, ValidationError, pd.errors.ParserError, pd.errors.EmptyDataError, OSError, ValueError) as exc:
        if isinstance(exc, ValidationError) and exc.errors():
            message = exc.errors()[0]["msg"]
        else:
            message = str(exc).splitlines()[0] if str(exc) else exc.__class__.__name__
        print(f"trendbal: error: {message}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    run()


__all__ = ["RunConfig", "build_parser", "main", "run", "cmd_fit", "cmd_factors", "cmd_simulate", "cmd_compare", "cmd_diagnose"]
