"""
Command-line interface: `test`, `confset`, `diagnose`, `simulate` and
`sweep` subcommands over the library.

Exit codes: 0 on success, 1 on usage errors, 2 on data or model errors.
Errors are reported as one JSON line {"reason", "message"} on standard
error; logs also go to standard error so standard output stays parseable.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from . import __version__
from .artests import prepare_context, run_test
from .config import Settings, load_settings
from .confset import cartesian_grid, invert_many
from .dataio import ColumnSchema, load_dataset, partial_and_standardise, structural_residuals
from .errors import DomainError, NotApplicableError, RJARError
from .models import CliConfig, Design, SupScoreScaling, TestName, TestOptions
from .montecarlo import assumption_sweep, build_sim_config, run_power_suite
from .outputs import dumps, resolve_path, write_csv, write_sidecar, write_with_sidecar
from .penalty import assumption_diagnostics, select_gamma
from .ridge_kernel import build_kernel

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DEFAULT_POWER_GRID = (0.0, 2.0, 21)


class UsageError(Exception):
    """Raised instead of exiting when argparse rejects the command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one number")
    return values


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _test_list(text: str) -> List[TestName]:
    try:
        return [TestName.parse(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown test in '{text}'; choose from rjar, cms, ms, supscore"
        )


def _name_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _add_data_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("data")
    group.add_argument("--input", type=Path, required=True, help="CSV file with a header row")
    group.add_argument("--outcome", required=True, help="outcome column")
    group.add_argument(
        "--endogenous", type=_name_list, required=True, help="endogenous columns, comma separated"
    )
    group.add_argument(
        "--instruments",
        type=_name_list,
        required=True,
        help="instrument columns or globs such as 'z*', comma separated",
    )
    group.add_argument(
        "--covariates", type=_name_list, default=[], help="exogenous covariates, comma separated"
    )
    group.add_argument("--intercept", action="store_true", help="add a constant to the covariates")
    group.add_argument(
        "--interact",
        action="store_true",
        help="interact every instrument with every covariate",
    )


def _add_test_flags(parser: argparse.ArgumentParser, default_tests: str = "rjar"):
    parser.add_argument("--alpha", type=float, default=0.05, help="significance level")
    parser.add_argument(
        "--tests",
        type=_test_list,
        default=_test_list(default_tests),
        help="comma-separated tests: rjar, cms, ms, supscore",
    )
    parser.add_argument("--gamma-floor", type=float, default=None, help="penalty floor when r < k")
    parser.add_argument("--c-bcch", type=float, default=None, help="Sup Score constant c > 1")
    parser.add_argument(
        "--supscore-scaling",
        choices=[mode.value for mode in SupScoreScaling],
        default=SupScoreScaling.SCALE_CONSISTENT.value,
    )


def _add_output_flags(parser: argparse.ArgumentParser, default: Optional[str] = None):
    parser.add_argument(
        "--output",
        type=Path,
        default=default,
        help="output file" if default else "output file; JSON goes to standard output when omitted",
    )
    parser.add_argument("--output-dir", type=Path, default=None, help="base for relative outputs")
    parser.add_argument("--threads", type=int, default=None, help="worker cap")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="rjar",
        description="Ridge-regularised jackknifed Anderson-Rubin inference with many instruments",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    verbosity.add_argument("--quiet", action="store_true", help="log warnings and errors only")

    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    test = sub.add_parser("test", help="test H0: beta = beta0")
    _add_data_flags(test)
    test.add_argument("--beta0", type=_float_list, required=True, help="null value(s), comma separated")
    _add_test_flags(test)
    test.add_argument("--gamma", type=float, default=None, help="fixed RJAR penalty instead of gamma*")
    _add_output_flags(test)

    confset = sub.add_parser("confset", help="confidence set by grid inversion")
    _add_data_flags(confset)
    confset.add_argument("--grid-min", type=_float_list, required=True)
    confset.add_argument("--grid-max", type=_float_list, required=True)
    confset.add_argument("--grid-points", type=int, default=100)
    _add_test_flags(confset)
    confset.add_argument("--gamma", type=float, default=None)
    _add_output_flags(confset, default="confset.csv")

    diagnose = sub.add_parser("diagnose", help="penalty selection diagnostics")
    _add_data_flags(diagnose)
    diagnose.add_argument("--gamma-floor", type=float, default=None)
    diagnose.add_argument("--curve", action="store_true", help="include the S(gamma)/r series")
    _add_output_flags(diagnose)

    simulate = sub.add_parser("simulate", help="Monte-Carlo size and power experiments")
    simulate.add_argument("--n", type=int, default=100)
    simulate.add_argument("--k", type=int, default=30)
    simulate.add_argument("--design", choices=[d.value for d in Design], type=str.upper, default="SPARSE")
    simulate.add_argument("--mu2", type=_float_list, default=[0.0], help="comma-separated mu^2 values")
    simulate.add_argument("--reps", type=int, default=10000)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--beta0-min", type=float, default=DEFAULT_POWER_GRID[0])
    simulate.add_argument("--beta0-max", type=float, default=DEFAULT_POWER_GRID[1])
    simulate.add_argument("--beta0-points", type=int, default=DEFAULT_POWER_GRID[2])
    simulate.add_argument(
        "--fixed-instruments", action="store_true", help="draw Z once and reuse it"
    )
    _add_test_flags(simulate, default_tests="rjar,cms,ms,supscore")
    simulate.add_argument("--size-output", type=Path, default=Path("size.csv"))
    simulate.add_argument("--power-output", type=Path, default=Path("power.csv"))
    simulate.add_argument("--output-dir", type=Path, default=None)
    simulate.add_argument("--threads", type=int, default=None)

    sweep = sub.add_parser("sweep", help="gamma* and S(gamma*)/r across sample sizes")
    sweep.add_argument("--n-grid", type=_int_list, required=True, help="comma-separated n values")
    sweep.add_argument("--ratio", type=float, default=1.9, help="k = ceil(ratio * n)")
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--gamma-floor", type=float, default=None)
    sweep.add_argument("--output", type=Path, default=Path("sweep.csv"))
    sweep.add_argument("--output-dir", type=Path, default=None)

    return parser


def configure_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )


def resolve_config(args: argparse.Namespace, settings: Settings) -> CliConfig:
    """
    Merge parsed flags over settings into a validated CliConfig.

    Raises:
        DomainError: if a value is out of range
    """
    values = {key: value for key, value in vars(args).items() if value is not None}
    values.pop("verbose", None)
    values.pop("quiet", None)
    values.setdefault("gamma_floor", settings.gamma_floor)
    values.setdefault("c_bcch", settings.c_bcch)
    values.setdefault("threads", settings.resolved_threads())
    values.setdefault("output_dir", settings.output_dir)
    values["materialize_threshold"] = settings.materialize_threshold
    if "beta0_min" in values:
        values["grid_min"] = [values.pop("beta0_min")]
        values["grid_max"] = [values.pop("beta0_max")]
        values["grid_points"] = values.pop("beta0_points")
    try:
        return CliConfig(**values)
    except ValidationError as e:
        error = e.errors()[0]
        field = ".".join(str(part) for part in error["loc"])
        raise DomainError(f"invalid value for {field}: {error['msg']}") from e


def _test_options(cfg: CliConfig) -> TestOptions:
    return TestOptions(
        c_bcch=cfg.c_bcch, supscore_scaling=cfg.supscore_scaling, gamma=cfg.gamma
    )


def _load_partialled(cfg: CliConfig):
    schema = ColumnSchema(
        outcome=cfg.outcome,
        endogenous=cfg.endogenous,
        instruments=cfg.instruments,
        covariates=cfg.covariates,
        add_intercept=cfg.intercept,
        interact=cfg.interact,
    )
    pd_data = partial_and_standardise(load_dataset(cfg.input, schema))
    kern = build_kernel(pd_data.Z_t, cfg.materialize_threshold)
    logger.info(f"Kernel: n={kern.n}, k={kern.k}, r={kern.r}")
    return pd_data, kern


def _needs_selection(tests: List[TestName]) -> bool:
    return TestName.RJAR in [TestName(t) for t in tests]


def _emit(cfg: CliConfig, document, extra: Optional[dict] = None):
    if cfg.output is None:
        sys.stdout.write(dumps(document))
    else:
        write_with_sidecar(resolve_path(cfg.output, cfg.output_dir), document, cfg, extra)


def cmd_test(cfg: CliConfig) -> int:
    pd_data, kern = _load_partialled(cfg)
    sel = select_gamma(kern, cfg.gamma_floor) if _needs_selection(cfg.tests) else None
    ctx = prepare_context(kern, sel, pd_data.Z_t, _test_options(cfg))
    e = structural_residuals(pd_data, cfg.beta0)

    results = []
    for name in cfg.tests:
        name = TestName(name)
        if not ctx.applicable(name):
            raise NotApplicableError(
                f"{name.value} needs r = k < n, got n={kern.n}, k={kern.k}, r={kern.r}"
            )
        result = run_test(ctx, name, e, cfg.alpha)
        logger.info(
            f"{name.value}: statistic={result.statistic}, "
            f"critical value={result.critical_value:.6g}, reject={result.reject}"
        )
        results.append(result.to_output())

    _emit(
        cfg,
        {
            "n": kern.n,
            "k": kern.k,
            "r": kern.r,
            "beta0": cfg.beta0,
            "alpha": cfg.alpha,
            "gamma_star": None if sel is None else sel.gamma_star,
            "dropped_instruments": pd_data.dropped_cols,
            "results": results,
        },
    )
    return EXIT_OK


def cmd_confset(cfg: CliConfig) -> int:
    pd_data, kern = _load_partialled(cfg)
    if len(cfg.grid_min) != pd_data.g or len(cfg.grid_max) != pd_data.g:
        raise DomainError(
            f"grid bounds need {pd_data.g} values each, one per endogenous regressor"
        )
    sel = select_gamma(kern, cfg.gamma_floor) if _needs_selection(cfg.tests) else None
    grid = cartesian_grid(cfg.grid_min, cfg.grid_max, cfg.grid_points)
    sets = invert_many(
        pd_data,
        kern,
        sel,
        [TestName(t) for t in cfg.tests],
        grid,
        cfg.alpha,
        _test_options(cfg),
        n_jobs=cfg.threads,
    )
    coords = ["beta0"] if pd_data.g == 1 else [f"beta0_{j + 1}" for j in range(pd_data.g)]
    rows = [
        {
            "test": name.value,
            **dict(zip(coords, point)),
            "statistic": statistic,
            "critical_value": cv,
            "accepted": accepted,
        }
        for name, conf in sets.items()
        for point, statistic, cv, accepted in zip(
            conf.grid, conf.statistics, conf.critical_values, conf.accepted
        )
    ]
    summary = {
        name.value: {
            "level": conf.level,
            "gamma_star": conf.gamma_star,
            "components": conf.components,
            "intervals": conf.intervals(),
            "touches_boundary": conf.touches_boundary,
            "empty": conf.is_empty,
        }
        for name, conf in sets.items()
    }
    path = resolve_path(cfg.output, cfg.output_dir)
    write_csv(path, rows, ["test", *coords, "statistic", "critical_value", "accepted"])
    write_sidecar(path, cfg, {"sets": summary, "sidedness": "one-sided upper tail"})
    return EXIT_OK


def cmd_diagnose(cfg: CliConfig) -> int:
    _, kern = _load_partialled(cfg)
    sel = select_gamma(kern, cfg.gamma_floor)
    diagnostics = assumption_diagnostics(kern, sel)
    if not cfg.curve:
        diagnostics = diagnostics.model_copy(update={"ratio_series": []})
    _emit(cfg, diagnostics)
    return EXIT_OK


def cmd_simulate(cfg: CliConfig) -> int:
    beta0_grid = np.linspace(cfg.grid_min[0], cfg.grid_max[0], cfg.grid_points)
    sim = build_sim_config(
        n=cfg.n,
        k=cfg.k,
        design=cfg.design,
        reps=cfg.reps,
        seed=cfg.seed,
        tests=cfg.tests,
        redraw_instruments=not cfg.fixed_instruments,
        gamma_floor=cfg.gamma_floor,
        c_bcch=cfg.c_bcch,
        supscore_scaling=cfg.supscore_scaling,
        power_alpha=cfg.alpha,
        n_jobs=cfg.threads,
    )
    if not np.any(np.isclose(beta0_grid, sim.beta_true, rtol=1e-12, atol=1e-12)):
        beta0_grid = np.sort(np.append(beta0_grid, sim.beta_true))

    results = run_power_suite(sim, cfg.mu2, beta0_grid)

    size_rows = [row for result in results for row in result.size_rows()]
    power_rows = [row for result in results for row in result.power_rows()]
    per_mu2 = [
        {
            "mu2": result.config.mu2,
            "gamma_summary": result.gamma_summary,
            "ms_negative_variance": result.ms_negative_variance,
            "error_counts": result.error_counts,
            "skipped": result.skipped,
        }
        for result in results
    ]
    extra = {
        "experiments": per_mu2,
        "beta0_grid": beta0_grid,
        "redraw_instruments": sim.redraw_instruments,
        "kappa_ones": sim.kappa_ones,
        "dense_rounded": sim.dense_rounded,
    }

    size_path = resolve_path(cfg.size_output, cfg.output_dir)
    write_csv(size_path, size_rows, ["mu2", "alpha", "test", "frequency"])
    write_sidecar(size_path, cfg, extra)
    power_path = resolve_path(cfg.power_output, cfg.output_dir)
    write_csv(power_path, power_rows, ["beta0", "mu2", "test", "frequency"])
    write_sidecar(power_path, cfg, extra)
    return EXIT_OK


def cmd_sweep(cfg: CliConfig) -> int:
    if not cfg.n_grid:
        raise DomainError("--n-grid needs at least one sample size")
    rows = assumption_sweep(
        cfg.n_grid,
        ratio=cfg.ratio,
        seed=cfg.seed,
        gamma_floor=cfg.gamma_floor,
        materialize_threshold=cfg.materialize_threshold,
    )
    path = resolve_path(cfg.output, cfg.output_dir)
    write_csv(path, [row.model_dump() for row in rows], ["n", "k", "r", "gamma_star", "ratio"])
    write_sidecar(path, cfg)
    return EXIT_OK


COMMANDS = {
    "test": cmd_test,
    "confset": cmd_confset,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def _report(error: dict):
    sys.stderr.write(json.dumps(error) + "\n")


def run_cli(argv: Optional[List[str]] = None) -> int:
    """
    Parse argv, dispatch to the library and return the exit code.

    Args:
        argv: arguments without the program name; defaults to sys.argv[1:]

    Returns:
        0 on success, 1 on usage errors, 2 on data or model errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        _report({"reason": "USAGE", "message": str(e)})
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)

    settings = load_settings()
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else settings.log_level
    configure_logging(level)

    try:
        cfg = resolve_config(args, settings)
        logger.info(f"Running '{cfg.subcommand}'")
        return COMMANDS[cfg.subcommand](cfg)
    except RJARError as e:
        logger.error(f"{e.reason}: {e.message}")
        _report(e.to_dict())
        return EXIT_DATA
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        _report({"reason": "INTERNAL", "message": str(e)})
        return EXIT_DATA


def main():
    sys.exit(run_cli())
