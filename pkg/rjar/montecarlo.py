"""
Monte-Carlo harness: Gaussian linear IV design with Toeplitz instruments,
first-stage calibration from the concentration parameter, size and power
experiments for the four tests and the penalty-assumption sweep.

Every replication draws from its own Philox streams keyed by
(seed, replication index), so results do not depend on how replications
are scheduled across workers.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import ValidationError
from scipy import linalg

from .artests import critical_value, prepare_context, run_test
from .dataio import (
    build_dataset,
    partial_and_standardise,
    standardise_instruments,
    structural_residuals,
)
from .errors import DegenerateSignalError, DomainError, RJARError
from .models import (
    Design,
    GammaSummary,
    RejectionCell,
    SimConfig,
    SimResult,
    SweepRow,
    TestName,
)
from .penalty import select_gamma
from .ridge_kernel import build_kernel

logger = logging.getLogger(__name__)

POWER_MU2_GRID = (0.0, 30.0, 60.0, 180.0)
SPARSE_ONES = 5
FIXED_INSTRUMENT_INDEX = 0


def build_sim_config(**fields) -> SimConfig:
    """
    Build a SimConfig from user input.

    Raises:
        DomainError: if any field fails validation
    """
    try:
        return SimConfig(**fields)
    except ValidationError as e:
        raise DomainError(f"invalid simulation configuration: {e.errors()[0]['msg']}") from e


def toeplitz_cov(k: int, z_var: float, z_rho: float) -> np.ndarray:
    """Sigma[l, m] = z_var * z_rho ** |l - m|."""
    if k < 1:
        raise DomainError(f"k must be positive, got {k}")
    if not z_var > 0 or not abs(z_rho) < 1:
        raise DomainError(f"need z_var > 0 and |z_rho| < 1, got {z_var}, {z_rho}")
    return z_var * linalg.toeplitz(z_rho ** np.arange(k, dtype=float))


def kappa_vector(design: Design, k: int) -> np.ndarray:
    """
    First-stage direction: leading ones, zeros elsewhere.

    SPARSE has 5 leading ones. DENSE has floor(0.4 k), which is rounded
    down when 0.4 k is not an integer.
    """
    design = Design(design)
    if design == Design.SPARSE:
        if k < SPARSE_ONES:
            raise DomainError(f"SPARSE design requires k >= {SPARSE_ONES}, got {k}")
        ones = SPARSE_ONES
    else:
        ones = (2 * k) // 5
        if (2 * k) % 5:
            logger.info(f"DENSE design: 0.4k = {0.4 * k:g} rounded down to {ones}")
    kappa = np.zeros(k)
    kappa[:ones] = 1.0
    return kappa


def rho_from_mu2(mu2: float, kappa, sigma_cov, n: int, sigma_v2: float) -> float:
    """
    Scale rho such that pi = rho * kappa has concentration mu2 under the
    population instrument covariance.

    Raises:
        DegenerateSignalError: if mu2 > 0 but kappa' Sigma kappa is not positive
    """
    if mu2 < 0:
        raise DomainError(f"mu2 must be non-negative, got {mu2}")
    if mu2 == 0:
        return 0.0
    kappa = np.asarray(kappa, dtype=float)
    quad = float(kappa @ np.asarray(sigma_cov, dtype=float) @ kappa)
    if not quad > 0:
        raise DegenerateSignalError(
            f"kappa' Sigma kappa = {quad:.3g}; no first-stage direction carries signal"
        )
    return math.sqrt(sigma_v2 * mu2 / (n * quad))


@dataclass(frozen=True)
class ReplicationStreams:
    instruments: np.random.Generator
    errors: np.random.Generator


def make_streams(seed: int, rep_index: int) -> ReplicationStreams:
    """
    Independent Philox streams for one replication.

    replication (seed, index)
      ├── instruments
      └── errors
    """
    root = np.random.SeedSequence([seed, rep_index])
    ss_instruments, ss_errors = root.spawn(2)
    return ReplicationStreams(
        instruments=np.random.Generator(np.random.Philox(ss_instruments)),
        errors=np.random.Generator(np.random.Philox(ss_errors)),
    )


@dataclass(frozen=True)
class DrawPlan:
    """Quantities shared by every replication of one configuration."""

    z_chol: np.ndarray
    err_chol: np.ndarray
    kappa: np.ndarray
    rho: float
    pi: np.ndarray
    Z_fixed: Optional[np.ndarray] = None


def make_plan(cfg: SimConfig) -> DrawPlan:
    sigma_z = toeplitz_cov(cfg.k, cfg.z_var, cfg.z_rho)
    z_chol = linalg.cholesky(sigma_z, lower=True)
    cov_ev = cfg.corr_ev * math.sqrt(cfg.sigma_eps2 * cfg.sigma_v2)
    err_cov = np.array([[cfg.sigma_eps2, cov_ev], [cov_ev, cfg.sigma_v2]])
    err_chol = linalg.cholesky(err_cov, lower=True)

    kappa = kappa_vector(cfg.design, cfg.k)
    rho = rho_from_mu2(cfg.mu2, kappa, sigma_z, cfg.n, cfg.sigma_v2)
    plan = DrawPlan(
        z_chol=z_chol, err_chol=err_chol, kappa=kappa, rho=rho, pi=rho * kappa
    )
    if not cfg.redraw_instruments:
        gen = make_streams(cfg.seed, FIXED_INSTRUMENT_INDEX).instruments
        plan = replace(plan, Z_fixed=_gaussian_rows(gen, cfg.n, z_chol))
    return plan


def _gaussian_rows(gen: np.random.Generator, n: int, chol: np.ndarray) -> np.ndarray:
    return gen.standard_normal((n, chol.shape[0])) @ chol.T


def instrument_draw(cfg: SimConfig, rep_index: int, plan: Optional[DrawPlan] = None) -> np.ndarray:
    """Z with i.i.d. N(0, Sigma) rows from the replication's instrument stream."""
    plan = plan or make_plan(cfg)
    return _gaussian_rows(make_streams(cfg.seed, rep_index).instruments, cfg.n, plan.z_chol)


def error_draw(
    cfg: SimConfig, rep_index: int, plan: Optional[DrawPlan] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """(eps, v) with i.i.d. bivariate normal rows from the error stream."""
    plan = plan or make_plan(cfg)
    E = _gaussian_rows(make_streams(cfg.seed, rep_index).errors, cfg.n, plan.err_chol)
    return E[:, 0].copy(), E[:, 1].copy()


def draw_replication(
    cfg: SimConfig, rep_index: int, plan: Optional[DrawPlan] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One sample from the design y = X beta + eps, X = Z pi + v.

    Returns:
        Tuple of (y, X with shape (n, 1), Z)
    """
    plan = plan or make_plan(cfg)
    if plan.Z_fixed is not None:
        Z = plan.Z_fixed
    else:
        Z = instrument_draw(cfg, rep_index, plan)
    eps, v = error_draw(cfg, rep_index, plan)
    x = v.copy() if plan.rho == 0 else Z @ plan.pi + v
    y = x * cfg.beta_true + eps
    return y, x[:, None], Z


def empirical_concentration(cfg: SimConfig, draws: int) -> np.ndarray:
    """n pi' (Z'Z / n) pi / sigma_v^2 for each of the first `draws` instrument draws."""
    plan = make_plan(cfg)
    values = np.empty(draws)
    for i in range(draws):
        Z = plan.Z_fixed if plan.Z_fixed is not None else instrument_draw(cfg, i, plan)
        signal = Z @ plan.pi
        values[i] = float(signal @ signal) / cfg.sigma_v2
    return values


@dataclass
class _ReplicationOutcome:
    counts: np.ndarray
    gamma_star: float
    ms_negative: int
    errors: Counter
    statistics: Optional[np.ndarray] = None


def _replicate(
    cfg: SimConfig,
    rep_index: int,
    plan: DrawPlan,
    tests: List[TestName],
    beta0_grid: np.ndarray,
) -> _ReplicationOutcome:
    alphas = np.asarray(cfg.alpha_grid)
    counts = np.zeros((len(tests), len(beta0_grid), len(alphas)), dtype=np.int64)
    statistics = np.full((len(tests), len(beta0_grid)), np.nan) if cfg.keep_traces else None
    errors: Counter = Counter()
    ms_negative = 0

    y, X, Z = draw_replication(cfg, rep_index, plan)
    try:
        pd_data = partial_and_standardise(build_dataset(y, X, Z))
        kern = build_kernel(pd_data.Z_t)
    except RJARError as e:
        logger.debug(f"Replication {rep_index}: data preparation failed ({e.reason})")
        for test in tests:
            errors[f"{test.value}:{e.reason}"] += len(beta0_grid)
        return _ReplicationOutcome(
            counts=counts,
            gamma_star=math.nan,
            ms_negative=0,
            errors=errors,
            statistics=statistics,
        )
    options = cfg.test_options()

    sel = None
    gamma_star = math.nan
    try:
        sel = select_gamma(kern, cfg.gamma_floor)
        gamma_star = sel.gamma_star
    except RJARError as e:
        logger.debug(f"Replication {rep_index}: penalty selection failed ({e.reason})")
    ctx = prepare_context(kern, sel, pd_data.Z_t, options)

    residuals = [structural_residuals(pd_data, [b]) for b in beta0_grid]
    for t, test in enumerate(tests):
        if (test == TestName.RJAR and sel is None) or not ctx.applicable(test):
            reason = "DIAGONAL_PROJECTION" if test == TestName.RJAR else "NOT_APPLICABLE"
            errors[f"{test.value}:{reason}"] += len(beta0_grid)
            continue
        cvs = np.array([critical_value(test, a, kern.n, kern.k, options) for a in alphas])
        for b, e in enumerate(residuals):
            try:
                result = run_test(ctx, test, e, cfg.power_alpha)
            except RJARError as err:
                errors[f"{test.value}:{err.reason}"] += 1
                continue
            if result.statistic is None:
                ms_negative += 1
                continue
            counts[t, b] = result.statistic > cvs
            if statistics is not None:
                statistics[t, b] = result.statistic

    return _ReplicationOutcome(
        counts=counts,
        gamma_star=gamma_star,
        ms_negative=ms_negative,
        errors=errors,
        statistics=statistics,
    )


def _summarise_gamma(values: np.ndarray) -> GammaSummary:
    values = values[np.isfinite(values)]
    if values.size == 0:
        nan = float("nan")
        return GammaSummary(median=nan, q25=nan, q75=nan, iqr=nan, minimum=nan, maximum=nan)
    q25, median, q75 = np.percentile(values, [25, 50, 75])
    return GammaSummary(
        median=float(median),
        q25=float(q25),
        q75=float(q75),
        iqr=float(q75 - q25),
        minimum=float(values.min()),
        maximum=float(values.max()),
    )


def _applicable_tests(cfg: SimConfig) -> Tuple[List[TestName], Dict[str, str]]:
    tests, skipped = [], {}
    for test in cfg.tests:
        test = TestName(test)
        if test in (TestName.CMS, TestName.MS) and cfg.k >= cfg.n:
            skipped[test.value] = (
                f"NOT_APPLICABLE: unregularised jackknifed AR tests need k < n "
                f"(k={cfg.k}, n={cfg.n})"
            )
            continue
        if test not in tests:
            tests.append(test)
    return tests, skipped


def run_experiment(cfg: SimConfig, beta0_grid: Optional[Sequence[float]] = None) -> SimResult:
    """
    Rejection frequencies of every requested test over replications.

    Each replication draws data, standardises the instruments, builds the
    kernel, selects gamma* and evaluates each test at every null value in
    beta0_grid against the critical value of every level in cfg.alpha_grid.
    Per-replication rejection counts are integers summed in replication
    order, so the result is identical for any number of workers.

    Args:
        cfg: experiment description
        beta0_grid: null values; defaults to [cfg.beta_true]

    Returns:
        SimResult with one cell per (test, beta0, alpha); tests that cannot
        be computed for (n, k) appear in `skipped` instead of `cells`
    """
    beta0_grid = np.asarray(
        [cfg.beta_true] if beta0_grid is None else list(beta0_grid), dtype=float
    )
    if beta0_grid.size == 0 or not np.all(np.isfinite(beta0_grid)):
        raise DomainError("beta0 grid must be non-empty and finite")

    tests, skipped = _applicable_tests(cfg)
    for name, reason in skipped.items():
        logger.warning(f"Skipping {name}: {reason}")

    plan = make_plan(cfg)
    n_jobs = cfg.n_jobs or 1
    logger.info(
        f"Running {cfg.reps} replications: n={cfg.n}, k={cfg.k}, design={cfg.design.value}, "
        f"mu2={cfg.mu2:g}, rho={plan.rho:.6g}, {len(beta0_grid)} null values, "
        f"tests={[t.value for t in tests]}, workers={n_jobs}"
    )

    if n_jobs == 1:
        outcomes = [
            _replicate(cfg, i, plan, tests, beta0_grid) for i in range(cfg.reps)
        ]
    else:
        outcomes = Parallel(n_jobs=n_jobs)(
            delayed(_replicate)(cfg, i, plan, tests, beta0_grid) for i in range(cfg.reps)
        )

    counts = np.zeros((len(tests), len(beta0_grid), len(cfg.alpha_grid)), dtype=np.int64)
    errors: Counter = Counter()
    ms_negative = 0
    for outcome in outcomes:
        counts += outcome.counts
        errors.update(outcome.errors)
        ms_negative += outcome.ms_negative

    cells = [
        RejectionCell(
            test=test,
            beta0=float(beta0),
            alpha=float(alpha),
            rejections=int(counts[t, b, a]),
            reps=cfg.reps,
        )
        for t, test in enumerate(tests)
        for b, beta0 in enumerate(beta0_grid)
        for a, alpha in enumerate(cfg.alpha_grid)
    ]

    traces = None
    if cfg.keep_traces:
        traces = {
            test.value: [
                [None if math.isnan(s) else float(s) for s in outcome.statistics[t]]
                for outcome in outcomes
            ]
            for t, test in enumerate(tests)
        }

    if ms_negative:
        logger.warning(f"MS variance estimate was not positive in {ms_negative} evaluations")
    if errors:
        logger.warning(f"Per-test errors counted as non-rejections: {dict(sorted(errors.items()))}")

    result = SimResult(
        config=cfg,
        beta0_grid=beta0_grid.tolist(),
        cells=cells,
        skipped=skipped,
        gamma_summary=_summarise_gamma(np.array([o.gamma_star for o in outcomes])),
        ms_negative_variance=ms_negative,
        error_counts=dict(sorted(errors.items())),
        traces=traces,
    )
    logger.info(f"Experiment complete: gamma* median {result.gamma_summary.median:.6g}")
    return result


def run_power_suite(
    cfg: SimConfig,
    mu2_grid: Sequence[float] = POWER_MU2_GRID,
    beta0_grid: Optional[Sequence[float]] = None,
) -> List[SimResult]:
    """One experiment per concentration parameter, sharing everything else."""
    return [
        run_experiment(cfg.model_copy(update={"mu2": float(mu2)}), beta0_grid)
        for mu2 in mu2_grid
    ]


def assumption_sweep(
    n_grid: Sequence[int],
    ratio: float = 1.9,
    z_var: float = 0.3,
    z_rho: float = 0.5,
    seed: int = 0,
    gamma_floor: float = 1.0,
    materialize_threshold: Optional[int] = None,
) -> List[SweepRow]:
    """
    gamma* and S(gamma*)/r for one instrument draw per sample size, with
    k = ceil(ratio * n).

    The draw for the i-th entry of n_grid uses the instrument stream of
    (seed, i).
    """
    if not ratio > 0:
        raise DomainError(f"ratio must be positive, got {ratio}")
    rows = []
    for index, n in enumerate(n_grid):
        n = int(n)
        if n < 2:
            raise DomainError(f"sample sizes must be at least 2, got {n}")
        k = max(1, math.ceil(round(ratio * n, 9)))
        chol = linalg.cholesky(toeplitz_cov(k, z_var, z_rho), lower=True)
        Z = _gaussian_rows(make_streams(seed, index).instruments, n, chol)
        Z_std, _, _ = standardise_instruments(Z)
        kern = build_kernel(Z_std, materialize_threshold)
        sel = select_gamma(kern, gamma_floor)
        rows.append(
            SweepRow(n=n, k=k, r=kern.r, gamma_star=sel.gamma_star, ratio=sel.implied_c)
        )
        logger.info(
            f"Sweep n={n}, k={k}, r={kern.r}: gamma*={sel.gamma_star:.6g}, "
            f"S/r={sel.implied_c:.6g}"
        )
    return rows
