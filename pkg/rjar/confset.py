"""
Confidence sets by test inversion over a grid of null values.
"""

import itertools
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .artests import TestContext, prepare_context, run_test
from .dataio import PartialledData, structural_residuals
from .errors import DimensionError, DomainError, NotApplicableError
from .models import ConfidenceSet, PenaltySelection, TestName, TestOptions
from .ridge_kernel import RidgeKernel

logger = logging.getLogger(__name__)

DEFAULT_GRID_POINTS = 100


def linear_grid(lower: float, upper: float, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Equally spaced scan points over user bounds, shape (points, 1)."""
    return cartesian_grid([lower], [upper], points)


def cartesian_grid(
    lowers: Sequence[float], uppers: Sequence[float], points: int = DEFAULT_GRID_POINTS
) -> np.ndarray:
    """Cartesian product of per-coordinate linear grids, shape (points**g, g)."""
    if len(lowers) != len(uppers) or not lowers:
        raise DimensionError("grid bounds need one lower and one upper per coefficient")
    if points < 1:
        raise DomainError(f"grid needs at least one point, got {points}")
    axes = []
    for lo, hi in zip(lowers, uppers):
        if not np.isfinite(lo) or not np.isfinite(hi) or lo > hi:
            raise DomainError(f"invalid grid bounds [{lo}, {hi}]")
        axes.append(np.linspace(lo, hi, points) if points > 1 else np.array([lo]))
    return np.array(list(itertools.product(*axes)), dtype=float)


def accepted_components(accepted: Sequence[bool]) -> List[Tuple[int, int]]:
    """Maximal runs of accepted indices as inclusive (start, end) pairs."""
    components = []
    start = None
    for i, ok in enumerate(accepted):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            components.append((start, i - 1))
            start = None
    if start is not None:
        components.append((start, len(accepted) - 1))
    return components


def _as_grid(grid, g: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None] if g == 1 else grid[None, :]
    if grid.ndim != 2 or grid.shape[1] != g or grid.shape[0] == 0:
        raise DimensionError(
            f"grid must be non-empty with {g} coordinates per point, got shape {grid.shape}"
        )
    return grid


def _scan_point(ctx: TestContext, pd_data: PartialledData, test_name, beta0, alpha):
    e = structural_residuals(pd_data, beta0)
    return run_test(ctx, test_name, e, alpha)


def _invert_with_context(
    ctx: TestContext,
    pd_data: PartialledData,
    test_name: TestName,
    grid: np.ndarray,
    alpha: float,
    n_jobs: int,
) -> ConfidenceSet:
    test_name = TestName(test_name)
    if not ctx.applicable(test_name):
        raise NotApplicableError(
            f"{test_name.value} is not applicable with n={ctx.kern.n}, "
            f"k={ctx.kern.k}, r={ctx.kern.r}"
        )

    if n_jobs == 1:
        results = [_scan_point(ctx, pd_data, test_name, b, alpha) for b in grid]
    else:
        if test_name in (TestName.CMS, TestName.MS):
            _ = ctx.P  # build once before the threads share it
        results = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(_scan_point)(ctx, pd_data, test_name, b, alpha) for b in grid
        )

    accepted = [not res.reject for res in results]
    conf = ConfidenceSet(
        test_name=test_name,
        alpha=alpha,
        grid=grid.tolist(),
        accepted=accepted,
        statistics=[res.statistic for res in results],
        critical_values=[res.critical_value for res in results],
        components=accepted_components(accepted),
        gamma_star=ctx.sel.gamma_star if test_name == TestName.RJAR else None,
    )
    logger.info(
        f"{test_name.value} confidence set: {sum(accepted)}/{len(accepted)} grid "
        f"points accepted in {len(conf.components)} components"
    )
    if conf.touches_boundary:
        logger.warning(
            f"{test_name.value} confidence set reaches the grid boundary; "
            f"it may extend beyond the supplied bounds"
        )
    return conf


def invert(
    pd_data: PartialledData,
    kern: RidgeKernel,
    sel: PenaltySelection,
    test_name: TestName,
    grid,
    alpha: float,
    options: Optional[TestOptions] = None,
    n_jobs: int = 1,
) -> ConfidenceSet:
    """
    Invert one test over a grid of null values.

    The kernel and gamma* do not depend on the null value, so they are
    computed once by the caller and shared by every grid point.

    Raises:
        NotApplicableError: if the test cannot be computed for this design
    """
    grid = _as_grid(grid, pd_data.g)
    ctx = prepare_context(kern, sel, pd_data.Z_t, options)
    return _invert_with_context(ctx, pd_data, test_name, grid, alpha, n_jobs)


def invert_many(
    pd_data: PartialledData,
    kern: RidgeKernel,
    sel: PenaltySelection,
    test_names: Sequence[TestName],
    grid,
    alpha: float,
    options: Optional[TestOptions] = None,
    n_jobs: int = 1,
) -> Dict[TestName, ConfidenceSet]:
    """Invert several tests over the same grid with one shared context."""
    grid = _as_grid(grid, pd_data.g)
    ctx = prepare_context(kern, sel, pd_data.Z_t, options)
    return {
        TestName(name): _invert_with_context(ctx, pd_data, name, grid, alpha, n_jobs)
        for name in test_names
    }
