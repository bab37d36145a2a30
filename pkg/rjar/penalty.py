"""
Penalty selection: gamma* is the largest maximiser of
S(gamma) = sum_{i != j} (P^gamma_ij)^2 over the admissible set, which is
[0, inf) for a full-column-rank instrument matrix and [gamma_floor, inf)
otherwise.
"""

import logging
import math
from typing import Callable, Iterable, List, Tuple

import numpy as np

from .errors import DiagonalProjectionError, DomainError, NotApplicableError
from .models import Diagnostics, PenaltySelection
from .ridge_kernel import RidgeKernel, kernel_summary, offdiag_sq_sum, ridge_diag

logger = logging.getLogger(__name__)

GRID_POINTS = 201
REFINE_REL_WIDTH = 1e-8
TIE_REL_TOL = 1e-10
DEGENERATE_REL = 1e-14
QUESTIONABLE_C = 0.01
INV_PHI = (math.sqrt(5) - 1) / 2


def s_curve(kern: RidgeKernel, gammas: Iterable[float]) -> np.ndarray:
    """S(gamma) at each penalty in gammas."""
    return np.array([offdiag_sq_sum(kern, g) for g in gammas])


def search_grid(kern: RidgeKernel, gamma_floor: float) -> Tuple[float, np.ndarray]:
    """Lower endpoint and the log-spaced admissible grid above it."""
    lower = 0.0 if kern.full_column_rank else gamma_floor
    d_min2 = float(kern.d[-1] ** 2)
    d_max2 = float(kern.d[0] ** 2)
    start = max(gamma_floor * 1e-3, 1e-6 * d_min2)
    stop = max(1e6 * d_max2, start * 10)
    grid = np.geomspace(start, stop, GRID_POINTS)
    grid = grid[grid > lower]
    return lower, grid


def _golden_section_max(
    f: Callable[[float], float], a: float, b: float, log_scale: bool
) -> List[Tuple[float, float]]:
    """
    Golden-section search for a maximum of f on [a, b].

    Works on log(gamma) when log_scale is set. Returns every evaluated
    (gamma, f(gamma)) pair so ties can be resolved afterwards.
    """
    to_gamma = math.exp if log_scale else (lambda t: t)
    lo, hi = (math.log(a), math.log(b)) if log_scale else (a, b)
    evaluated = []

    def value(t):
        g = to_gamma(t)
        s = f(g)
        evaluated.append((g, s))
        return s

    c = hi - INV_PHI * (hi - lo)
    d = lo + INV_PHI * (hi - lo)
    fc, fd = value(c), value(d)
    for _ in range(200):
        width = abs(to_gamma(hi) - to_gamma(lo))
        scale = max(abs(to_gamma(hi)), abs(to_gamma(lo)), np.finfo(float).tiny)
        if width <= REFINE_REL_WIDTH * scale:
            break
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - INV_PHI * (hi - lo)
            fc = value(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + INV_PHI * (hi - lo)
            fd = value(d)
    return evaluated


def select_gamma(kern: RidgeKernel, gamma_floor: float = 1.0) -> PenaltySelection:
    """
    Choose gamma* by grid search, golden-section refinement and a
    largest-maximiser tie rule.

    Args:
        kern: kernel of the standardised instruments
        gamma_floor: lower bound of the admissible set when r < k

    Returns:
        PenaltySelection with the grid pass recorded in search_trace

    Raises:
        DomainError: if gamma_floor is not positive
        DiagonalProjectionError: if S vanishes on the whole admissible grid
    """
    if not gamma_floor > 0:
        raise DomainError(f"gamma_floor must be positive, got {gamma_floor}")

    lower, grid = search_grid(kern, gamma_floor)
    points = np.concatenate([[lower], grid])
    values = s_curve(kern, points)
    trace = [(float(g), float(s)) for g, s in zip(points, values)]

    if values.max() < DEGENERATE_REL * kern.r:
        raise DiagonalProjectionError(
            "S(gamma) vanishes on the admissible set: the ridge projection is "
            "diagonal for every admissible penalty"
        )

    evaluated = list(trace)
    best = int(np.argmax(values))
    if best > 0:
        a = points[best - 1]
        b = points[min(best + 1, len(points) - 1)]
        evaluated += _golden_section_max(
            lambda g: offdiag_sq_sum(kern, g), a, b, log_scale=a > 0
        )

    s_max = max(s for _, s in evaluated)
    ties = [g for g, s in evaluated if s >= s_max - TIE_REL_TOL * abs(s_max)]
    gamma_star = max(ties)
    s_at_star = offdiag_sq_sum(kern, gamma_star)

    selection = PenaltySelection(
        gamma_star=gamma_star,
        s_at_star=s_at_star,
        s_at_zero_or_floor=float(values[0]),
        implied_c=s_at_star / kern.r,
        search_trace=trace,
        tie_set_width=max(ties) - min(ties),
        lower_endpoint=lower,
        gamma_floor=gamma_floor,
        rank_deficient=not kern.full_column_rank,
        evaluations=len(evaluated),
    )
    logger.info(
        f"Selected gamma*={gamma_star:.6g} with S={s_at_star:.6g} "
        f"(S at lower endpoint {values[0]:.6g}, r={kern.r})"
    )
    return selection


def balanced_design_bound(kern: RidgeKernel) -> Tuple[float, float]:
    """
    delta = 1 - max_i P_ii and (1/k) S(0) for the unregularised projection.

    A balanced design (delta > 0) bounds (1/k) S(0) below by delta.
    """
    if not kern.full_column_rank:
        raise NotApplicableError(
            f"balanced-design bound needs r = k, got r={kern.r}, k={kern.k}"
        )
    delta = 1.0 - float(ridge_diag(kern, 0.0).max())
    return delta, offdiag_sq_sum(kern, 0.0) / kern.k


def assumption_diagnostics(kern: RidgeKernel, sel: PenaltySelection) -> Diagnostics:
    """Implied constant, leverage and search metadata for a selection."""
    max_diag = float(ridge_diag(kern, sel.gamma_star).max())
    questionable = sel.implied_c < QUESTIONABLE_C
    if questionable:
        logger.warning(
            f"Implied constant {sel.implied_c:.4g} is below {QUESTIONABLE_C}; "
            f"the high-level penalty assumption may be questionable"
        )

    delta = None
    if kern.full_column_rank and kern.r < kern.n:
        delta, _ = balanced_design_bound(kern)

    summary = kernel_summary(kern)
    return Diagnostics(
        n=kern.n,
        k=kern.k,
        r=kern.r,
        gamma_star=sel.gamma_star,
        s_at_star=sel.s_at_star,
        implied_c=sel.implied_c,
        max_diag=max_diag,
        questionable=questionable,
        lower_endpoint=sel.lower_endpoint,
        rank_deficient=sel.rank_deficient,
        tie_set_width=sel.tie_set_width,
        d_max=summary["d_max"],
        d_min=summary["d_min"],
        rank_tol=summary["rank_tol"],
        balanced_delta=delta,
        ratio_series=[(g, s / kern.r) for g, s in sel.search_trace],
    )
