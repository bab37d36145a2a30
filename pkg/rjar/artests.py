"""
Test statistics and decisions: the ridge-regularised jackknifed AR test,
the two unregularised jackknifed AR tests and the Sup Score test.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import (
    BalancedDesignError,
    DegenerateColumnError,
    DegenerateVarianceError,
    DimensionError,
    DomainError,
    NotApplicableError,
)
from .models import (
    PenaltySelection,
    SupScoreScaling,
    TestFlag,
    TestName,
    TestOptions,
    TestResult,
)
from .penalty import QUESTIONABLE_C
from .ridge_kernel import (
    RidgeKernel,
    hadamard_sq_quad,
    materialize,
    quad_form_offdiag,
)

logger = logging.getLogger(__name__)

BALANCE_MARGIN = 1e-10
STANDARDISATION_TOL = 1e-6


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def normal_critical_value(alpha: float) -> float:
    """Upper-tail standard normal quantile Q(1 - alpha)."""
    return float(norm.isf(_check_alpha(alpha)))


def supscore_critical_value(
    alpha: float,
    n: int,
    k: int,
    c_bcch: float = 1.1,
    scaling: SupScoreScaling = SupScoreScaling.SCALE_CONSISTENT,
) -> float:
    """c * Q(1 - alpha / (2k)), times sqrt(n) under AS_WRITTEN."""
    alpha = _check_alpha(alpha)
    if not c_bcch > 1:
        raise DomainError(f"c_bcch must exceed 1, got {c_bcch}")
    value = c_bcch * float(norm.isf(alpha / (2 * k)))
    if SupScoreScaling(scaling) == SupScoreScaling.AS_WRITTEN:
        value *= math.sqrt(n)
    return value


def critical_value(
    test_name: TestName,
    alpha: float,
    n: int,
    k: int,
    options: Optional[TestOptions] = None,
) -> float:
    """Critical value of a test, independent of the data beyond (n, k)."""
    options = options or TestOptions()
    if TestName(test_name) == TestName.SUPSCORE:
        return supscore_critical_value(
            alpha, n, k, options.c_bcch, options.supscore_scaling
        )
    return normal_critical_value(alpha)


def _check_residuals(e, n: int) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.ndim != 1 or e.shape[0] != n:
        raise DimensionError(f"expected residuals of length {n}, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise DomainError("residuals contain non-finite entries")
    return e


def rjar(
    kern: RidgeKernel,
    sel: PenaltySelection,
    e,
    alpha: float,
    gamma: Optional[float] = None,
) -> TestResult:
    """
    Ridge-regularised jackknifed AR test.

    Args:
        kern: kernel of the standardised instruments
        sel: penalty selection for kern
        e: structural residuals under the null
        alpha: significance level
        gamma: penalty to use instead of sel.gamma_star

    Raises:
        DegenerateVarianceError: if the variance estimate is not positive
    """
    alpha = _check_alpha(alpha)
    e = _check_residuals(e, kern.n)
    gamma = sel.gamma_star if gamma is None else float(gamma)
    if not kern.full_column_rank and gamma < sel.gamma_floor:
        raise DomainError(
            f"penalty {gamma} is below the floor {sel.gamma_floor} for a rank-deficient design"
        )

    numerator = quad_form_offdiag(kern, gamma, e)
    phi = 2.0 / kern.r * hadamard_sq_quad(kern, gamma, e)
    if not phi > 0:
        raise DegenerateVarianceError(
            f"RJAR variance estimate is {phi:.3g}; residuals have at most one "
            f"non-zero entry or the projection is diagonal"
        )

    statistic = numerator / (math.sqrt(kern.r) * math.sqrt(phi))
    cv = normal_critical_value(alpha)
    flags = []
    if sel.implied_c < QUESTIONABLE_C:
        flags.append(TestFlag.ASSUMPTION3_QUESTIONABLE)

    return TestResult(
        test_name=TestName.RJAR,
        statistic=statistic,
        critical_value=cv,
        alpha=alpha,
        reject=statistic > cv,
        variance_estimate=phi,
        gamma_used=gamma,
        flags=flags,
    )


def rjar_population_variance(kern: RidgeKernel, gamma: float, sigma2) -> float:
    """(2/r) sum_{i != j} (P^gamma_ij)^2 sigma_i^2 sigma_j^2 for known variances."""
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (kern.n,))
    if np.any(sigma2 < 0):
        raise DomainError("error variances must be non-negative")
    return 2.0 / kern.r * hadamard_sq_quad(kern, gamma, np.sqrt(sigma2))


def _projection_rank(P: np.ndarray, k: Optional[int]) -> int:
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionError(f"projection must be square, got shape {P.shape}")
    return int(round(np.trace(P))) if k is None else int(k)


def _leverage(P: np.ndarray) -> np.ndarray:
    D = np.diag(P).copy()
    if D.max() >= 1 - BALANCE_MARGIN:
        raise BalancedDesignError(
            f"max leverage {D.max():.12f} is too close to 1 for the "
            f"jackknife corrections"
        )
    return D


def cms_ar(P, e, alpha: float, k: Optional[int] = None) -> TestResult:
    """
    Unregularised jackknifed AR test with the C = A - B weighting.

    Args:
        P: unregularised projection matrix
        e: structural residuals under the null
        alpha: significance level
        k: number of instruments; defaults to trace(P)

    Raises:
        BalancedDesignError: if max_i P_ii is within 1e-10 of one
        DegenerateVarianceError: if the variance estimate is not positive
    """
    alpha = _check_alpha(alpha)
    P = np.asarray(P, dtype=float)
    k = _projection_rank(P, k)
    e = _check_residuals(e, P.shape[0])
    D = _leverage(P)

    n = P.shape[0]
    ratio = D / (1.0 - D)
    M = np.eye(n) - P
    PR = P * ratio
    delta = PR @ P - 0.5 * PR - 0.5 * ratio[:, None] * P
    B = (M * ratio) @ M
    C = P + delta - B
    C = 0.5 * (C + C.T)

    numerator = float(e @ C @ e - np.sum(np.diag(C) * e**2))
    C2 = C**2
    np.fill_diagonal(C2, 0.0)
    a = e**2
    phi = 2.0 / k * float(a @ C2 @ a)
    if not phi > 0:
        raise DegenerateVarianceError(f"CMS variance estimate is {phi:.3g}")

    statistic = numerator / (math.sqrt(k) * math.sqrt(phi))
    cv = normal_critical_value(alpha)
    return TestResult(
        test_name=TestName.CMS,
        statistic=statistic,
        critical_value=cv,
        alpha=alpha,
        reject=statistic > cv,
        variance_estimate=phi,
        gamma_used=0.0,
    )


def ms_ar(P, e, alpha: float, k: Optional[int] = None) -> TestResult:
    """
    Unregularised jackknifed AR test with the residual-based variance.

    A non-positive variance estimate is reported as a non-rejection with
    the NEGATIVE_VARIANCE_NO_REJECT flag.

    Raises:
        BalancedDesignError: if a needed denominator M_ii M_jj + M_ij^2 is zero
    """
    alpha = _check_alpha(alpha)
    P = np.asarray(P, dtype=float)
    k = _projection_rank(P, k)
    e = _check_residuals(e, P.shape[0])

    n = P.shape[0]
    M = np.eye(n) - P
    Mdiag = np.diag(M)
    denom = np.outer(Mdiag, Mdiag) + M**2
    offdiag = ~np.eye(n, dtype=bool)
    needed = offdiag & (P != 0)
    if np.any(denom[needed] <= 0):
        raise BalancedDesignError("M_ii M_jj + M_ij^2 vanishes for a needed pair")

    weights = np.zeros_like(P)
    weights[needed] = P[needed] ** 2 / denom[needed]
    s = e * (M @ e)
    numerator = float(e @ P @ e - np.sum(np.diag(P) * e**2))
    phi = 2.0 / k * float(s @ weights @ s)
    cv = normal_critical_value(alpha)

    if not phi > 0:
        logger.debug(f"MS variance estimate {phi:.3g} is not positive, not rejecting")
        return TestResult(
            test_name=TestName.MS,
            statistic=None,
            critical_value=cv,
            alpha=alpha,
            reject=False,
            variance_estimate=phi,
            gamma_used=0.0,
            flags=[TestFlag.NEGATIVE_VARIANCE_NO_REJECT],
        )

    statistic = numerator / (math.sqrt(k) * math.sqrt(phi))
    return TestResult(
        test_name=TestName.MS,
        statistic=statistic,
        critical_value=cv,
        alpha=alpha,
        reject=statistic > cv,
        variance_estimate=phi,
        gamma_used=0.0,
    )


def sup_score(
    Z_std,
    e,
    alpha: float,
    c_bcch: float = 1.1,
    scaling_mode: SupScoreScaling = SupScoreScaling.SCALE_CONSISTENT,
) -> TestResult:
    """
    Sup Score test: the largest self-normalised instrument score.

    Raises:
        DomainError: if the instruments are not standardised
        DegenerateColumnError: if sum_i e_i^2 Z_ij^2 is zero for some j
    """
    alpha = _check_alpha(alpha)
    Z_std = np.asarray(Z_std, dtype=float)
    n, k = Z_std.shape
    e = _check_residuals(e, n)

    mean_sq = np.mean(Z_std**2, axis=0)
    if np.any(np.abs(mean_sq - 1.0) > STANDARDISATION_TOL):
        raise DomainError("Sup Score needs instruments with unit mean square")

    scores = np.abs(e @ Z_std) / math.sqrt(n)
    scale = np.sqrt(np.mean((e**2)[:, None] * Z_std**2, axis=0))
    if np.any(scale == 0):
        raise DegenerateColumnError(
            f"zero score variance for instrument columns {np.flatnonzero(scale == 0).tolist()}"
        )

    statistic = float(np.max(scores / scale))
    cv = supscore_critical_value(alpha, n, k, c_bcch, scaling_mode)
    return TestResult(
        test_name=TestName.SUPSCORE,
        statistic=statistic,
        critical_value=cv,
        alpha=alpha,
        reject=statistic > cv,
        sidedness="max-abs",
    )


def unregularised_projection(kern: RidgeKernel) -> np.ndarray:
    """
    P = Z (Z'Z)^-1 Z' for the jackknifed AR tests without regularisation.

    Raises:
        NotApplicableError: unless r = k < n
    """
    if not kern.full_column_rank or kern.k >= kern.n:
        raise NotApplicableError(
            f"unregularised jackknifed AR tests need r = k < n, "
            f"got n={kern.n}, k={kern.k}, r={kern.r}"
        )
    return materialize(kern, 0.0, force=True)


@dataclass
class TestContext:
    """Everything that does not depend on the null value."""

    __test__ = False

    kern: RidgeKernel
    sel: Optional[PenaltySelection]
    Z_std: np.ndarray
    options: TestOptions = field(default_factory=TestOptions)
    _P: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def P(self) -> np.ndarray:
        if self._P is None:
            self._P = unregularised_projection(self.kern)
        return self._P

    def applicable(self, test_name: TestName) -> bool:
        if TestName(test_name) in (TestName.CMS, TestName.MS):
            return self.kern.full_column_rank and self.kern.k < self.kern.n
        return True


def prepare_context(
    kern: RidgeKernel,
    sel: Optional[PenaltySelection],
    Z_std,
    options: Optional[TestOptions] = None,
) -> TestContext:
    return TestContext(
        kern=kern, sel=sel, Z_std=np.asarray(Z_std), options=options or TestOptions()
    )


def run_test(ctx: TestContext, test_name: TestName, e, alpha: float) -> TestResult:
    """Dispatch one named test against residuals e."""
    test_name = TestName(test_name)
    if test_name == TestName.RJAR:
        return rjar(ctx.kern, ctx.sel, e, alpha, gamma=ctx.options.gamma)
    if test_name == TestName.CMS:
        return cms_ar(ctx.P, e, alpha, k=ctx.kern.k)
    if test_name == TestName.MS:
        return ms_ar(ctx.P, e, alpha, k=ctx.kern.k)
    return sup_score(
        ctx.Z_std, e, alpha, ctx.options.c_bcch, ctx.options.supscore_scaling
    )
