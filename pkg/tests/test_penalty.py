"""
Tests for penalty selection and the penalty-assumption diagnostics.
"""

from unittest.mock import patch

import numpy as np
import pytest

from rjar.dataio import standardise_instruments
from rjar.errors import DiagonalProjectionError, DomainError, NotApplicableError
from rjar.models import SimConfig
from rjar.montecarlo import instrument_draw
from rjar.penalty import (
    assumption_diagnostics,
    balanced_design_bound,
    s_curve,
    search_grid,
    select_gamma,
)
from rjar.ridge_kernel import build_kernel, offdiag_sq_sum


def random_kernel(n, k, seed):
    Z = np.random.default_rng(seed).normal(size=(n, k))
    Z_std, _, _ = standardise_instruments(Z)
    return build_kernel(Z_std)


def design_kernel(k, seed):
    """One standardised draw of the Toeplitz simulation instruments with n = 100."""
    Z = instrument_draw(SimConfig(n=100, k=k, reps=1, seed=seed), 0)
    Z_std, _, _ = standardise_instruments(Z)
    return build_kernel(Z_std)


class TestTwoObservationExample:
    """S(gamma) = 2 / (2 + gamma)^2 is strictly decreasing."""

    def test_selects_lower_endpoint(self):
        kern = build_kernel(np.array([[1.0], [1.0]]))
        sel = select_gamma(kern, 1.0)
        assert sel.gamma_star == 0.0
        assert sel.lower_endpoint == 0.0
        assert sel.s_at_star == pytest.approx(0.5)
        assert sel.s_at_zero_or_floor == pytest.approx(0.5)
        assert sel.implied_c == pytest.approx(0.5)
        assert not sel.rank_deficient
        assert sel.evaluations == len(sel.search_trace)

    def test_diagnostics(self):
        kern = build_kernel(np.array([[1.0], [1.0]]))
        diag = assumption_diagnostics(kern, select_gamma(kern))
        assert diag.implied_c == pytest.approx(0.5)
        assert diag.max_diag == pytest.approx(0.5)
        assert not diag.questionable
        assert diag.balanced_delta == pytest.approx(0.5)


def test_search_grid_layout():
    kern = random_kernel(40, 10, 1)
    lower, grid = search_grid(kern, 1.0)
    assert lower == 0.0
    assert len(grid) == 201
    assert grid[0] == pytest.approx(max(1e-3, 1e-6 * kern.d[-1] ** 2))
    assert grid[-1] == pytest.approx(1e6 * kern.d[0] ** 2)


def test_rank_deficient_respects_floor():
    kern = random_kernel(30, 70, 2)
    sel = select_gamma(kern, 1.0)
    assert sel.rank_deficient
    assert sel.lower_endpoint == 1.0
    assert sel.gamma_star >= 1.0
    assert sel.s_at_zero_or_floor == pytest.approx(offdiag_sq_sum(kern, 1.0))
    assert all(g >= 1.0 for g, _ in sel.search_trace)


def test_invalid_floor():
    with pytest.raises(DomainError):
        select_gamma(random_kernel(20, 5, 3), 0.0)


def test_diagonal_projection_rejected():
    """Test a design whose projection is diagonal for every penalty"""
    kern = build_kernel(np.eye(8)[:, :3])
    with pytest.raises(DiagonalProjectionError):
        select_gamma(kern, 1.0)


@pytest.mark.parametrize("n,k,seed", [(60, 20, 4), (50, 45, 5), (40, 90, 6), (100, 190, 7)])
def test_argmax_dominance(n, k, seed):
    """Test no admissible penalty beats gamma* by more than 1e-9 relative"""
    kern = random_kernel(n, k, seed)
    sel = select_gamma(kern, 1.0)
    rng = np.random.default_rng(seed + 1000)
    low = np.log(max(sel.lower_endpoint, 1e-6))
    high = np.log(1e8 * kern.d[0] ** 2)
    gammas = np.exp(rng.uniform(low, high, size=1000))
    values = s_curve(kern, gammas)
    assert np.all(values <= sel.s_at_star + 1e-9 * sel.s_at_star)
    assert sel.s_at_star >= sel.s_at_zero_or_floor - 1e-10 * sel.s_at_star


def test_denser_grid_agrees():
    kern = random_kernel(60, 50, 8)
    sel = select_gamma(kern, 1.0)
    with patch("rjar.penalty.GRID_POINTS", 801):
        dense = select_gamma(kern, 1.0)
    assert dense.gamma_star >= sel.gamma_star * (1 - 1e-4)
    assert dense.s_at_star == pytest.approx(sel.s_at_star, rel=1e-9)


def check_balanced_design(seed):
    """(1/k) S(0) >= 1 - max P_ii and S(gamma*) >= S(0) for one r = k < n design."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 80))
    k = int(rng.integers(2, n // 2))
    kern = random_kernel(n, k, 100 + seed)
    delta, scaled_s0 = balanced_design_bound(kern)
    assert delta > 0
    assert scaled_s0 >= delta - 1e-9
    sel = select_gamma(kern, 1.0)
    assert sel.s_at_star >= offdiag_sq_sum(kern, 0.0) - 1e-10 * sel.s_at_star


@pytest.mark.parametrize("seed", range(10))
def test_balanced_design_bound(seed):
    check_balanced_design(seed)


@pytest.mark.slow
def test_balanced_design_bound_many_designs():
    for seed in range(1000, 1050):
        check_balanced_design(seed)


def test_balanced_design_bound_needs_full_rank():
    with pytest.raises(NotApplicableError):
        balanced_design_bound(random_kernel(20, 40, 9))


class TestDiagnostics:
    def test_rank_deficient_has_no_balance_delta(self):
        kern = random_kernel(30, 60, 10)
        sel = select_gamma(kern, 1.0)
        diag = assumption_diagnostics(kern, sel)
        assert diag.balanced_delta is None
        assert diag.r == 30
        assert diag.k == 60
        assert len(diag.ratio_series) == len(sel.search_trace)
        assert diag.implied_c == pytest.approx(sel.s_at_star / 30)

    def test_questionable_flag(self):
        kern = random_kernel(40, 10, 11)
        sel = select_gamma(kern, 1.0).model_copy(update={"implied_c": 0.001})
        assert assumption_diagnostics(kern, sel).questionable


@pytest.mark.slow
class TestSimulationDesignPenalty:
    """Median gamma* over instrument draws of the n = 100 Toeplitz design."""

    def test_k90(self):
        selections = [select_gamma(design_kernel(90, seed), 1.0) for seed in range(200)]
        median = np.median([sel.gamma_star for sel in selections])
        assert 0.75 * 12.048 <= median <= 1.25 * 12.048
        improved = np.mean([sel.s_at_star > sel.s_at_zero_or_floor for sel in selections])
        assert improved >= 0.95

    def test_k190(self):
        selections = [select_gamma(design_kernel(190, seed), 1.0) for seed in range(200)]
        median = np.median([sel.gamma_star for sel in selections])
        assert 0.75 * 109.187 <= median <= 1.25 * 109.187
