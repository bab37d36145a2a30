"""
Tests for the Monte-Carlo harness: DGP pieces, calibration, determinism
and the long-running size, power and sweep experiments.
"""

import math
from unittest.mock import patch

import numpy as np
import pytest
from scipy import linalg

from rjar.errors import DegenerateSignalError, DomainError, ZeroRankError
from rjar.models import Design, SimConfig, TestName
from rjar.montecarlo import (
    assumption_sweep,
    build_sim_config,
    draw_replication,
    empirical_concentration,
    error_draw,
    instrument_draw,
    kappa_vector,
    make_plan,
    make_streams,
    rho_from_mu2,
    run_experiment,
    run_power_suite,
    toeplitz_cov,
)


def small_config(**overrides):
    fields = {"n": 40, "k": 10, "reps": 4, "seed": 3, "alpha_grid": [0.05, 0.1]}
    fields.update(overrides)
    return SimConfig(**fields)


class TestToeplitz:
    def test_two_by_two(self):
        np.testing.assert_allclose(toeplitz_cov(2, 0.3, 0.5), [[0.3, 0.15], [0.15, 0.3]])

    def test_uncorrelated(self):
        np.testing.assert_allclose(toeplitz_cov(4, 0.3, 0.0), 0.3 * np.eye(4))

    def test_large_k_is_positive_definite(self):
        chol = linalg.cholesky(toeplitz_cov(342, 0.3, 0.5), lower=True)
        assert np.all(np.diag(chol) > 0)

    def test_invalid_parameters(self):
        with pytest.raises(DomainError):
            toeplitz_cov(3, 0.3, 1.0)
        with pytest.raises(DomainError):
            toeplitz_cov(0, 0.3, 0.5)


class TestKappa:
    def test_sparse(self):
        kappa = kappa_vector(Design.SPARSE, 30)
        assert kappa[:5].tolist() == [1.0] * 5
        assert kappa[5:].sum() == 0.0

    def test_dense_rounds_down(self):
        assert kappa_vector(Design.DENSE, 30).sum() == 12
        assert kappa_vector(Design.DENSE, 12).sum() == 4
        cfg = SimConfig(k=12, design=Design.DENSE)
        assert cfg.kappa_ones == 4
        assert cfg.dense_rounded

    def test_sparse_needs_five_instruments(self):
        with pytest.raises(DomainError):
            kappa_vector(Design.SPARSE, 4)
        with pytest.raises(DomainError):
            build_sim_config(k=4, design="SPARSE")


class TestRhoFromMu2:
    def test_sparse_value(self):
        sigma = toeplitz_cov(30, 0.3, 0.5)
        kappa = kappa_vector(Design.SPARSE, 30)
        assert float(kappa @ sigma @ kappa) == pytest.approx(3.3375)
        rho = rho_from_mu2(30.0, kappa, sigma, 100, 1.0)
        assert rho == pytest.approx(math.sqrt(30 / 333.75), rel=1e-12)
        assert rho == pytest.approx(0.2998, abs=5e-4)

    def test_doubling_n_halves_rho_squared(self):
        sigma = toeplitz_cov(30, 0.3, 0.5)
        kappa = kappa_vector(Design.SPARSE, 30)
        rho_100 = rho_from_mu2(60.0, kappa, sigma, 100, 1.0)
        rho_200 = rho_from_mu2(60.0, kappa, sigma, 200, 1.0)
        assert rho_200**2 == pytest.approx(rho_100**2 / 2)

    def test_zero_signal(self):
        assert rho_from_mu2(0.0, np.ones(3), np.eye(3), 100, 1.0) == 0.0

    def test_degenerate_direction(self):
        with pytest.raises(DegenerateSignalError):
            rho_from_mu2(10.0, np.zeros(3), np.eye(3), 100, 1.0)


class TestDraws:
    def test_no_signal_leaves_first_stage_noise(self):
        cfg = small_config(mu2=0.0)
        y, X, Z = draw_replication(cfg, 0)
        _, v = error_draw(cfg, 0)
        np.testing.assert_array_equal(X[:, 0], v)
        assert X.shape == (40, 1)
        assert Z.shape == (40, 10)

    def test_streams_are_reproducible(self):
        a = make_streams(7, 3).instruments.standard_normal(5)
        b = make_streams(7, 3).instruments.standard_normal(5)
        c = make_streams(7, 4).instruments.standard_normal(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_instrument_and_error_streams_are_independent(self):
        cfg = small_config()
        Z_first = instrument_draw(cfg, 2)
        error_draw(cfg, 2)
        np.testing.assert_array_equal(instrument_draw(cfg, 2), Z_first)

    def test_fixed_instruments(self):
        cfg = small_config(redraw_instruments=False, mu2=10.0)
        plan = make_plan(cfg)
        _, _, Z1 = draw_replication(cfg, 1, plan)
        _, _, Z5 = draw_replication(cfg, 5, plan)
        np.testing.assert_array_equal(Z1, Z5)

    def test_error_correlation(self):
        cfg = SimConfig(n=1000, k=5)
        plan = make_plan(cfg)
        draws = [error_draw(cfg, i, plan) for i in range(200)]
        eps = np.concatenate([d[0] for d in draws])
        v = np.concatenate([d[1] for d in draws])
        assert np.corrcoef(eps, v)[0, 1] == pytest.approx(0.6, abs=0.01)
        assert np.var(eps) == pytest.approx(2.0, rel=0.02)

    def test_concentration_calibration(self):
        """Test the mean realised concentration matches mu2 within 5%"""
        cfg = SimConfig(n=100, k=30, mu2=30.0)
        values = empirical_concentration(cfg, 1000)
        assert values.mean() == pytest.approx(30.0, rel=0.05)


class TestExperiment:
    def test_single_replication(self):
        result = run_experiment(small_config(reps=1))
        assert result.beta0_grid == [1.0]
        assert {cell.test for cell in result.cells} == set(TestName)
        assert len(result.cells) == 4 * 1 * 2
        assert all(cell.reps == 1 for cell in result.cells)
        assert math.isfinite(result.gamma_summary.median)

    def test_deterministic_across_worker_counts(self):
        cfg = small_config(reps=6, mu2=20.0)
        grid = [0.0, 1.0, 2.0]
        serial = run_experiment(cfg, grid)
        parallel = run_experiment(cfg.model_copy(update={"n_jobs": 2}), grid)
        assert [c.rejections for c in serial.cells] == [c.rejections for c in parallel.cells]
        assert serial.gamma_summary == parallel.gamma_summary
        assert serial.ms_negative_variance == parallel.ms_negative_variance

    def test_repeated_runs_are_identical(self):
        cfg = small_config(reps=3)
        assert run_experiment(cfg).model_dump() == run_experiment(cfg).model_dump()

    def test_unregularised_tests_skipped_when_k_exceeds_n(self):
        result = run_experiment(small_config(n=30, k=40, reps=2))
        assert set(result.skipped) == {"CMS", "MS"}
        assert all(reason.startswith("NOT_APPLICABLE") for reason in result.skipped.values())
        assert {cell.test for cell in result.cells} == {TestName.RJAR, TestName.SUPSCORE}

    def test_traces(self):
        result = run_experiment(small_config(reps=2, keep_traces=True, tests=[TestName.RJAR]))
        assert len(result.traces["RJAR"]) == 2
        assert len(result.traces["RJAR"][0]) == 1

    def test_power_alpha_added_to_grid(self):
        cfg = small_config(alpha_grid=[0.1], power_alpha=0.05)
        assert cfg.alpha_grid == [0.05, 0.1]

    def test_rows(self):
        result = run_experiment(small_config(reps=2, tests=[TestName.SUPSCORE]), [0.5, 1.0])
        assert len(result.size_rows()) == 2
        assert {row["alpha"] for row in result.size_rows()} == {0.05, 0.1}
        assert [row["beta0"] for row in result.power_rows()] == [0.5, 1.0]
        assert result.frequency(TestName.SUPSCORE, 1.0, 0.05) is not None
        assert result.frequency(TestName.RJAR, 1.0, 0.05) is None

    def test_empty_grid(self):
        with pytest.raises(DomainError):
            run_experiment(small_config(), [])

    def test_data_preparation_failure_is_counted(self):
        """Test a failing replication is tallied as a non-rejection instead of aborting"""
        cfg = small_config(reps=3, tests=[TestName.RJAR, TestName.SUPSCORE])
        with patch("rjar.montecarlo.build_kernel", side_effect=ZeroRankError("zero")):
            result = run_experiment(cfg, [0.0, 1.0])
        assert result.error_counts == {"RJAR:ZERO_RANK": 6, "SUPSCORE:ZERO_RANK": 6}
        assert all(cell.rejections == 0 and cell.reps == 3 for cell in result.cells)
        assert math.isnan(result.gamma_summary.median)

    def test_power_suite(self):
        results = run_power_suite(small_config(reps=1, tests=[TestName.RJAR]), [0.0, 30.0])
        assert [r.config.mu2 for r in results] == [0.0, 30.0]


def test_sweep_rows():
    rows = assumption_sweep([20, 40], ratio=1.9, seed=1)
    assert [row.n for row in rows] == [20, 40]
    assert [row.k for row in rows] == [38, 76]
    assert all(row.r == row.n for row in rows)
    assert all(row.gamma_star >= 1.0 for row in rows)


def test_sweep_rejects_bad_ratio():
    with pytest.raises(DomainError):
        assumption_sweep([20], ratio=0.0)


@pytest.mark.slow
class TestPublishedExperiments:
    """Monte-Carlo checks of size, oversize, power and the penalty sweep."""

    @pytest.mark.parametrize("mu2", [0.0, 180.0])
    @pytest.mark.parametrize("k", [30, 90, 190])
    def test_rjar_size(self, k, mu2):
        cfg = SimConfig(
            n=100,
            k=k,
            mu2=mu2,
            reps=10000,
            seed=11,
            tests=[TestName.RJAR],
            alpha_grid=[round(0.01 * i, 2) for i in range(1, 21)],
            n_jobs=4,
        )
        result = run_experiment(cfg)
        assert 0.035 <= result.frequency(TestName.RJAR, 1.0, 0.05) <= 0.065
        for row in result.size_rows():
            assert abs(row["frequency"] - row["alpha"]) < 0.03

    def test_ms_oversize(self):
        cfg = SimConfig(n=100, k=90, mu2=0.0, reps=10000, seed=12, tests=[TestName.MS], n_jobs=4)
        frequency = run_experiment(cfg).frequency(TestName.MS, 1.0, 0.05)
        assert 0.16 <= frequency <= 0.22

    @pytest.mark.parametrize("k", [30, 90, 190])
    def test_supscore_is_conservative(self, k):
        cfg = SimConfig(
            n=100, k=k, mu2=0.0, reps=2000, seed=13, tests=[TestName.SUPSCORE], n_jobs=4
        )
        assert run_experiment(cfg).frequency(TestName.SUPSCORE, 1.0, 0.05) < 0.05

    def test_dense_power_ordering(self):
        cfg = SimConfig(
            n=100,
            k=190,
            design=Design.DENSE,
            mu2=180.0,
            reps=2000,
            seed=14,
            tests=[TestName.RJAR, TestName.SUPSCORE],
            n_jobs=4,
        )
        grid = [0.0, 0.25, 0.5, 0.75, 1.25, 1.5, 1.75, 2.0]
        result = run_experiment(cfg, grid)
        for beta0 in grid:
            rjar_power = result.frequency(TestName.RJAR, beta0, 0.05)
            sup_power = result.frequency(TestName.SUPSCORE, beta0, 0.05)
            if max(rjar_power, sup_power) > 0.2:
                assert rjar_power > sup_power

    def test_sweep(self):
        rows = assumption_sweep([250, 500, 1000, 2000], ratio=1.9, seed=15)
        ratios = [row.ratio for row in rows]
        assert (max(ratios) - min(ratios)) / np.median(ratios) < 0.15
        gammas = [row.gamma_star for row in rows]
        assert all(a < b for a, b in zip(gammas, gammas[1:]))
