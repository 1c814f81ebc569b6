"""Tests for the oracle suites."""

import numpy as np
import pytest

from squat_kv import verify
from squat_kv.verify import (
    SuiteConfig,
    degeneracy_mismatch,
    measure_scaling,
    orthogonality_win_rate,
    run_suites,
)


def _small():
    return SuiteConfig(kkt_instances=20, downdate_instances=20, degeneracy_instances=10)


class TestSuiteConfig:
    def test_negative_lambda(self):
        with pytest.raises(ValueError, match="lambda must be >= 0"):
            SuiteConfig(lams=(1e-3, -1.0))

    def test_no_usable_block(self):
        with pytest.raises(ValueError, match="block"):
            SuiteConfig(dims=(8,), blocks=(8,))

    def test_no_fitting_rank(self):
        with pytest.raises(ValueError, match="rank"):
            SuiteConfig(dims=(4,), ranks=(8,), blocks=(2,))


class TestRunSuites:
    def test_small_suites_pass(self):
        report = run_suites(_small(), seed=0)
        assert [c.name for c in report.checks] == ["kkt", "downdate", "lambda-zero"]
        assert report.passed
        assert report.failing_seed is None
        for check in report.checks:
            assert check.max_residual <= check.tolerance

    def test_default_suites_pass(self):
        report = run_suites(SuiteConfig(), seed=0)
        assert report.passed
        assert [c.instances for c in report.checks] == [500, 200, 100]

    def test_failure_reports_seed(self, monkeypatch):
        monkeypatch.setattr(verify, "kkt_residual", lambda rng, config: 1.0)
        report = run_suites(_small(), seed=100)
        assert not report.passed
        assert report.failing_seed == 100

    def test_lambda_zero_is_bit_exact(self):
        for seed in range(5):
            rng = np.random.Generator(np.random.PCG64(seed))
            assert degeneracy_mismatch(rng, _small()) == 0.0


class TestStatistics:
    def test_win_rate(self):
        report = orthogonality_win_rate(trials=1000, seed=0)
        assert report.trials == 1000
        assert report.win_rate >= 0.95

    def test_zero_trials(self):
        assert orthogonality_win_rate(trials=0).win_rate == 0.0

    def test_scaling_needs_two_dims(self):
        with pytest.raises(ValueError, match="two dims"):
            measure_scaling(dims=(64,))

    @pytest.mark.slow
    def test_downdate_scales_at_most_cubic(self):
        report = measure_scaling()
        assert report.downdate_slope <= 3.3
        assert report.downdate_within_cubic
        assert report.downdate_slope < report.naive_slope
        assert report.naive_seconds[-1] > report.downdate_seconds[-1]
