"""Tests for the manifest and report models."""

import pytest
from pydantic import ValidationError

from squat_kv.models import (
    CheckResult,
    SyntheticSpec,
    TraceManifest,
    VerifyReport,
)


class TestTraceManifest:
    def test_shapes(self):
        m = TraceManifest(layers=2, kv_heads=2, query_heads=8, head_dim=64, tokens=10, prompt_len=5)
        assert m.queries_per_kv_head == 4
        assert m.blob_shape("q") == (10, 8, 64)
        assert m.blob_shape("k") == (10, 2, 64)

    def test_query_heads_multiple(self):
        with pytest.raises(ValidationError, match="multiple"):
            TraceManifest(layers=1, kv_heads=2, query_heads=3, head_dim=8, tokens=4, prompt_len=2)

    def test_prompt_longer_than_trace(self):
        with pytest.raises(ValidationError, match="exceeds"):
            TraceManifest(layers=1, kv_heads=1, query_heads=1, head_dim=8, tokens=4, prompt_len=5)

    def test_json_round_trip(self):
        m = TraceManifest(layers=1, kv_heads=1, query_heads=1, head_dim=8, tokens=0, prompt_len=0)
        data = m.model_dump()
        assert data["dtype"] == "f32" and data["endianness"] == "little"
        assert TraceManifest.model_validate_json(m.model_dump_json()) == m


class TestSyntheticSpec:
    def test_rank_above_dim(self):
        with pytest.raises(ValidationError, match="true_rank"):
            SyntheticSpec(true_rank=9, noise_level=0.1, seed=0, tokens=4, dim=8)

    def test_noise_bounds(self):
        with pytest.raises(ValidationError):
            SyntheticSpec(true_rank=1, noise_level=1.0, seed=0, tokens=4, dim=8)


class TestVerifyReport:
    def _check(self, name, passed, seed=None):
        return CheckResult(name=name, instances=1, max_residual=0.0, tolerance=1e-8,
                           passed=passed, failing_seed=seed)

    def test_passed_when_all_checks_pass(self):
        report = VerifyReport(seed=0, checks=[self._check("kkt", True), self._check("downdate", True)])
        assert report.passed
        assert report.failing_seed is None
        assert report.model_dump()["passed"] is True

    def test_first_failing_seed(self):
        report = VerifyReport(seed=0, checks=[self._check("kkt", True), self._check("downdate", False, 42)])
        assert not report.passed
        assert report.failing_seed == 42
