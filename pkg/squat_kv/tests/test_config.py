"""Tests for CacheConfig and RunConfig."""

import argparse
from pathlib import Path

import pytest

from squat_kv.config import CacheConfig, RunConfig
from squat_kv.models import ReportFormat, RopeMode


class TestCacheConfig:
    def test_defaults(self):
        config = CacheConfig()
        assert (config.bits, config.group_size, config.residual_len) == (2, 32, 32)
        assert (config.block, config.lam, config.rank) == (64, 0.001, 5)
        assert config.mode == RopeMode.POST_ROPE
        assert config.groups_per_flush == 1

    def test_residual_not_multiple_of_group(self):
        with pytest.raises(ValueError, match=r"residual_len \(R=40\) must be divisible by group_size \(G=32\)"):
            CacheConfig(residual_len=40)

    @pytest.mark.parametrize(
        "kwargs, message",
        [
            ({"bits": 0}, "bits"),
            ({"bits": 9}, "bits"),
            ({"group_size": 0}, "group_size"),
            ({"block": 0}, "block"),
            ({"lam": -0.1}, "lambda"),
            ({"lam": float("nan")}, "lambda"),
            ({"rank": 0}, "rank"),
            ({"workers": 0}, "workers"),
        ],
    )
    def test_invalid_values(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            CacheConfig(**kwargs)

    def test_mode_from_string(self):
        assert CacheConfig(mode="pre-rope").mode == RopeMode.PRE_ROPE

    def test_check_dim(self):
        config = CacheConfig(block=16, rank=5)
        config.check_dim(64)
        with pytest.raises(ValueError, match="block"):
            config.check_dim(40)
        with pytest.raises(ValueError, match="rank"):
            CacheConfig(block=1, group_size=1, residual_len=1, rank=5).check_dim(4)

    def test_pre_rope_needs_even_dim(self):
        config = CacheConfig(block=1, group_size=1, residual_len=1, rank=1, mode="pre-rope")
        with pytest.raises(ValueError, match="even"):
            config.check_dim(3)

    def test_baseline_only_changes_lambda(self):
        config = CacheConfig(bits=3, lam=0.5)
        base = config.baseline()
        assert base.lam == 0.0
        assert base.bits == 3

    def test_dict_round_trip(self):
        config = CacheConfig(mode="pre-rope", lam=0.01, workers=2)
        data = config.to_dict()
        assert data["mode"] == "pre-rope"
        assert CacheConfig.from_dict({**data, "unknown": 1}) == config


def _args(**overrides):
    base = dict(
        bits=2, group_size=32, residual=32, block=64, lam=0.001, rank=5,
        mode="post-rope", rope=False, baseline=False,
        workers=1, trace=None, out=None, format="json",
    )
    return argparse.Namespace(**{**base, **overrides})


class TestRunConfig:
    def test_from_args(self):
        config = RunConfig.from_args(_args(trace="t", out="o", format="csv", block=16))
        assert config.trace_path == Path("t")
        assert config.out == Path("o")
        assert config.format == ReportFormat.CSV
        assert config.cache.block == 16

    def test_baseline_flag_zeroes_lambda(self):
        assert RunConfig.from_args(_args(baseline=True)).cache.lam == 0.0

    def test_solver_state_shared_by_default(self):
        assert RunConfig.from_args(_args()).cache.share_solver_state is True

    def test_pre_rope_without_rope(self):
        with pytest.raises(ValueError, match="rope"):
            RunConfig.from_args(_args(mode="pre-rope"))

    def test_pre_rope_with_rope(self):
        config = RunConfig.from_args(_args(mode="pre-rope", rope=True))
        assert config.use_rope
        assert config.cache.mode == RopeMode.PRE_ROPE
