"""Tests for CLI exit codes and error reporting."""

import pytest

from squat_kv import verify
from squat_kv.__main__ import main

SMALL_CACHE = ["--block", "4", "--group-size", "8", "--residual", "8", "--rank", "3"]


# -- Helpers --


def _run_error(monkeypatch, capsys, *argv):
    """Run main() expecting SystemExit, return (exit_code, stderr)."""
    monkeypatch.setattr("sys.argv", ["squat-kv", *argv])
    with pytest.raises(SystemExit) as exc_info:
        main()
    return exc_info.value.code, capsys.readouterr().err


@pytest.fixture
def trace_dir(tmp_path, monkeypatch, capsys):
    out = tmp_path / "trace"
    code, _ = _run_error(monkeypatch, capsys, "gen", "--tokens", "32", "--dim", "16", "--rank", "3",
                         "--out", str(out))
    assert code == 0
    return out


# -- Usage errors (exit 2) --


class TestUsageErrors:
    def test_no_subcommand(self, monkeypatch, capsys):
        code, _ = _run_error(monkeypatch, capsys)
        assert code == 2

    def test_residual_not_multiple_of_group(self, trace_dir, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "quantize", str(trace_dir), "--block", "4",
                                  "--group-size", "8", "--residual", "12", "--rank", "3")
        assert code == 2
        assert "must be divisible by group_size" in stderr

    def test_block_does_not_divide_dim(self, trace_dir, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "replay", str(trace_dir), "--block", "5",
                                  "--group-size", "8", "--residual", "8", "--rank", "3")
        assert code == 2
        assert "must divide the head dimension" in stderr

    def test_pre_rope_without_rope(self, trace_dir, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "replay", str(trace_dir), *SMALL_CACHE,
                                  "--mode", "pre-rope")
        assert code == 2
        assert "--rope" in stderr

    def test_replay_has_no_seed(self, trace_dir, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "replay", str(trace_dir), *SMALL_CACHE, "--seed", "3")
        assert code == 2
        assert "unrecognized arguments: --seed" in stderr

    def test_negative_lambda_in_verify(self, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "verify", "--lambdas", "-0.1")
        assert code == 2
        assert "lambda must be >= 0" in stderr

    def test_negative_lambda_in_sweep(self, trace_dir, monkeypatch, capsys):
        code, _ = _run_error(monkeypatch, capsys, "sweep", str(trace_dir), *SMALL_CACHE, "--lambdas", "-1")
        assert code == 2

    def test_sweep_rank_too_large(self, trace_dir, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "sweep", str(trace_dir), *SMALL_CACHE, "--ranks", "17")
        assert code == 2
        assert "ranks must lie in" in stderr

    def test_negative_estimate(self, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "estimate", "--len", "-5")
        assert code == 2
        assert "seq_len must be >= 0" in stderr

    def test_gen_rank_above_dim(self, tmp_path, monkeypatch, capsys):
        code, _ = _run_error(monkeypatch, capsys, "gen", "--tokens", "4", "--dim", "4", "--rank", "5",
                             "--out", str(tmp_path / "t"))
        assert code == 2
        assert not (tmp_path / "t").exists()

    def test_curve_rank_out_of_range(self, trace_dir, monkeypatch, capsys):
        code, _ = _run_error(monkeypatch, capsys, "curve", str(trace_dir), "--ranks", "0")
        assert code == 2


# -- Runtime failures (exit 1) --


class TestRuntimeErrors:
    def test_missing_trace(self, tmp_path, monkeypatch, capsys):
        code, stderr = _run_error(monkeypatch, capsys, "replay", str(tmp_path / "nope"), *SMALL_CACHE)
        assert code == 1
        assert "Cannot read trace at" in stderr

    def test_truncated_blob(self, trace_dir, monkeypatch, capsys):
        blob = trace_dir / "k_layer0.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        code, stderr = _run_error(monkeypatch, capsys, "quantize", str(trace_dir), *SMALL_CACHE)
        assert code == 1
        assert "k_layer0.bin: truncated blob" in stderr

    def test_stored_cache_mismatch(self, trace_dir, tmp_path, monkeypatch, capsys):
        other = tmp_path / "other"
        _run_error(monkeypatch, capsys, "gen", "--tokens", "40", "--dim", "16", "--rank", "3",
                   "--out", str(other))
        _run_error(monkeypatch, capsys, "quantize", str(other), *SMALL_CACHE, "--out", str(tmp_path / "c"))
        code, stderr = _run_error(monkeypatch, capsys, "replay", str(trace_dir), *SMALL_CACHE,
                                  "--cache", str(tmp_path / "c"))
        assert code == 1
        assert "Error:" in stderr and "does not match trace" in stderr

    def test_stored_cache_rope_mismatch(self, trace_dir, tmp_path, monkeypatch, capsys):
        _run_error(monkeypatch, capsys, "quantize", str(trace_dir), *SMALL_CACHE, "--rope",
                   "--mode", "pre-rope", "--out", str(tmp_path / "c"))
        code, stderr = _run_error(monkeypatch, capsys, "replay", str(trace_dir), *SMALL_CACHE,
                                  "--cache", str(tmp_path / "c"))
        assert code == 1
        assert "cache was built with use_rope=True" in stderr

    def test_verification_failure(self, monkeypatch, capsys):
        monkeypatch.setattr(verify, "kkt_residual", lambda rng, config: 1.0)
        code, stderr = _run_error(monkeypatch, capsys, "verify", "--instances", "3", "--seed", "9")
        assert code == 1
        assert "reproduce with seed 9" in stderr

    def test_unexpected_exception(self, trace_dir, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise RuntimeError("solver exploded")

        monkeypatch.setattr("squat_kv.__main__.run_quantize", boom)
        code, stderr = _run_error(monkeypatch, capsys, "quantize", str(trace_dir), *SMALL_CACHE)
        assert code == 1
        assert "Unexpected error: RuntimeError: solver exploded" in stderr
