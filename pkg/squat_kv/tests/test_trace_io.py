"""Tests for trace, subspace and cache files."""

import json

import numpy as np
import pytest
import scipy.linalg

from squat_kv.cache import append_decode, prefill
from squat_kv.config import CacheConfig
from squat_kv.models import SyntheticSpec
from squat_kv.subspace import build_subspace
from squat_kv.trace_io import (
    CACHE_BLOBS,
    TraceFormatError,
    gen_synthetic,
    low_rank_queries,
    read_cache,
    read_subspace,
    read_trace,
    write_cache,
    write_subspace,
    write_trace,
)


def _spec(**kwargs):
    base = dict(true_rank=3, noise_level=0.05, seed=1, tokens=24, dim=16)
    return SyntheticSpec(**{**base, **kwargs})


class TestTraceFiles:
    def test_round_trip(self, tmp_path):
        trace = gen_synthetic(_spec(layers=2, kv_heads=2, query_heads=4))
        write_trace(trace, tmp_path)
        back = read_trace(tmp_path)
        assert back.manifest == trace.manifest
        assert np.array_equal(back.queries, trace.queries)
        assert np.array_equal(back.keys, trace.keys)
        assert np.array_equal(back.values, trace.values)

    def test_blob_layout(self, tmp_path):
        trace = gen_synthetic(_spec(kv_heads=1, query_heads=2))
        write_trace(trace, tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "k_layer0.bin", "manifest.json", "q_layer0.bin", "v_layer0.bin",
        ]
        assert (tmp_path / "q_layer0.bin").stat().st_size == 24 * 2 * 16 * 4
        raw = np.frombuffer((tmp_path / "k_layer0.bin").read_bytes(), dtype="<f4")
        assert raw[16] == trace.keys[0, 1, 0, 0]

    def test_empty_trace(self, tmp_path):
        trace = gen_synthetic(_spec(tokens=0))
        write_trace(trace, tmp_path)
        back = read_trace(tmp_path)
        assert back.keys.shape == (1, 0, 1, 16)
        assert back.manifest.prompt_len == 0

    def test_manifest_disagrees_with_blob(self, tmp_path):
        write_trace(gen_synthetic(_spec()), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["tokens"] = 30
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(TraceFormatError, match=r"q_layer0\.bin: truncated blob, expected 1920 bytes, got 1536"):
            read_trace(tmp_path)

    def test_oversized_blob(self, tmp_path):
        write_trace(gen_synthetic(_spec()), tmp_path)
        with open(tmp_path / "v_layer0.bin", "ab") as f:
            f.write(b"\x00")
        with pytest.raises(TraceFormatError, match=r"v_layer0\.bin: oversized"):
            read_trace(tmp_path)

    def test_missing_blob(self, tmp_path):
        write_trace(gen_synthetic(_spec()), tmp_path)
        (tmp_path / "k_layer0.bin").unlink()
        with pytest.raises(TraceFormatError, match="missing"):
            read_trace(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(TraceFormatError, match="manifest"):
            read_trace(tmp_path)


class TestSynthetic:
    def test_deterministic(self):
        a, b = gen_synthetic(_spec()), gen_synthetic(_spec())
        assert np.array_equal(a.queries, b.queries)
        assert np.array_equal(a.keys, b.keys)

    def test_seed_changes_output(self):
        assert not np.array_equal(gen_synthetic(_spec()).keys, gen_synthetic(_spec(seed=2)).keys)

    def test_default_prompt_is_half(self):
        assert gen_synthetic(_spec()).manifest.prompt_len == 12
        assert gen_synthetic(_spec(prompt_len=5)).manifest.prompt_len == 5

    def test_keys_unit_rms(self):
        trace = gen_synthetic(_spec(tokens=200))
        assert np.sqrt(np.mean(trace.keys.astype(np.float64) ** 2)) == pytest.approx(1.0, abs=1e-5)

    def test_noiseless_queries_have_exact_rank(self):
        rng = np.random.Generator(np.random.PCG64(0))
        q = low_rank_queries(rng, 200, 32, rank=3, noise_level=0.0)
        sigma = scipy.linalg.svdvals(q)
        assert sigma[3] / sigma[0] <= 1e-8
        assert sigma[2] / sigma[0] > 1e-3

    def test_normalized_queries(self):
        trace = gen_synthetic(_spec(normalize_queries=True))
        norms = np.linalg.norm(trace.queries[0, :, 0].astype(np.float64), axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-6)


class TestSubspaceFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.Generator(np.random.PCG64(3))
        sub = build_subspace(rng.normal(size=(40, 16)), rank=5)
        write_subspace(sub, tmp_path)
        back = read_subspace(tmp_path)
        assert np.array_equal(back.orthonormal_basis, sub.orthonormal_basis)
        assert np.array_equal(back.singular_values, sub.singular_values)
        assert back.dim == 16


def _cache(tokens=45, decode=20, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    config = CacheConfig(block=16)
    shape = (1, tokens, 2, 64)
    keys = rng.normal(size=shape).astype(np.float32)
    values = rng.normal(size=shape).astype(np.float32)
    queries = rng.normal(size=shape).astype(np.float32)
    cache, states = prefill(keys, values, queries, config)
    for _ in range(decode):
        append_decode(rng.normal(size=(1, 2, 64)), rng.normal(size=(1, 2, 64)), cache, states)
    return cache


class TestCacheFiles:
    def test_round_trip(self, tmp_path):
        cache = _cache()
        write_cache(cache, tmp_path)
        back = read_cache(tmp_path)
        assert back.config == cache.config
        assert back.token_count == 65
        k, v = cache.materialize()
        bk, bv = back.materialize()
        assert np.array_equal(k, bk)
        assert np.array_equal(v, bv)

    def test_serialization_deterministic(self, tmp_path):
        write_cache(_cache(), tmp_path / "a")
        write_cache(_cache(), tmp_path / "b")
        for name in CACHE_BLOBS:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_rewrite_after_read_is_identical(self, tmp_path):
        write_cache(_cache(), tmp_path / "a")
        write_cache(read_cache(tmp_path / "a"), tmp_path / "b")
        for name in CACHE_BLOBS:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_manifest_blob_sizes(self, tmp_path):
        manifest = write_cache(_cache(), tmp_path)
        for name in CACHE_BLOBS:
            assert manifest.blobs[name] == (tmp_path / name).stat().st_size
        assert len(manifest.heads) == 2

    def test_truncated_blob(self, tmp_path):
        write_cache(_cache(), tmp_path)
        data = (tmp_path / "key_codes.bin").read_bytes()
        (tmp_path / "key_codes.bin").write_bytes(data[:-1])
        with pytest.raises(TraceFormatError, match=r"key_codes\.bin: truncated"):
            read_cache(tmp_path)
