"""Tests for single-query attention and the output deviation bound."""

import numpy as np
import pytest

from squat_kv.harness.attention import (
    AttentionConfig,
    attend,
    attend_reference,
    attention_weights,
    deviation_bound,
    logits,
    softmax,
)


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestAttend:
    def test_single_key_returns_its_value(self):
        v = np.array([[1.5, -2.0, 3.0, 0.25]])
        assert np.array_equal(attend(np.ones(4), np.ones((1, 4)), v), v[0])

    def test_identical_keys_average_values(self):
        rng = _rng(1)
        values = rng.normal(size=(6, 8))
        out = attend(rng.normal(size=8), np.tile(rng.normal(size=8), (6, 1)), values)
        assert np.allclose(out, values.mean(axis=0), atol=1e-12)

    def test_matches_extended_precision_reference(self):
        rng = _rng(2)
        for _ in range(20):
            q, k, v = rng.normal(size=8), rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
            assert np.max(np.abs(attend(q, k, v) - attend_reference(q, k, v))) <= 1e-10

    def test_weights_sum_to_one(self):
        rng = _rng(3)
        w = attention_weights(rng.normal(size=8) * 50, rng.normal(size=(32, 8)))
        assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_softmax_shift_invariant(self):
        x = _rng(4).normal(size=10)
        assert np.allclose(softmax(x), softmax(x + 1000.0))

    def test_no_keys(self):
        with pytest.raises(ValueError, match="at least one key"):
            attend(np.ones(4), np.zeros((0, 4)), np.zeros((0, 4)))

    def test_query_width_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            attend(np.ones(3), np.ones((2, 4)), np.ones((2, 4)))

    def test_config_scale(self):
        assert AttentionConfig(head_dim=64).scale == pytest.approx(0.125)
        with pytest.raises(ValueError):
            AttentionConfig(head_dim=0)

    def test_logits_use_config_scale(self):
        q, keys = np.ones(4), np.eye(4)
        assert logits(q, keys, AttentionConfig(head_dim=4)) == pytest.approx(np.full(4, 0.5))
        with pytest.raises(ValueError, match="head_dim"):
            logits(q, keys, AttentionConfig(head_dim=8))


class TestDeviationBound:
    def test_exact_caches(self):
        rng = _rng(5)
        q, k, v = rng.normal(size=8), rng.normal(size=(10, 8)), rng.normal(size=(10, 8))
        terms = deviation_bound(q, k, k, v, v)
        assert terms.bound_stated == 0.0 and terms.bound_proof == 0.0

    def test_keys_perturbed_orthogonally_to_query(self):
        rng = _rng(6)
        q, k, v = rng.normal(size=8), rng.normal(size=(10, 8)), rng.normal(size=(10, 8))
        noise = rng.normal(size=(10, 8))
        noise -= np.outer(noise @ q, q) / (q @ q)
        k_hat = k + noise
        terms = deviation_bound(q, k, k_hat, v, v)
        assert terms.key_ip_error_sum == pytest.approx(0.0, abs=1e-12)
        assert terms.bound_proof == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(attend(q, k, v) - attend(q, k_hat, v)) == pytest.approx(0.0, abs=1e-12)

    def test_proof_bound_holds_on_random_instances(self):
        rng = _rng(7)
        for _ in range(1000):
            n, d = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            q = rng.normal(size=d)
            k, v = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            k_hat = k + rng.normal(scale=0.3, size=(n, d))
            v_hat = v + rng.normal(scale=0.3, size=(n, d))
            actual = np.linalg.norm(attend(q, k, v) - attend(q, k_hat, v_hat))
            assert actual <= deviation_bound(q, k, k_hat, v, v_hat).bound_proof + 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="do not match"):
            deviation_bound(np.ones(4), np.ones((3, 4)), np.ones((2, 4)), np.ones((3, 4)), np.ones((3, 4)))
