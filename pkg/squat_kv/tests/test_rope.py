import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from squat_kv.rope import apply_rope, rope_angles


class TestApplyRope:
    def test_position_zero_is_identity(self):
        x = np.arange(8, dtype=np.float64)
        assert np.array_equal(apply_rope(x, 0), x)

    def test_odd_dimension_raises(self):
        with pytest.raises(ValueError, match="even"):
            apply_rope(np.ones(5), 3)

    def test_first_pair_rotates_by_position(self):
        x = np.array([1.0, 0.0, 0.0, 0.0])
        out = apply_rope(x, 2)
        assert out[:2] == pytest.approx([np.cos(2.0), np.sin(2.0)])

    @settings(max_examples=100, deadline=None)
    @given(
        x=arrays(np.float64, 16, elements=st.floats(-100, 100)),
        position=st.integers(0, 100_000),
    )
    def test_norm_preserved(self, x, position):
        assert np.linalg.norm(apply_rope(x, position)) == pytest.approx(np.linalg.norm(x), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(
        x=arrays(np.float64, 8, elements=st.floats(-10, 10)),
        position=st.integers(0, 10_000),
    )
    def test_inverse_rotation(self, x, position):
        back = apply_rope(apply_rope(x, position), -position)
        assert np.allclose(back, x, atol=1e-8)

    def test_matrix_with_positions(self):
        rng = np.random.Generator(np.random.PCG64(0))
        x = rng.normal(size=(5, 6))
        out = apply_rope(x, np.arange(5))
        for i in range(5):
            assert np.allclose(out[i], apply_rope(x[i], i))

    def test_relative_position_property(self):
        rng = np.random.Generator(np.random.PCG64(1))
        q, k = rng.normal(size=8), rng.normal(size=8)
        a = apply_rope(q, 10) @ apply_rope(k, 7)
        b = apply_rope(q, 103) @ apply_rope(k, 100)
        assert a == pytest.approx(b)

    def test_angles_shape(self):
        assert rope_angles(np.arange(3), 8).shape == (3, 4)
