"""Rotary position embedding on interleaved channel pairs (x_2i, x_2i+1)."""

import numpy as np

DEFAULT_THETA_BASE = 10000.0


def rope_angles(positions: np.ndarray, dim: int, theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Angles position·θ^(-2i/d), shape (*positions.shape, d/2)."""
    if dim % 2:
        raise ValueError(f"RoPE needs an even dimension, got {dim}")
    inv_freq = theta_base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[..., None] * inv_freq


def apply_rope(x: np.ndarray, position, theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Rotate x (shape (..., d)) by its position(s).

    `position` is a scalar or an array broadcastable against x's leading axes, so a
    (n, d) matrix can be rotated with positions arange(n).
    """
    x = np.asarray(x, dtype=np.float64)
    angles = rope_angles(position, x.shape[-1], theta_base)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, angles.shape[:-1] + (x.shape[-1],)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
