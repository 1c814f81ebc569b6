"""KV-cache size accounting: the full-precision formula and the quantized byte count."""

from .config import CacheConfig
from .quant import PARAM_BYTES, packed_size

FP16_BYTES = 2
RESIDUAL_BYTES = 4  # residual rows are stored as float32


def _check_non_negative(**values: int) -> None:
    for name, value in values.items():
        if value < 0:
            raise ValueError(f"{name} must be >= 0, got {value}")


def estimate_memory(
    batch: int,
    seq_len: int,
    layers: int,
    heads: int,
    head_dim: int,
    bytes_per_param: int = FP16_BYTES,
) -> int:
    """2·b·l·L·h·d·p: keys plus values of every token, layer and head."""
    _check_non_negative(
        batch=batch, seq_len=seq_len, layers=layers, heads=heads,
        head_dim=head_dim, bytes_per_param=bytes_per_param,
    )
    return 2 * batch * seq_len * layers * heads * head_dim * bytes_per_param


def token_split(seq_len: int, residual_len: int) -> tuple[int, int, int, int]:
    """(quantized keys, residual keys, quantized values, residual values) after seq_len tokens.

    Keys flush in multiples of R, so the residual is seq_len mod R whatever the prompt
    length was; values keep a sliding window of the last R tokens.
    """
    _check_non_negative(seq_len=seq_len)
    key_residual = seq_len % residual_len
    value_residual = min(seq_len, residual_len)
    return seq_len - key_residual, key_residual, seq_len - value_residual, value_residual


def head_bytes(seq_len: int, head_dim: int, config: CacheConfig) -> int:
    """Serialized size of one (layer, head): codes, zero-points, scales and residual rows."""
    key_q, key_r, value_q, value_r = token_split(seq_len, config.residual_len)
    group_bytes = packed_size(config.group_size, config.bits) + PARAM_BYTES
    key_groups = (key_q // config.group_size) * head_dim
    value_groups = value_q * (head_dim // config.group_size)
    residual = (key_r + value_r) * head_dim * RESIDUAL_BYTES
    return (key_groups + value_groups) * group_bytes + residual


def estimate_quantized_size(
    batch: int,
    seq_len: int,
    layers: int,
    heads: int,
    head_dim: int,
    config: CacheConfig,
) -> int:
    """Bytes of the serialized quantized cache, matching the blob sizes written to disk."""
    _check_non_negative(batch=batch, seq_len=seq_len, layers=layers, heads=heads)
    config.check_dim(head_dim)
    return batch * layers * heads * head_bytes(seq_len, head_dim, config)


def compression_ratio(quantized_bytes: int, seq_len: int, layers: int, heads: int, head_dim: int) -> float:
    """Quantized bytes over the FP16 size of the same cache (0.0 for an empty cache)."""
    fp16 = estimate_memory(1, seq_len, layers, heads, head_dim, FP16_BYTES)
    return quantized_bytes / fp16 if fp16 else 0.0
