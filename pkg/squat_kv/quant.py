"""Uniform b-bit group quantization.

A group of values x is mapped to integer codes in [0, 2^b - 1] with an affine grid:

    zero_point m = min(x)
    scale      Δ = (max(x) - min(x)) / (2^b - 1)
    code       c = clamp(round((x - m) / Δ), 0, 2^b - 1)
    deq(c)       = c·Δ + m

Zero-points and scales are stored as float32; codes are computed against the stored
(float32) parameters in float64 so that deq(qtz(x)) is always within Δ/2 of x.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_BITS = 1
MAX_BITS = 8
PARAM_BYTES = 8  # zero-point + scale, float32 each


def _check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bits must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")


def max_code(bits: int) -> int:
    return (1 << bits) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero (numpy's rint rounds ties to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """Affine grid of one quantization group."""
    bits: int
    zero_point: float
    scale: float

    def __post_init__(self) -> None:
        _check_bits(self.bits)
        if not np.isfinite(self.zero_point) or not np.isfinite(self.scale):
            raise ValueError("zero_point and scale must be finite")
        if self.scale < 0:
            raise ValueError(f"scale must be >= 0, got {self.scale}")


# -- Bit packing --


def packed_size(length: int, bits: int) -> int:
    """Bytes needed for one group of `length` codes, padded to a byte boundary."""
    return (length * bits + 7) // 8


def pack_rows(codes: np.ndarray, bits: int) -> bytes:
    """Pack a (rows, n) code array, each row LSB-first and padded to whole bytes."""
    _check_bits(bits)
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise ValueError(f"codes must be 2-D (rows, n), got shape {codes.shape}")
    if codes.size and int(codes.max()) > max_code(bits):
        raise ValueError(f"code {int(codes.max())} does not fit in {bits} bits")
    rows, n = codes.shape
    shifts = np.arange(bits, dtype=np.uint8)
    bit_planes = (codes[:, :, None] >> shifts) & 1
    packed = np.packbits(bit_planes.reshape(rows, n * bits), axis=-1, bitorder="little")
    return packed.tobytes()


def unpack_rows(data: bytes, bits: int, rows: int, n: int) -> np.ndarray:
    """Inverse of pack_rows. Raises ValueError when the byte count does not match."""
    _check_bits(bits)
    row_bytes = packed_size(n, bits)
    expected = rows * row_bytes
    if len(data) != expected:
        raise ValueError(
            f"packed code length mismatch: expected {expected} bytes "
            f"for {rows}x{n} codes at {bits} bits, got {len(data)}"
        )
    if rows == 0 or n == 0:
        return np.zeros((rows, n), dtype=np.uint8)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(rows, row_bytes)
    bit_planes = np.unpackbits(raw, axis=-1, count=n * bits, bitorder="little")
    bit_planes = bit_planes.reshape(rows, n, bits)
    weights = (1 << np.arange(bits)).astype(np.uint16)
    return (bit_planes * weights).sum(axis=-1).astype(np.uint8)


def pack_codes(codes: Sequence[int], bits: int) -> bytes:
    return pack_rows(np.asarray(codes, dtype=np.uint8)[None, :], bits)


def unpack_codes(data: bytes, bits: int, length: int) -> np.ndarray:
    return unpack_rows(data, bits, 1, length)[0]


# -- Single group --


@dataclass(frozen=True)
class QuantizedGroup:
    """Bit-packed codes of one group plus its grid."""
    packed: bytes
    params: QuantParams
    length: int

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.params.bits, self.length)

    @property
    def nbytes(self) -> int:
        return len(self.packed) + PARAM_BYTES


def _as_values(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty group")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    return x


def quantize_group(values: Sequence[float], bits: int) -> QuantizedGroup:
    x = _as_values(values).ravel()
    grouped = quantize_rows(x[None, :], bits)
    return grouped.group(0)


def quantize_with_params(values: Sequence[float], params: QuantParams) -> QuantizedGroup:
    """Quantize against a fixed grid instead of one derived from the values."""
    x = _as_values(values).ravel()
    codes = _encode(
        x[None, :],
        np.array([params.zero_point], dtype=np.float32),
        np.array([params.scale], dtype=np.float32),
        params.bits,
    )
    return QuantizedGroup(packed=pack_rows(codes, params.bits), params=params, length=x.size)


def dequantize_group(group: QuantizedGroup) -> np.ndarray:
    codes = group.codes()
    return codes.astype(np.float64) * np.float64(group.params.scale) + np.float64(group.params.zero_point)


# -- Many groups at once --


def _grid(x: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    lo = x.min(axis=-1)
    hi = x.max(axis=-1)
    zero_point = lo.astype(np.float32)
    scale = ((hi - lo) / max_code(bits)).astype(np.float32)
    return zero_point, scale


def _encode(x: np.ndarray, zero_point: np.ndarray, scale: np.ndarray, bits: int) -> np.ndarray:
    m = zero_point.astype(np.float64)[:, None]
    delta = scale.astype(np.float64)[:, None]
    safe = np.where(delta > 0, delta, 1.0)
    raw = round_half_away((x - m) / safe)
    codes = np.clip(raw, 0, max_code(bits))
    codes = np.where(delta > 0, codes, 0)
    return codes.astype(np.uint8)


@dataclass(frozen=True)
class GroupedCodes:
    """`rows` quantization groups of `n` elements each, quantized along the last axis.

    Keys use one row per channel (n = tokens in the group); values use one row per
    (token, channel-group) pair (n = channels in the group).
    """
    codes: np.ndarray       # (rows, n) uint8, unpacked in memory
    zero_point: np.ndarray  # (rows,) float32
    scale: np.ndarray       # (rows,) float32
    bits: int

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def n(self) -> int:
        return self.codes.shape[1]

    def dequantize(self) -> np.ndarray:
        return (
            self.codes.astype(np.float64) * self.scale.astype(np.float64)[:, None]
            + self.zero_point.astype(np.float64)[:, None]
        )

    def group(self, i: int) -> QuantizedGroup:
        params = QuantParams(
            bits=self.bits,
            zero_point=float(self.zero_point[i]),
            scale=float(self.scale[i]),
        )
        return QuantizedGroup(
            packed=pack_rows(self.codes[i:i + 1], self.bits),
            params=params,
            length=self.n,
        )

    def packed(self) -> bytes:
        return pack_rows(self.codes, self.bits)

    def params_bytes(self) -> bytes:
        """Little-endian float32 (zero_point, scale) pairs, one per group."""
        pairs = np.stack([self.zero_point, self.scale], axis=-1).astype("<f4")
        return pairs.tobytes()

    @property
    def nbytes(self) -> int:
        return self.rows * (packed_size(self.n, self.bits) + PARAM_BYTES)

    @classmethod
    def from_bytes(cls, codes: bytes, params: bytes, bits: int, rows: int, n: int) -> "GroupedCodes":
        if len(params) != rows * PARAM_BYTES:
            raise ValueError(
                f"params length mismatch: expected {rows * PARAM_BYTES} bytes, got {len(params)}"
            )
        pairs = np.frombuffer(params, dtype="<f4").reshape(rows, 2)
        return cls(
            codes=unpack_rows(codes, bits, rows, n),
            zero_point=pairs[:, 0].astype(np.float32),
            scale=pairs[:, 1].astype(np.float32),
            bits=bits,
        )

    @classmethod
    def concat(cls, parts: Sequence["GroupedCodes"], bits: int, n: int) -> "GroupedCodes":
        if not parts:
            return cls(
                codes=np.zeros((0, n), dtype=np.uint8),
                zero_point=np.zeros(0, dtype=np.float32),
                scale=np.zeros(0, dtype=np.float32),
                bits=bits,
            )
        return cls(
            codes=np.concatenate([p.codes for p in parts], axis=0),
            zero_point=np.concatenate([p.zero_point for p in parts]),
            scale=np.concatenate([p.scale for p in parts]),
            bits=bits,
        )


def quantize_rows(x: np.ndarray, bits: int) -> GroupedCodes:
    """Quantize every row of a 2-D array as its own group."""
    _check_bits(bits)
    x = _as_values(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array of groups, got shape {x.shape}")
    zero_point, scale = _grid(x, bits)
    codes = _encode(x, zero_point, scale, bits)
    return GroupedCodes(codes=codes, zero_point=zero_point, scale=scale, bits=bits)


def quantize_per_channel(block: np.ndarray, bits: int) -> GroupedCodes:
    """Per-channel quantization of a (tokens, channels) block: one group per channel."""
    return quantize_rows(np.asarray(block, dtype=np.float64).T, bits)


def quantize_per_token(rows: np.ndarray, bits: int, group_size: int) -> GroupedCodes:
    """Per-token quantization of (tokens, d) rows in channel groups of `group_size`."""
    rows = np.asarray(rows, dtype=np.float64)
    tokens, d = rows.shape
    if d % group_size:
        raise ValueError(f"group_size ({group_size}) must divide the row width ({d})")
    return quantize_rows(rows.reshape(tokens * (d // group_size), group_size), bits)
