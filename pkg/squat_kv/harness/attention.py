"""Single-query attention, an extended-precision reference and the output deviation bound."""

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class AttentionConfig:
    head_dim: int
    causal: bool = True  # step i sees rows 0..i, otherwise every row of the cache

    def __post_init__(self) -> None:
        if self.head_dim < 1:
            raise ValueError(f"head_dim must be >= 1, got {self.head_dim}")

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)


def _check(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError(f"attention needs at least one key, got keys of shape {keys.shape}")
    if q.shape != (keys.shape[1],):
        raise ValueError(f"query shape {q.shape} does not match key width {keys.shape[1]}")
    if values.shape[0] != keys.shape[0]:
        raise ValueError(f"{keys.shape[0]} keys but {values.shape[0]} values")
    return q, keys, values


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(logits - np.max(logits))
    return shifted / shifted.sum()


def logits(q: np.ndarray, keys: np.ndarray, config: Optional[AttentionConfig] = None) -> np.ndarray:
    """q·kᵢ/√d for every key row."""
    q = np.asarray(q, dtype=np.float64)
    config = config or AttentionConfig(head_dim=q.shape[0])
    if config.head_dim != q.shape[0]:
        raise ValueError(f"query width {q.shape[0]} does not match head_dim {config.head_dim}")
    return np.asarray(keys, dtype=np.float64) @ q * config.scale


def attention_weights(q: np.ndarray, keys: np.ndarray, config: Optional[AttentionConfig] = None) -> np.ndarray:
    return softmax(logits(q, keys, config))


def attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """softmax(qKᵀ/√d)·V for the last row of a causal mask (every key visible)."""
    q, keys, values = _check(q, keys, values)
    return attention_weights(q, keys) @ values


def attend_reference(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Plain exp-normalize in extended precision."""
    q, keys, values = _check(q, keys, values)
    ld = np.longdouble
    scores = keys.astype(ld) @ q.astype(ld) / np.sqrt(ld(q.shape[0]))
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()
    return (weights @ values.astype(ld)).astype(np.float64)


@dataclass(frozen=True)
class BoundTerms:
    value_error_sum: float   # Σ‖vᵢ − v̂ᵢ‖
    key_ip_error_sum: float  # Σ|q·(kᵢ − k̂ᵢ)|
    bound_stated: float
    bound_proof: float


def deviation_bound(
    q: np.ndarray,
    keys_fp: np.ndarray,
    keys_deq: np.ndarray,
    values_fp: np.ndarray,
    values_deq: np.ndarray,
) -> BoundTerms:
    """Upper bounds on ‖attend(q, K, V) − attend(q, K̂, V̂)‖.

    Softmax is 1/2-Lipschitz, so the deviation is at most
    ‖V̂‖_F/(2√d)·Σ|q·Δkᵢ| + Σ‖Δvᵢ‖ (`bound_proof`). `bound_stated` uses Σ‖Δvᵢ‖ as the
    first multiplier instead; it is reported but not guaranteed to hold.
    """
    q, keys_fp, values_fp = _check(q, keys_fp, values_fp)
    keys_deq = np.asarray(keys_deq, dtype=np.float64)
    values_deq = np.asarray(values_deq, dtype=np.float64)
    if keys_deq.shape != keys_fp.shape or values_deq.shape != values_fp.shape:
        raise ValueError(
            f"quantized shapes {keys_deq.shape}/{values_deq.shape} do not match "
            f"{keys_fp.shape}/{values_fp.shape}"
        )
    two_root_d = 2.0 * np.sqrt(q.shape[0])
    value_err = float(np.sum(np.linalg.norm(values_fp - values_deq, axis=1)))
    key_err = float(np.sum(np.abs((keys_fp - keys_deq) @ q)))
    return BoundTerms(
        value_error_sum=value_err,
        key_ip_error_sum=key_err,
        bound_stated=value_err / two_root_d * key_err + value_err,
        bound_proof=float(np.linalg.norm(values_deq)) / two_root_d * key_err + value_err,
    )
