"""KV-cache lifecycle: residual buffers, group flushing, prefill and decode.

Keys sit in a full-precision residual buffer until R of them have accumulated; the
buffer is then quantized in R/G token groups through the solver and emptied. Values
use a sliding window: once the buffer holds R+1 rows the oldest one is quantized per
token, in channel groups of G.
"""

import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import CacheConfig
from .models import RopeMode
from .quant import GroupedCodes, quantize_per_token
from .rope import apply_rope
from .solver import SolverState, precompute, quantize_key_block
from .subspace import build_subspace, stack_query_heads

log = logging.getLogger(__name__)

HeadIndex = tuple[int, int]


def build_solver_state(queries: np.ndarray, config: CacheConfig) -> SolverState:
    """Subspace of one KV head's prompt queries, then the solver precompute."""
    queries = np.asarray(queries, dtype=np.float64)
    sub = build_subspace(queries, config.rank)
    return precompute(sub, config.lam, config.block)


@dataclass
class HeadCache:
    """Cache of one (layer, KV head)."""
    dim: int
    config: CacheConfig
    key_groups: list[GroupedCodes] = field(default_factory=list)    # (d, G) each
    key_residual: list[np.ndarray] = field(default_factory=list)    # float32 rows
    value_groups: list[GroupedCodes] = field(default_factory=list)  # (tokens·d/G, G) each
    value_residual: deque = field(default_factory=deque)            # float32 rows
    token_count: int = 0
    _value_tokens: int = field(default=0, repr=False)
    _key_deq: list[np.ndarray] = field(default_factory=list, repr=False)
    _value_deq: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.config.check_dim(self.dim)

    # -- Counters --

    @property
    def quantized_key_tokens(self) -> int:
        return len(self.key_groups) * self.config.group_size

    @property
    def quantized_value_tokens(self) -> int:
        return self._value_tokens

    # -- Quantization --

    def _quantize_keys(self, rows: np.ndarray, state: SolverState) -> None:
        g_size = self.config.group_size
        groups = np.asarray(rows, dtype=np.float64).reshape(-1, g_size, self.dim)
        bits = self.config.bits

        def run(group: np.ndarray):
            return quantize_key_block(group, state, bits)

        if self.config.workers > 1 and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(pool.map(run, groups))
        else:
            results = [run(group) for group in groups]

        for result in results:
            codes = result.codes
            self.key_groups.append(codes)
            self._key_deq.append(codes.dequantize().T)
        log.debug("Quantized %d key group(s) of %d tokens", len(results), g_size)

    def _quantize_values(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        codes = quantize_per_token(rows, self.config.bits, self.config.group_size)
        self.value_groups.append(codes)
        self._value_deq.append(codes.dequantize().reshape(rows.shape[0], self.dim))
        self._value_tokens += rows.shape[0]

    # -- Protocol --

    def prefill(self, keys: np.ndarray, values: np.ndarray, state: SolverState) -> None:
        keys = _as_rows(keys, self.dim, "prompt keys")
        values = _as_rows(values, self.dim, "prompt values")
        if keys.shape[0] != values.shape[0]:
            raise ValueError(f"prompt keys ({keys.shape[0]}) and values ({values.shape[0]}) differ in length")
        if self.token_count:
            raise ValueError("prefill needs an empty cache")
        length = keys.shape[0]
        if length < 1:
            raise ValueError("prompt length must be >= 1")

        r_len = self.config.residual_len
        remainder = length % r_len
        flushed = length - remainder
        if flushed:
            self._quantize_keys(keys[:flushed], state)
        self.key_residual = list(keys[flushed:])

        value_flushed = max(0, length - r_len)
        if value_flushed:
            self._quantize_values(values[:value_flushed])
        self.value_residual = deque(values[value_flushed:])
        self.token_count = length

    def append(self, key: np.ndarray, value: np.ndarray, state: SolverState) -> int:
        """Append one decode token; returns how many key tokens were quantized."""
        key = _as_row(key, self.dim, "key")
        value = _as_row(value, self.dim, "value")
        self.token_count += 1

        flushed = 0
        self.key_residual.append(key)
        if len(self.key_residual) == self.config.residual_len:
            self._quantize_keys(np.stack(self.key_residual), state)
            flushed = len(self.key_residual)
            self.key_residual = []

        self.value_residual.append(value)
        if len(self.value_residual) > self.config.residual_len:
            self._quantize_values(self.value_residual.popleft()[None, :])
        return flushed

    def materialize(self) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized rows followed by residual rows, in token order."""
        keys = np.concatenate(
            self._key_deq + [np.asarray(self.key_residual, dtype=np.float64).reshape(-1, self.dim)],
            axis=0,
        )
        values = np.concatenate(
            self._value_deq + [np.asarray(self.value_residual, dtype=np.float64).reshape(-1, self.dim)],
            axis=0,
        )
        if self.config.mode == RopeMode.PRE_ROPE and keys.shape[0]:
            keys = apply_rope(keys, np.arange(keys.shape[0]), self.config.theta_base)
        return keys, values

    # -- Serialization support --

    def key_codes(self) -> GroupedCodes:
        return GroupedCodes.concat(self.key_groups, self.config.bits, self.config.group_size)

    def value_codes(self) -> GroupedCodes:
        return GroupedCodes.concat(self.value_groups, self.config.bits, self.config.group_size)

    @classmethod
    def from_parts(
        cls,
        dim: int,
        config: CacheConfig,
        key_codes: GroupedCodes,
        key_residual: np.ndarray,
        value_codes: GroupedCodes,
        value_residual: np.ndarray,
        token_count: int,
    ) -> "HeadCache":
        head = cls(dim=dim, config=config, token_count=token_count)
        for start in range(0, key_codes.rows, dim):
            part = GroupedCodes(
                codes=key_codes.codes[start:start + dim],
                zero_point=key_codes.zero_point[start:start + dim],
                scale=key_codes.scale[start:start + dim],
                bits=key_codes.bits,
            )
            head.key_groups.append(part)
            head._key_deq.append(part.dequantize().T)
        if value_codes.rows:
            head.value_groups.append(value_codes)
            tokens = value_codes.rows // (dim // config.group_size)
            head._value_deq.append(value_codes.dequantize().reshape(tokens, dim))
            head._value_tokens = tokens
        head.key_residual = list(np.asarray(key_residual, dtype=np.float32))
        head.value_residual = deque(np.asarray(value_residual, dtype=np.float32))
        if head.quantized_key_tokens + len(head.key_residual) != token_count:
            raise ValueError("key token counts do not add up to token_count")
        if head.quantized_value_tokens + len(head.value_residual) != token_count:
            raise ValueError("value token counts do not add up to token_count")
        return head


def _as_rows(x: np.ndarray, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{name} must have shape (tokens, {dim}), got {x.shape}")
    return x


def _as_row(x: np.ndarray, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {x.shape}")
    return x


@dataclass
class KVCache:
    """Per (layer, KV head) caches of one sequence."""
    config: CacheConfig
    layers: int
    kv_heads: int
    dim: int
    heads: dict[HeadIndex, HeadCache] = field(default_factory=dict)
    use_rope: bool = False  # built with rotary positions applied to the trace

    @classmethod
    def empty(cls, config: CacheConfig, layers: int, kv_heads: int, dim: int) -> "KVCache":
        config.check_dim(dim)
        cache = cls(config=config, layers=layers, kv_heads=kv_heads, dim=dim)
        for layer in range(layers):
            for head in range(kv_heads):
                cache.heads[(layer, head)] = HeadCache(dim=dim, config=config)
        return cache

    def head(self, layer: int, head: int) -> HeadCache:
        return self.heads[(layer, head)]

    @property
    def token_count(self) -> int:
        counts = {h.token_count for h in self.heads.values()}
        return counts.pop() if counts else 0

    def materialize(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (layers, tokens, kv_heads, d) keys and values."""
        n = self.token_count
        keys = np.zeros((self.layers, n, self.kv_heads, self.dim))
        values = np.zeros_like(keys)
        for (layer, head), cache in self.heads.items():
            keys[layer, :, head], values[layer, :, head] = cache.materialize()
        return keys, values


def _check_tensor(x: np.ndarray, name: str, ndim: int = 4) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D (layers, tokens, heads, d), got shape {x.shape}")
    return x


def prefill(
    prompt_keys: np.ndarray,
    prompt_values: np.ndarray,
    prompt_queries: np.ndarray,
    config: CacheConfig,
    states: Optional[dict[HeadIndex, SolverState]] = None,
) -> tuple[KVCache, dict[HeadIndex, SolverState]]:
    """Build the subspace and solver state per KV head and quantize the prompt.

    Tensors are (layers, tokens, heads, d); queries carry query heads, which are
    mapped onto KV heads in contiguous blocks (GQA). Pass `states` to reuse solver
    state computed elsewhere (batch sharing).
    """
    keys = _check_tensor(prompt_keys, "prompt_keys")
    values = _check_tensor(prompt_values, "prompt_values")
    queries = _check_tensor(prompt_queries, "prompt_queries")
    if keys.shape != values.shape:
        raise ValueError(f"keys {keys.shape} and values {values.shape} differ in shape")
    layers, length, kv_heads, dim = keys.shape
    if queries.shape[:2] != (layers, length) or queries.shape[3] != dim:
        raise ValueError(f"queries {queries.shape} do not match keys {keys.shape}")
    if length < 1:
        raise ValueError("prompt length must be >= 1")
    q_heads = queries.shape[2]
    if q_heads % kv_heads:
        raise ValueError(f"query heads ({q_heads}) must be a multiple of KV heads ({kv_heads})")
    group = q_heads // kv_heads

    t0 = time.monotonic()
    cache = KVCache.empty(config, layers, kv_heads, dim)
    solver_states = dict(states) if states else {}
    for layer in range(layers):
        for head in range(kv_heads):
            index = (layer, head)
            if index not in solver_states:
                stacked = stack_query_heads(
                    [queries[layer, :, j] for j in range(head * group, (head + 1) * group)]
                )
                solver_states[index] = build_solver_state(stacked, config)
            cache.head(layer, head).prefill(keys[layer, :, head], values[layer, :, head], solver_states[index])

    sample = cache.head(0, 0)
    log.info(
        "--- Prefill (%.1fms) --- %d tokens, %d quantized keys, %d residual",
        (time.monotonic() - t0) * 1000, length, sample.quantized_key_tokens, len(sample.key_residual),
    )
    return cache, solver_states


def append_decode(
    new_key: np.ndarray,
    new_value: np.ndarray,
    cache: KVCache,
    states: dict[HeadIndex, SolverState],
    config: Optional[CacheConfig] = None,
) -> KVCache:
    """Append one token's (layers, kv_heads, d) key and value to every head."""
    if config is not None and config != cache.config:
        raise ValueError("config does not match the cache's config")
    new_key = np.asarray(new_key)
    new_value = np.asarray(new_value)
    expected = (cache.layers, cache.kv_heads, cache.dim)
    if new_key.shape != expected or new_value.shape != expected:
        raise ValueError(
            f"decode tensors must have shape {expected}, got {new_key.shape} / {new_value.shape}"
        )
    for (layer, head), head_cache in cache.heads.items():
        head_cache.append(new_key[layer, head], new_value[layer, head], states[(layer, head)])
    return cache


def materialize(cache: KVCache) -> tuple[np.ndarray, np.ndarray]:
    return cache.materialize()


def prefill_batch(
    samples: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    config: CacheConfig,
) -> list[tuple[KVCache, dict[HeadIndex, SolverState]]]:
    """Prefill several sequences.

    With `share_solver_state` the solver state is computed from the first sample and
    reused for the rest; otherwise every sample gets its own.
    """
    results = []
    shared: Optional[dict[HeadIndex, SolverState]] = None
    for keys, values, queries in samples:
        cache, states = prefill(keys, values, queries, config, states=shared)
        if config.share_solver_state and shared is None:
            shared = states
        results.append((cache, states))
    return results
