"""End-to-end runs over a trace: quantize to a cache on disk, deviation curves.

Quantization runs in three timed phases:
  1. Prefill: subspace, solver precompute and prompt quantization per KV head
  2. Decode: one append per remaining token
  3. Serialize: cache blobs and manifest
"""

import logging
import tempfile
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cache import HeadIndex, KVCache, append_decode, prefill
from .config import RunConfig
from .harness.replay import prepare_inputs
from .memory import compression_ratio, estimate_memory
from .models import CacheManifest, CurvePoint, CurveReport, QuantizeSummary
from .solver import SolverState
from .subspace import deviation_curve
from .trace_io import Trace, write_cache

log = logging.getLogger(__name__)


@dataclass
class QuantizeResult:
    """Result of quantizing a whole trace."""
    cache: KVCache
    states: dict[HeadIndex, SolverState]
    manifest: CacheManifest
    summary: QuantizeSummary
    timings_ms: dict[str, float] = field(default_factory=dict)


def run_quantize(trace: Trace, run_config: RunConfig) -> QuantizeResult:
    """Prefill on the prompt, decode the rest, serialize, and summarize sizes and timings.

    The cache is written to `run_config.out` when set, otherwise to a scratch directory
    that is removed once the byte count is known.
    """
    config = run_config.cache
    m = trace.manifest
    if m.prompt_len < 1:
        raise ValueError("quantize needs a prompt of at least one token")
    config.check_dim(m.head_dim)
    cache_keys, sub_queries, _, _ = prepare_inputs(trace, config, run_config.use_rope)
    p = m.prompt_len
    timings: dict[str, float] = {}

    t0 = time.monotonic()
    cache, states = prefill(cache_keys[:, :p], trace.values[:, :p], sub_queries[:, :p], config)
    timings["prefill"] = (time.monotonic() - t0) * 1000
    log.info("--- Prefill phase (%.1fms) ---", timings["prefill"])

    t1 = time.monotonic()
    for i in range(p, m.tokens):
        append_decode(cache_keys[:, i], trace.values[:, i], cache, states)
    cache.use_rope = run_config.use_rope
    timings["decode"] = (time.monotonic() - t1) * 1000
    log.info("--- Decode phase (%.1fms) --- %d steps", timings["decode"], m.tokens - p)

    t2 = time.monotonic()
    if run_config.out is not None:
        manifest = write_cache(cache, run_config.out)
    else:
        with tempfile.TemporaryDirectory() as scratch:
            manifest = write_cache(cache, scratch)
    timings["serialize"] = (time.monotonic() - t2) * 1000
    log.info("--- Serialize phase (%.1fms) ---", timings["serialize"])

    head = cache.head(0, 0)
    cache_bytes = sum(manifest.blobs.values())
    summary = QuantizeSummary(
        tokens=m.tokens,
        prompt_len=p,
        layers=m.layers,
        kv_heads=m.kv_heads,
        head_dim=m.head_dim,
        quantized_key_tokens=head.quantized_key_tokens,
        residual_key_tokens=len(head.key_residual),
        quantized_value_tokens=head.quantized_value_tokens,
        residual_value_tokens=len(head.value_residual),
        cache_bytes=cache_bytes,
        fp16_bytes=estimate_memory(1, m.tokens, m.layers, m.kv_heads, m.head_dim),
        ratio=compression_ratio(cache_bytes, m.tokens, m.layers, m.kv_heads, m.head_dim),
        timings_ms={k: round(v, 1) for k, v in timings.items()},
    )
    log.info("  %d bytes, %.1f%% of FP16", cache_bytes, summary.ratio * 100)
    return QuantizeResult(cache=cache, states=states, manifest=manifest, summary=summary, timings_ms=timings)


def run_curve(trace: Trace, ranks: Sequence[int], source: str = "prompt") -> CurveReport:
    """Mean deviation of normalized decode queries vs subspace rank, per layer and query head.

    `source="prompt"` builds each subspace from the prompt queries, `"all"` from every token.
    """
    if source not in ("prompt", "all"):
        raise ValueError(f"source must be 'prompt' or 'all', got {source!r}")
    m = trace.manifest
    ranks = sorted(set(ranks))
    if not ranks or ranks[0] < 1 or ranks[-1] > m.head_dim:
        raise ValueError(f"ranks must lie in [1, {m.head_dim}], got {ranks}")
    if m.prompt_len < 1:
        raise ValueError("curve needs a prompt of at least one token")

    decode = slice(m.prompt_len, m.tokens) if m.tokens > m.prompt_len else slice(0, m.tokens)
    reference = slice(0, m.prompt_len) if source == "prompt" else slice(0, m.tokens)

    report = CurveReport(source=source, ranks=ranks)
    per_rank: list[list[float]] = [[] for _ in ranks]
    for layer in range(m.layers):
        for head in range(m.query_heads):
            q = trace.queries[layer, :, head].astype(np.float64)
            curve = deviation_curve(q[decode], q[reference], ranks)
            for i, (rank, dev) in enumerate(zip(ranks, curve)):
                report.points.append(CurvePoint(layer=layer, head=head, rank=rank, deviation=dev))
                per_rank[i].append(dev)
    report.mean = [float(np.mean(values)) for values in per_rank]
    return report

