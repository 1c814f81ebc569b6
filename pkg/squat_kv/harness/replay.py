"""Replay a trace's decode phase against full-precision and quantized caches.

The cache is built with the real protocol (prefill on the prompt, one append per
remaining token). Attention is then replayed with a causal mask: the query at decode
position i sees the first i+1 rows of the materialized cache. A non-causal
`AttentionConfig` lets every step see all rows.

The replay uses the final cache state, not a snapshot per step: rows that were still in
the full-precision residual buffer at step i are replayed in their quantized form.
"""

import logging
import time
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from ..cache import KVCache, append_decode, prefill
from ..config import CacheConfig
from ..models import RopeMode
from ..rope import apply_rope
from ..trace_io import Trace
from .attention import AttentionConfig, attention_weights, logits, deviation_bound
from .models import (
    ComparisonReport,
    DeviationReport,
    QuantizerSummary,
    StepDeviation,
    SweepCell,
    SweepReport,
)

log = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-6


def _rotated(x: np.ndarray, theta_base: float) -> np.ndarray:
    positions = np.arange(x.shape[1])[None, :, None]
    return apply_rope(x, positions, theta_base)


def prepare_inputs(trace: Trace, config: CacheConfig, use_rope: bool):
    """(keys fed to the cache, queries for the subspace, reference keys, replay queries)."""
    keys = trace.keys.astype(np.float64)
    queries = trace.queries.astype(np.float64)
    if not use_rope:
        return keys, queries, keys, queries
    rot_keys = _rotated(keys, config.theta_base)
    rot_queries = _rotated(queries, config.theta_base)
    if config.mode == RopeMode.PRE_ROPE:
        return keys, queries, rot_keys, rot_queries
    return rot_keys, rot_queries, rot_keys, rot_queries


def build_cache(trace: Trace, config: CacheConfig, use_rope: bool = False):
    """Run prefill and decode over the whole trace; returns (cache, states)."""
    m = trace.manifest
    if m.prompt_len < 1:
        raise ValueError("replay needs a prompt of at least one token")
    if config.mode == RopeMode.PRE_ROPE and not use_rope:
        raise ValueError("pre-rope mode only makes sense with rotary positions enabled")
    cache_keys, sub_queries, _, _ = prepare_inputs(trace, config, use_rope)
    p = m.prompt_len
    cache, states = prefill(cache_keys[:, :p], trace.values[:, :p], sub_queries[:, :p], config)
    for i in range(p, m.tokens):
        append_decode(cache_keys[:, i], trace.values[:, i], cache, states)
    cache.use_rope = use_rope
    return cache, states


def replay(
    trace: Trace,
    config: CacheConfig,
    use_rope: bool = False,
    label: Optional[str] = None,
    keep_scores: bool = True,
    cache: Optional[KVCache] = None,
    attention: Optional[AttentionConfig] = None,
) -> DeviationReport:
    """Per decode step and query head: actual deviation, both bounds and score differences.

    Pass a stored `cache` to replay against it instead of rebuilding one; its config
    then replaces `config`, and it must have been built with the same `use_rope`.
    `attention` defaults to a causal mask at the trace's head_dim.
    """
    t0 = time.monotonic()
    m = trace.manifest
    attention = attention or AttentionConfig(head_dim=m.head_dim)
    if attention.head_dim != m.head_dim:
        raise ValueError(f"attention head_dim {attention.head_dim} does not match trace head_dim {m.head_dim}")
    if cache is None:
        cache, _ = build_cache(trace, config, use_rope)
    else:
        _check_cache(cache, trace, use_rope)
        config = cache.config
    keys_deq, values_deq = cache.materialize()
    _, _, keys_fp, queries = prepare_inputs(trace, config, use_rope)
    values_fp = trace.values.astype(np.float64)
    group = m.queries_per_kv_head
    t_build = time.monotonic()

    steps = []
    all_scores = []
    for i in range(m.prompt_len, m.tokens):
        visible = slice(0, i + 1) if attention.causal else slice(0, m.tokens)
        for layer in range(m.layers):
            for head in range(m.query_heads):
                kv = head // group
                q = queries[layer, i, head]
                k_fp, k_q = keys_fp[layer, visible, kv], keys_deq[layer, visible, kv]
                v_fp, v_q = values_fp[layer, visible, kv], values_deq[layer, visible, kv]

                w_fp, w_q = attention_weights(q, k_fp, attention), attention_weights(q, k_q, attention)
                score_diff = np.abs(w_fp - w_q)
                bound = deviation_bound(q, k_fp, k_q, v_fp, v_q)
                all_scores.append(score_diff)
                steps.append(StepDeviation(
                    step=i,
                    layer=layer,
                    head=head,
                    actual_deviation=float(np.linalg.norm(w_fp @ v_fp - w_q @ v_q)),
                    bound_stated=bound.bound_stated,
                    bound_proof=bound.bound_proof,
                    value_error_sum=bound.value_error_sum,
                    key_ip_error_sum=bound.key_ip_error_sum,
                    score_abs_diff=score_diff.tolist() if keep_scores else [],
                    logit_abs_diff=np.abs(logits(q, k_fp, attention) - logits(q, k_q, attention)).tolist() if keep_scores else [],
                ))

    summary = _summarize(label or ("baseline" if config.lam == 0 else "squat"), config, steps, all_scores)
    log.info(
        "--- Replay %s (build %.1fms, replay %.1fms) --- %d steps, mean |score diff| %.3e",
        summary.label, (t_build - t0) * 1000, (time.monotonic() - t_build) * 1000,
        len(steps), summary.mean_score_diff,
    )
    if summary.bound_violations:
        log.warning("%d step(s) exceed the proof-form bound", summary.bound_violations)
    return DeviationReport(config=config.to_dict(), use_rope=use_rope, steps=steps, summary=summary)


def _check_cache(cache: KVCache, trace: Trace, use_rope: bool) -> None:
    m = trace.manifest
    expected = (m.layers, m.kv_heads, m.head_dim, m.tokens)
    actual = (cache.layers, cache.kv_heads, cache.dim, cache.token_count)
    if actual != expected:
        raise ValueError(
            f"cache shape (layers, kv_heads, d, tokens)={actual} does not match trace {expected}"
        )
    if cache.use_rope != use_rope:
        raise ValueError(
            f"cache was built with use_rope={cache.use_rope} but replay asked for use_rope={use_rope}; "
            "rerun with the same --rope setting"
        )


def _summarize(label: str, config: CacheConfig, steps: list[StepDeviation], scores: list[np.ndarray]) -> QuantizerSummary:
    flat = np.concatenate(scores) if scores else np.zeros(1)
    deviations = np.array([s.actual_deviation for s in steps]) if steps else np.zeros(1)
    violations = sum(1 for s in steps if s.actual_deviation > s.bound_proof + BOUND_TOLERANCE)
    return QuantizerSummary(
        label=label,
        lam=config.lam,
        rank=config.rank,
        mean_score_diff=float(np.mean(flat)),
        p95_score_diff=float(np.percentile(flat, 95)),
        max_score_diff=float(np.max(flat)),
        mean_deviation=float(np.mean(deviations)),
        max_deviation=float(np.max(deviations)),
        bound_violations=violations,
    )


def compare_quantizers(
    trace: Trace,
    config_squat: CacheConfig,
    config_baseline: Optional[CacheConfig] = None,
    use_rope: bool = False,
    keep_scores: bool = True,
) -> ComparisonReport:
    """Replay the same trace with λ>0 and with the compression-only baseline."""
    baseline_config = config_baseline or config_squat.baseline()
    squat = replay(trace, config_squat, use_rope, label="squat", keep_scores=keep_scores)
    baseline = replay(trace, baseline_config, use_rope, label="baseline", keep_scores=keep_scores)
    return ComparisonReport(
        squat=squat,
        baseline=baseline,
        mean_score_diff_delta=baseline.summary.mean_score_diff - squat.summary.mean_score_diff,
    )


def sweep(
    trace: Trace,
    config: CacheConfig,
    lams: Sequence[float],
    ranks: Sequence[int],
    use_rope: bool = False,
) -> SweepReport:
    """Mean and p95 score differences over a λ × r grid."""
    report = SweepReport(lams=list(lams), ranks=list(ranks))
    for lam in lams:
        for rank in ranks:
            cell_config = replace(config, lam=lam, rank=rank)
            summary = replay(trace, cell_config, use_rope, keep_scores=False).summary
            report.cells.append(SweepCell(
                lam=lam,
                rank=rank,
                mean_score_diff=summary.mean_score_diff,
                p95_score_diff=summary.p95_score_diff,
                mean_deviation=summary.mean_deviation,
            ))
    return report
