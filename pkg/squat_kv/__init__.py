from .cache import KVCache, append_decode, materialize, prefill, prefill_batch
from .config import CacheConfig, RunConfig
from .memory import estimate_memory, estimate_quantized_size
from .models import RopeMode, SyntheticSpec, TraceManifest
from .quant import QuantizedGroup, QuantParams, dequantize_group, quantize_group
from .rope import apply_rope
from .solver import SolverState, SingularBlockError, downdate, kkt_oracle, precompute, quantize_key_block
from .subspace import QuerySubspace, build_subspace, deviation
from .trace_io import Trace, TraceFormatError, gen_synthetic, read_cache, read_trace, write_cache, write_trace

__all__ = [
    "KVCache",
    "append_decode",
    "materialize",
    "prefill",
    "prefill_batch",
    "CacheConfig",
    "RunConfig",
    "estimate_memory",
    "estimate_quantized_size",
    "RopeMode",
    "SyntheticSpec",
    "TraceManifest",
    "QuantizedGroup",
    "QuantParams",
    "dequantize_group",
    "quantize_group",
    "apply_rope",
    "SolverState",
    "SingularBlockError",
    "downdate",
    "kkt_oracle",
    "precompute",
    "quantize_key_block",
    "QuerySubspace",
    "build_subspace",
    "deviation",
    "Trace",
    "TraceFormatError",
    "gen_synthetic",
    "read_cache",
    "read_trace",
    "write_cache",
    "write_trace",
]
