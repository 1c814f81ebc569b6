from enum import Enum
from typing import Literal

from pydantic import BaseModel, Field, computed_field, model_validator


class RopeMode(str, Enum):
    POST_ROPE = "post-rope"
    PRE_ROPE = "pre-rope"


class ReportFormat(str, Enum):
    JSON = "json"
    CSV = "csv"


class TraceManifest(BaseModel):
    layers: int = Field(ge=1, description="Number of attention layers")
    kv_heads: int = Field(ge=1, description="KV heads per layer")
    query_heads: int = Field(ge=1, description="Query heads per layer; a multiple of kv_heads (GQA)")
    head_dim: int = Field(ge=1, description="Per-head hidden dimension d")
    tokens: int = Field(ge=0, description="Tokens in the trace (prompt + response)")
    prompt_len: int = Field(ge=0, description="Leading tokens that form the prompt")
    dtype: Literal["f32"] = "f32"
    layout: Literal["row-major"] = "row-major"
    endianness: Literal["little"] = "little"

    @model_validator(mode="after")
    def _check_shapes(self) -> "TraceManifest":
        if self.query_heads % self.kv_heads:
            raise ValueError(
                f"query_heads ({self.query_heads}) must be a multiple of kv_heads ({self.kv_heads})"
            )
        if self.prompt_len > self.tokens:
            raise ValueError(f"prompt_len ({self.prompt_len}) exceeds tokens ({self.tokens})")
        return self

    @property
    def queries_per_kv_head(self) -> int:
        return self.query_heads // self.kv_heads

    def blob_shape(self, kind: str) -> tuple[int, int, int]:
        heads = self.query_heads if kind == "q" else self.kv_heads
        return (self.tokens, heads, self.head_dim)


class SyntheticSpec(BaseModel):
    true_rank: int = Field(ge=1, description="Rank of the noiseless query structure")
    noise_level: float = Field(ge=0.0, lt=1.0, description="Gaussian noise relative to the unit-RMS signal")
    seed: int = Field(ge=0, description="PCG64 seed")
    tokens: int = Field(ge=0)
    dim: int = Field(ge=1)
    layers: int = Field(default=1, ge=1)
    kv_heads: int = Field(default=1, ge=1)
    query_heads: int = Field(default=1, ge=1)
    prompt_len: int | None = Field(default=None, ge=0, description="Defaults to half the tokens")
    normalize_queries: bool = False

    @model_validator(mode="after")
    def _check_rank(self) -> "SyntheticSpec":
        if self.true_rank > self.dim:
            raise ValueError(f"true_rank ({self.true_rank}) must not exceed dim ({self.dim})")
        return self


class SubspaceManifest(BaseModel):
    dim: int = Field(ge=1)
    rank: int = Field(ge=0, description="Effective (numerical) rank")
    requested_rank: int = Field(ge=1)
    dtype: Literal["f64"] = "f64"
    endianness: Literal["little"] = "little"


class HeadLayout(BaseModel):
    """Row counts of one (layer, head) section in the cache blobs."""
    layer: int
    head: int
    token_count: int = Field(ge=0)
    key_groups: int = Field(ge=0, description="Quantized key token groups (G tokens each)")
    key_residual: int = Field(ge=0, description="Full-precision key rows")
    value_tokens: int = Field(ge=0, description="Quantized value tokens")
    value_residual: int = Field(ge=0, description="Full-precision value rows")


class CacheManifest(BaseModel):
    format_version: int = 1
    config: dict = Field(description="CacheConfig fields")
    layers: int = Field(ge=0)
    kv_heads: int = Field(ge=0)
    head_dim: int = Field(ge=1)
    heads: list[HeadLayout] = Field(default_factory=list)
    blobs: dict[str, int] = Field(default_factory=dict, description="Blob file name -> byte size")
    use_rope: bool = Field(default=False, description="Whether the trace was rotated (RoPE) when the cache was built")


# -- Reports --


class CheckResult(BaseModel):
    name: str
    instances: int = Field(ge=0)
    max_residual: float = Field(description="Largest error seen across the instances")
    tolerance: float
    passed: bool
    failing_seed: int | None = Field(default=None, description="Seed of the first instance over tolerance")


class ScalingReport(BaseModel):
    dims: list[int]
    block: int
    downdate_seconds: list[float] = Field(description="Median precompute time per dim")
    naive_seconds: list[float] = Field(description="Median per-t direct inversion time per dim")
    downdate_slope: float = Field(description="Log-log slope of the downdate path")
    naive_slope: float = Field(description="Log-log slope of the naive path")
    downdate_within_cubic: bool = Field(description="downdate_slope <= 3.3")
    naive_above_cubic: bool = Field(description="naive_slope >= 3.7")


class WinRateReport(BaseModel):
    trials: int
    dim: int
    rank: int
    block: int
    lam: float
    win_rate: float = Field(description="Share of trials where ‖Q̂(k − k̂)‖ at lambda is <= its value at 0")


class VerifyReport(BaseModel):
    seed: int
    checks: list[CheckResult] = Field(default_factory=list)
    scaling: ScalingReport | None = None
    win_rate: WinRateReport | None = None

    @computed_field
    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @computed_field
    @property
    def failing_seed(self) -> int | None:
        for check in self.checks:
            if check.failing_seed is not None:
                return check.failing_seed
        return None


class MemoryReport(BaseModel):
    batch: int
    seq_len: int
    layers: int
    heads: int
    head_dim: int
    bytes_per_param: int
    fp_bytes: int = Field(description="2·b·l·L·h·d·p")
    fp_gib: float
    quantized_bytes: int = Field(description="Serialized size of the quantized cache")
    ratio: float = Field(description="quantized_bytes / FP16 bytes")


class QuantizeSummary(BaseModel):
    tokens: int
    prompt_len: int
    layers: int
    kv_heads: int
    head_dim: int
    quantized_key_tokens: int = Field(description="Per head")
    residual_key_tokens: int
    quantized_value_tokens: int
    residual_value_tokens: int
    cache_bytes: int = Field(description="Sum of the serialized blob sizes")
    fp16_bytes: int
    ratio: float
    timings_ms: dict[str, float] = Field(default_factory=dict)


class CurvePoint(BaseModel):
    layer: int
    head: int
    rank: int
    deviation: float


class CurveReport(BaseModel):
    source: Literal["prompt", "all"]
    ranks: list[int]
    points: list[CurvePoint] = Field(default_factory=list)
    mean: list[float] = Field(default_factory=list, description="Mean over heads, one per rank")
