from pydantic import BaseModel, Field

REPORT_VERSION = 1


class StepDeviation(BaseModel):
    step: int = Field(description="Decode position of the query")
    layer: int
    head: int = Field(description="Query head")
    actual_deviation: float = Field(description="‖attend(K, V) − attend(K̂, V̂)‖₂")
    bound_stated: float
    bound_proof: float = Field(description="‖V̂‖_F/(2√d)·Σ|q·Δk| + Σ‖Δv‖")
    value_error_sum: float
    key_ip_error_sum: float
    score_abs_diff: list[float] = Field(default_factory=list, description="Post-softmax |p − p̂| per visible key")
    logit_abs_diff: list[float] = Field(default_factory=list, description="Pre-softmax |a − â| per visible key")


class QuantizerSummary(BaseModel):
    label: str
    lam: float
    rank: int
    mean_score_diff: float
    p95_score_diff: float
    max_score_diff: float
    mean_deviation: float
    max_deviation: float
    bound_violations: int = Field(description="Steps where actual_deviation > bound_proof + 1e-6")


class DeviationReport(BaseModel):
    version: int = REPORT_VERSION
    config: dict = Field(description="CacheConfig fields")
    use_rope: bool
    steps: list[StepDeviation] = Field(default_factory=list)
    summary: QuantizerSummary


class ComparisonReport(BaseModel):
    version: int = REPORT_VERSION
    squat: DeviationReport
    baseline: DeviationReport
    mean_score_diff_delta: float = Field(description="baseline mean − squat mean; positive when squat preserves scores better")


class SweepCell(BaseModel):
    lam: float
    rank: int
    mean_score_diff: float
    p95_score_diff: float
    mean_deviation: float


class SweepReport(BaseModel):
    version: int = REPORT_VERSION
    lams: list[float]
    ranks: list[int]
    cells: list[SweepCell] = Field(default_factory=list)
