from .attention import AttentionConfig, attend, attend_reference, softmax, deviation_bound
from .models import ComparisonReport, DeviationReport, QuantizerSummary, StepDeviation, SweepReport
from .replay import build_cache, compare_quantizers, replay, sweep
from .report import render, to_csv, write_report

__all__ = [
    "AttentionConfig",
    "attend",
    "attend_reference",
    "softmax",
    "deviation_bound",
    "ComparisonReport",
    "DeviationReport",
    "QuantizerSummary",
    "StepDeviation",
    "SweepReport",
    "build_cache",
    "compare_quantizers",
    "replay",
    "sweep",
    "render",
    "to_csv",
    "write_report",
]
