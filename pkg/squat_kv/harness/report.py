"""JSON and CSV emitters for harness reports.

CSV files start with a `# squat-kv report v<N>` comment line followed by the fixed
columns step,layer,head,metric,value. Aggregate rows use -1 for step, layer and head.
"""

import csv
import io
import logging
from pathlib import Path
from typing import Iterator, Optional, Union

from pydantic import BaseModel

from ..models import CurveReport, ReportFormat
from .models import REPORT_VERSION, ComparisonReport, DeviationReport, SweepReport

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "layer", "head", "metric", "value")
CSV_HEADER = f"# squat-kv report v{REPORT_VERSION}"

Row = tuple[int, int, int, str, float]

STEP_METRICS = (
    "actual_deviation",
    "bound_stated",
    "bound_proof",
    "value_error_sum",
    "key_ip_error_sum",
)
SUMMARY_METRICS = (
    "mean_score_diff",
    "p95_score_diff",
    "max_score_diff",
    "mean_deviation",
    "max_deviation",
    "bound_violations",
)


def _deviation_rows(report: DeviationReport, prefix: str = "") -> Iterator[Row]:
    for s in report.steps:
        for metric in STEP_METRICS:
            yield s.step, s.layer, s.head, prefix + metric, getattr(s, metric)
        for key, value in enumerate(s.score_abs_diff):
            yield s.step, s.layer, s.head, f"{prefix}score_abs_diff[{key}]", value
        for key, value in enumerate(s.logit_abs_diff):
            yield s.step, s.layer, s.head, f"{prefix}logit_abs_diff[{key}]", value
    for metric in SUMMARY_METRICS:
        yield -1, -1, -1, prefix + metric, float(getattr(report.summary, metric))


def csv_rows(report: BaseModel) -> Iterator[Row]:
    if isinstance(report, DeviationReport):
        yield from _deviation_rows(report)
    elif isinstance(report, ComparisonReport):
        yield from _deviation_rows(report.squat, "squat.")
        yield from _deviation_rows(report.baseline, "baseline.")
        yield -1, -1, -1, "mean_score_diff_delta", report.mean_score_diff_delta
    elif isinstance(report, SweepReport):
        for cell in report.cells:
            tag = f"lam={cell.lam:g};rank={cell.rank};"
            yield -1, -1, -1, tag + "mean_score_diff", cell.mean_score_diff
            yield -1, -1, -1, tag + "p95_score_diff", cell.p95_score_diff
            yield -1, -1, -1, tag + "mean_deviation", cell.mean_deviation
    elif isinstance(report, CurveReport):
        for p in report.points:
            yield -1, p.layer, p.head, f"deviation@r={p.rank}", p.deviation
        for rank, value in zip(report.ranks, report.mean):
            yield -1, -1, -1, f"deviation@r={rank}", value
    else:
        raise ValueError(f"no CSV layout for {type(report).__name__}")


def to_csv(report: BaseModel) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for step, layer, head, metric, value in csv_rows(report):
        writer.writerow((step, layer, head, metric, repr(float(value))))
    return buf.getvalue()


def render(report: BaseModel, fmt: Union[ReportFormat, str] = ReportFormat.JSON) -> str:
    fmt = ReportFormat(fmt)
    if fmt == ReportFormat.CSV:
        return to_csv(report)
    return report.model_dump_json(indent=2)


def write_report(
    report: BaseModel,
    path: Optional[Union[str, Path]],
    fmt: Union[ReportFormat, str] = ReportFormat.JSON,
) -> str:
    """Render the report; write it to `path` when given. Returns the rendered text."""
    text = render(report, fmt)
    if path is not None:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        log.info("Report written to %s", out)
    return text
