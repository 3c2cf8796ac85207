"""Report emitters: one row per source group plus an overall row, in
markdown, CSV, or JSON.

Numbers are carried at full precision and rounded only here: percents and
interval endpoints to two decimals, ties away from zero, with intervals
printed in the "(lo-hi)" style.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .pipeline import RunState
from .stats import SuccessSummary, round_half_away, summarize

__all__ = ["ReportDocument", "build_report", "render"]

REPORT_FORMATS = ("markdown", "csv", "json")
_METRICS = ("zero_shot", "reasoning_only", "combined")
_METRIC_TITLES = {
    "zero_shot": "Zero-Shot",
    "reasoning_only": "Reasoning-Only",
    "combined": "Zero-Shot+Reasoning",
}


@dataclass(frozen=True)
class ReportDocument:
    format: str
    rows: tuple[SuccessSummary, ...]
    metadata: dict

    def __post_init__(self) -> None:
        if self.format not in REPORT_FORMATS:
            raise ValueError(f"unknown report format {self.format!r}")


def build_report(
    state: RunState,
    format: str = "markdown",
    alpha: float = 0.05,
    dataset_hash: str = "",
) -> ReportDocument:
    rows = list(summarize(state, "by_source", alpha))
    rows.extend(summarize(state, "overall", alpha))
    metadata = {
        "run_id": state.run_id,
        "dataset_hash": dataset_hash,
        "config": state.config.to_json(),
        "alpha": alpha,
    }
    return ReportDocument(format=format, rows=tuple(rows), metadata=metadata)


def _percent(rate: float) -> str:
    return f"{round_half_away(rate * 100.0, 2):.2f}%"


def _interval(summary: SuccessSummary) -> str:
    lo = round_half_away(summary.ci_low, 2)
    hi = round_half_away(summary.ci_high, 2)
    return f"({lo:.2f}-{hi:.2f})"


def _rows_by_group(rows: tuple[SuccessSummary, ...]) -> dict[str, dict[str, SuccessSummary]]:
    grouped: dict[str, dict[str, SuccessSummary]] = {}
    for row in rows:
        grouped.setdefault(row.group, {})[row.metric] = row
    return grouped


def _render_markdown(doc: ReportDocument) -> str:
    grouped = _rows_by_group(doc.rows)
    header = ["Group", "n"]
    for metric in _METRICS:
        header.extend([_METRIC_TITLES[metric], "95% CI"])
    lines = [
        f"# Run {doc.metadata['run_id']}",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    groups = [g for g in grouped if g != "overall"] + (["overall"] if "overall" in grouped else [])
    for group in groups:
        per_metric = grouped[group]
        n = next(iter(per_metric.values())).n
        cells = [group, str(n)]
        for metric in _METRICS:
            row = per_metric[metric]
            cells.extend([f"{row.x}/{row.n} = {_percent(row.rate)}", _interval(row)])
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def _render_csv(doc: ReportDocument) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["group", "metric", "n", "x", "percent", "ci_low", "ci_high", "alpha"])
    for row in doc.rows:
        writer.writerow(
            [
                row.group,
                row.metric,
                row.n,
                row.x,
                _percent(row.rate),
                f"{round_half_away(row.ci_low, 2):.2f}",
                f"{round_half_away(row.ci_high, 2):.2f}",
                row.alpha,
            ]
        )
    return buffer.getvalue()


def _render_json(doc: ReportDocument) -> str:
    # machine-readable: full precision, no display rounding
    payload = {
        "metadata": doc.metadata,
        "rows": [
            {
                "group": row.group,
                "metric": row.metric,
                "n": row.n,
                "x": row.x,
                "rate": row.rate,
                "ci_low": row.ci_low,
                "ci_high": row.ci_high,
                "alpha": row.alpha,
            }
            for row in doc.rows
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def render(doc: ReportDocument) -> str:
    if doc.format == "markdown":
        return _render_markdown(doc)
    if doc.format == "csv":
        return _render_csv(doc)
    return _render_json(doc)
