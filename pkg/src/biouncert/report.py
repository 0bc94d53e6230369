"""Rendering study reports as CSV, JSON and Markdown tables."""

from __future__ import annotations

import csv
import io
import json
import math

from .core import ConfidenceKind
from .evaluation import Cell, Column, StudyReport
from .stats import Variant

FORMATS = ("csv", "json", "md")


def _num(x) -> str:
    if x is None:
        return ""
    return f"{x:.6g}"


def _cell_text(cell: Cell | None) -> str:
    if cell is None:
        return ""
    if cell.failed:
        return "failed"
    return _num(cell.value)


def render_report(report: StudyReport, fmt: str = "md") -> str:
    if fmt == "md":
        return render_markdown(report)
    if fmt == "csv":
        return render_csv(report)
    if fmt == "json":
        return json.dumps(report_to_dict(report), indent=2, sort_keys=False) + "\n"
    raise ValueError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")


def render_markdown(report: StudyReport) -> str:
    labels = ["Method"] + [c.label for c in report.columns] + [report.reference_label]
    lines = [f"**{report.title}**", "", "| " + " | ".join(labels) + " |", "|" + "---|" * len(labels)]
    for method, row in report.rows.items():
        best = report.best_key(method)
        cells = []
        for col in report.columns:
            text = _cell_text(row.get(col.key))
            cells.append(f"**{text}**" if col.key == best and text else text)
        lines.append("| " + " | ".join([method] + cells + [_num(report.references.get(method))]) + " |")
    return "\n".join(lines) + "\n"


def render_csv(report: StudyReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["method"] + [c.key for c in report.columns] + ["reference"])
    for method, row in report.rows.items():
        writer.writerow([method] + [_cell_text(row.get(c.key)) for c in report.columns] + [_num(report.references.get(method))])
    return out.getvalue()


def _json_float(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return x


def report_to_dict(report: StudyReport) -> dict:
    return {
        "title": report.title,
        "metric": report.metric,
        "best": report.best,
        "reference_label": report.reference_label,
        "columns": [
            {"key": c.key, "label": c.label, "variant": c.variant.value, "kind": c.kind.value if c.kind else None}
            for c in report.columns
        ],
        "rows": [
            {
                "method": method,
                "reference": _json_float(report.references.get(method)),
                "cells": {
                    key: {"value": _json_float(cell.value), "failed": cell.failed, **cell.extra}
                    for key, cell in row.items()
                },
            }
            for method, row in report.rows.items()
        ],
    }


def report_from_dict(data: dict) -> StudyReport:
    columns = [Column(Variant(c["variant"]), ConfidenceKind(c["kind"]) if c["kind"] else None) for c in data["columns"]]
    report = StudyReport(
        title=data["title"],
        metric=data["metric"],
        columns=columns,
        reference_label=data["reference_label"],
        best=data["best"],
    )
    for row in data["rows"]:
        cells = {}
        for key, raw in row["cells"].items():
            raw = dict(raw)
            value, failed = raw.pop("value"), raw.pop("failed")
            cells[key] = Cell(value, failed, raw)
        report.add_row(row["method"], cells, row["reference"])
    return report


def parse_markdown(text: str) -> dict[str, dict[str, float | None]]:
    """Numbers of a rendered Markdown table as ``{method: {column label: value}}``."""
    rows = [line for line in text.splitlines() if line.startswith("|")]
    if len(rows) < 2:
        raise ValueError("no table found")
    header = [h.strip() for h in rows[0].strip("|").split("|")]
    out = {}
    for line in rows[2:]:
        fields = [f.strip().strip("*") for f in line.strip().strip("|").split("|")]
        values = {}
        for label, f in zip(header[1:], fields[1:]):
            values[label] = float(f) if f not in ("", "failed") else None
        out[fields[0]] = values
    return out
