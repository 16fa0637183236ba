"""Deterministic writers for reports, histories, predictions and series.

Identical inputs must produce identical bytes: floats are serialized
with repr (shortest round-trip form), JSON keys are sorted, and nothing
here records timestamps or absolute paths.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .evaluation import EvalReport

REPORT_COLUMNS = [
    "dataset_id",
    "adapter_kind",
    "seed",
    "base_share",
    "shots",
    "base_acc",
    "new_acc",
    "all_acc",
    "harmonic_mean",
    "diff_pct",
    "param_count",
    "config_hash",
    "noise_tag",
]

PREDICTION_COLUMNS = ["split", "index", "true_class", "predicted_class", "correct"]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    path.write_text(buffer.getvalue())


def write_report_csv(reports: list[EvalReport], path, labels: list[str] | None = None) -> None:
    columns = (["label"] if labels else []) + REPORT_COLUMNS
    rows = []
    for i, report in enumerate(reports):
        row = report.to_row()
        if labels:
            row["label"] = labels[i]
        rows.append(row)
    _write_csv(Path(path), columns, rows)


def _fmt(value, digits=2, signed=False) -> str:
    if value is None:
        return "-"
    spec = f"{{:+.{digits}f}}" if signed else f"{{:.{digits}f}}"
    return spec.format(value)


def write_report_table(reports: list[EvalReport], path, labels: list[str] | None = None) -> None:
    """Aligned text table with Base/New/H/Diff%/All columns."""
    headers = ["row", "base", "new", "H", "diff%", "all", "params"]
    rows = []
    for i, r in enumerate(reports):
        rows.append(
            [
                labels[i] if labels else r.adapter_kind,
                _fmt(r.base_acc),
                _fmt(r.new_acc),
                _fmt(r.harmonic_mean),
                _fmt(r.diff_pct, digits=0, signed=True),
                _fmt(r.all_acc),
                str(r.param_count),
            ]
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_history_jsonl(history: list[dict], path) -> None:
    lines = [json.dumps(record, sort_keys=True) for record in history]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_predictions_csv(records: list[dict], path) -> None:
    _write_csv(Path(path), PREDICTION_COLUMNS, records)


def write_series_csv(rows: list[dict], columns: list[str], path) -> None:
    """Plot-ready series (e.g. accuracy vs base-class share)."""
    _write_csv(Path(path), columns, rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        columns = next(reader)
        return [dict(zip(columns, row)) for row in reader]
