"""Tabular report export with deterministic byte output."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .checkpoint import atomic_write

SIG_DIGITS = 6


@dataclass
class Report:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


def fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.{SIG_DIGITS}g}"
    if v is None:
        return ""
    return str(v)


def _json_value(v):
    if isinstance(v, float) and math.isfinite(v):
        return float(f"{v:.{SIG_DIGITS}g}")
    if isinstance(v, float):
        return fmt_value(v)
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def render_csv(report: Report) -> str:
    buf = io.StringIO()
    for k, v in report.meta.items():
        buf.write(f"# {k}: {fmt_value(v) if not isinstance(v, (list, dict)) else json.dumps(_json_value(v))}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report.columns)
    for row in report.rows:
        w.writerow([fmt_value(row.get(c)) for c in report.columns])
    return buf.getvalue()


def render_text(report: Report) -> str:
    doc = {
        "meta": _json_value(report.meta),
        "columns": list(report.columns),
        "rows": [{c: _json_value(r.get(c)) for c in report.columns} for r in report.rows],
    }
    return json.dumps(doc, indent=2) + "\n"


def export_report(report: Report, path: str | os.PathLike, format: str = "csv") -> None:
    """Write ``report`` as CSV or as structured text (JSON)."""
    if format == "csv":
        text = render_csv(report)
    elif format in ("structured-text", "json"):
        text = render_text(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    try:
        atomic_write(path, text.encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def human_count(n: int, sig: int = 3) -> str:
    """Compact count in the K/M style, e.g. 175258 -> '175K', 8288 -> '8.29K'."""
    if n < 1000:
        return str(n)
    for div, suffix in ((10**9, "B"), (10**6, "M"), (10**3, "K")):
        if n >= div:
            v = Decimal(n) / div
            exp = v.adjusted()
            q = Decimal(1).scaleb(exp - sig + 1)
            v = v.quantize(q, rounding=ROUND_HALF_UP) if exp - sig + 1 < 0 else v.quantize(Decimal(1), ROUND_HALF_UP)
            return f"{v:f}{suffix}"
    return str(n)
