"""Metrics CSV, JSON summary and cross-run comparison."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

from .federation import RoundRecord

SCHEMA_VERSION = 1
COLUMNS = RoundRecord.columns()
_INT = {"round", "step", "step_round", "peak_memory_bytes", "n_selected", "n_fallback",
        "upload_scalars", "download_scalars", "flops"}
_BOOL = {"freeze", "cap_hit"}
_STR = {"mode", "stage"}
TRAINING_STAGES = ("shrinking", "growing", "baseline")


class SchemaError(ValueError):
    pass


def _fmt(name: str, v) -> str:
    if name in _BOOL:
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(records: Iterable[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for rec in records:
        w.writerow([_fmt(c, getattr(rec, c)) for c in COLUMNS])
    return buf.getvalue()


def write_metrics(records: Iterable[RoundRecord], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(records), encoding="utf-8")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != COLUMNS:
            raise SchemaError(f"{path}: header does not match metrics schema v{SCHEMA_VERSION}")
        rows = []
        for line in reader:
            row = {}
            for name, raw in zip(header, line):
                if name in _STR:
                    row[name] = raw
                elif name in _BOOL:
                    row[name] = raw == "1"
                elif name in _INT:
                    row[name] = int(raw)
                else:
                    row[name] = float(raw) if raw else math.nan
            rows.append(row)
    return rows


def _key(row: dict) -> str:
    return row["stage"] if row["stage"] == "baseline" else f"{row['stage']}:{row['step']}"


def summarize(rows: Sequence[dict], mode: str | None = None) -> dict:
    """Run summary; every value is derived from the metrics rows alone."""
    if not rows:
        return {"schema_version": SCHEMA_VERSION, "mode": mode, "na": True}
    train = [r for r in rows if r["stage"] in TRAINING_STAGES]
    distill = [r for r in rows if r["stage"] == "distill"]
    peak: dict[str, int] = {}
    part: dict[str, float] = {}
    freeze: dict[str, int] = {}
    for r in rows:
        k = _key(r)
        peak[k] = max(peak.get(k, 0), r["peak_memory_bytes"])
        if r["stage"] in TRAINING_STAGES:
            part[k] = min(part.get(k, 1.0), r["participation_rate"])
        if r["freeze"]:
            freeze[k] = r["step_round"]
    return {
        "schema_version": SCHEMA_VERSION,
        "mode": rows[0]["mode"],
        "na": False,
        "rounds": len(train),
        "distill_rounds": len(distill),
        "final_accuracy": train[-1]["test_accuracy"] if train else math.nan,
        "peak_memory_bytes": max(r["peak_memory_bytes"] for r in train) if train else 0,
        "peak_memory_per_step": peak,
        "participation_rate": min(r["participation_rate"] for r in train) if train else 0.0,
        "participation_per_step": part,
        "upload_scalars": sum(r["upload_scalars"] for r in train),
        "download_scalars": sum(r["download_scalars"] for r in train),
        "distill_upload_scalars": sum(r["upload_scalars"] for r in distill),
        "distill_download_scalars": sum(r["download_scalars"] for r in distill),
        "flops": sum(r["flops"] for r in train),
        "distill_flops": sum(r["flops"] for r in distill),
        "freeze_rounds_per_step": freeze,
        "cap_hits": sum(1 for r in rows if r["cap_hit"]),
    }


def write_summary(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


COMPARE_FIELDS = ["final_accuracy", "peak_memory_bytes", "participation_rate", "upload_scalars",
                  "download_scalars", "flops"]


def compare(paths: Sequence[str | Path]) -> list[dict]:
    """One row per metrics file, with deltas against the first file."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two metrics files")
    summaries = []
    for p in paths:
        rows = read_metrics(p)
        mode = None
        side = Path(p).with_name("summary.json")
        if not rows and side.exists():
            mode = json.loads(side.read_text()).get("mode")
        summaries.append(summarize(rows, mode))
    base = summaries[0]
    table = []
    for p, s in zip(paths, summaries):
        row = {"file": str(p), "mode": s.get("mode") or "", "na": s["na"]}
        for f in COMPARE_FIELDS:
            v = s.get(f, math.nan)
            row[f] = v
            b = base.get(f, math.nan)
            row[f"delta_{f}"] = v - b if not (s["na"] or base["na"]) else math.nan
        table.append(row)
    return table


def format_table(table: Sequence[dict]) -> str:
    cols = ["mode", "final_accuracy", "peak_memory_bytes", "participation_rate", "upload_scalars",
            "delta_final_accuracy", "delta_peak_memory_bytes"]

    def cell(v) -> str:
        if isinstance(v, float):
            return "NA" if math.isnan(v) else f"{v:.4g}"
        return str(v)

    rows = [cols] + [[cell(r[c]) if not (r["na"] and c != "mode") else "NA" for c in cols] for r in table]
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)


def compare_csv(table: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = ["file", "mode", "na"] + [c for f in COMPARE_FIELDS for c in (f, f"delta_{f}")]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in table:
        w.writerow([_fmt(c, r[c]) if c != "na" else int(r["na"]) for c in cols])
    return buf.getvalue()
