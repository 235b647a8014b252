"""Metric reports, class-wise comparisons, and their JSONL/CSV serialisation."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from mtclip.errors import ReportError


@dataclasses.dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    per_class: Optional[Dict[str, float]] = None
    sample_count: int = 0
    config_digest: str = ""
    seed: int = 0
    extra: Dict[str, object] = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["per_class"] is not None:
            d["per_class"] = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                              for k, v in d["per_class"].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        d = dict(d)
        if d.get("per_class") is not None:
            d["per_class"] = {k: (float("nan") if v is None else float(v)) for k, v in d["per_class"].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ReportError(f"malformed metric report: {exc}") from exc


def write_jsonl(path, records: Sequence, append: bool = False) -> Path:
    path = Path(path)
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write((r.to_json() if isinstance(r, MetricReport) else json.dumps(r, sort_keys=True)) + "\n")
    return path


def read_reports(path) -> List[MetricReport]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(MetricReport.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
    return out


def write_csv(path, rows: Sequence[Mapping], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r.get(c, "") for c in columns})
    return path


def classwise_delta_report(report_a: MetricReport, report_b: MetricReport,
                           class_frequency: Optional[Mapping[str, int]] = None) -> List[dict]:
    """Per-class ``b - a`` alongside the pseudo-label pixel count of each class.

    Rows follow the class order of ``report_a``. A class missing from either
    report (or from ``class_frequency`` when given) is a report error.
    """
    if report_a.per_class is None or report_b.per_class is None:
        raise ReportError("both reports need per-class values")
    if set(report_a.per_class) != set(report_b.per_class):
        raise ReportError(f"class sets differ: {sorted(report_a.per_class)} vs {sorted(report_b.per_class)}")
    if class_frequency is not None and set(class_frequency) != set(report_a.per_class):
        raise ReportError("class-frequency table does not cover the same classes")
    rows = []
    for name, a in report_a.per_class.items():
        b = report_b.per_class[name]
        rows.append({
            "class": name,
            "value_a": a,
            "value_b": b,
            "delta": b - a,
            "frequency": int(class_frequency[name]) if class_frequency is not None else "",
        })
    return rows


def mean_std(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}
