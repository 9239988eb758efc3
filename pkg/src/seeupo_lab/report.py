"""Experiment reports: deterministic CSV time series plus a JSON summary."""
from __future__ import annotations

import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

REPORT_SCHEMA = "seeupo_lab.report/1"
ADVANTAGE_SCHEMA = "seeupo_lab.advantages/1"
BASE_COLUMNS = ["iteration", "J_exact", "gap_to_J_star", "grad_norm", "clip_fraction", "adv_mean", "adv_std"]
ADVANTAGE_COLUMNS = ["trajectory", "turn", "estimator", "raw", "normalized", "normalization",
                     "group_std", "batch_mean", "batch_std"]


def fmt(x) -> str:
    """Stable text form: 17 significant digits for floats, blank for missing."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return format(x, ".17g")
    return str(x)


def csv_text(schema: str, columns: list, rows: list) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(fmt(row.get(c)) for c in columns) + "\n")
    return buf.getvalue()


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _clean(obj):
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def json_text(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"


@dataclass
class ExperimentReport:
    config: dict
    rows: list = field(default_factory=list)
    j_star: float | None = None
    extra_columns: list = field(default_factory=list)
    advantage_rows: list = field(default_factory=list)

    @property
    def columns(self) -> list:
        return BASE_COLUMNS + self.extra_columns

    def add_row(self, row: dict) -> None:
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("rows must be added in increasing iteration order")
        if self.j_star is not None:
            row["gap_to_J_star"] = self.j_star - row["J_exact"]
        self.rows.append(row)

    @property
    def returns(self) -> list:
        return [r["J_exact"] for r in self.rows]

    def summary(self) -> dict:
        js = self.returns
        drops = [a - b for a, b in zip(js, js[1:])]
        return {
            "iterations": len(js) - 1,
            "initial_J": js[0] if js else None,
            "final_J": js[-1] if js else None,
            "J_star": self.j_star,
            "final_gap": None if self.j_star is None or not js else self.j_star - js[-1],
            "max_decrease": max(drops) if drops else 0.0,
        }

    def to_csv(self) -> str:
        return csv_text(REPORT_SCHEMA, self.columns, self.rows)

    def advantages_csv(self) -> str:
        return csv_text(ADVANTAGE_SCHEMA, ADVANTAGE_COLUMNS, self.advantage_rows)

    def to_json(self) -> str:
        return json_text({"schema": REPORT_SCHEMA, "config": self.config, "summary": self.summary(),
                          "columns": self.columns})
