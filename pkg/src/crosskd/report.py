"""Run manifests, per-fold JSON files and the CSV report.

Manifest layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "command": "cv",
      "config": {<every dotted config key>},
      "dataset": {<Dataset.manifest()>},
      "runs": {"<combo>": {"components": [...], "folds": [...], "aggregate": {...}}},
      "efficiency": {...}            # when computed
    }

Fold entries carry metrics, lambdas, seeds and per-epoch loss traces.
Wall-clock timings only go to ``folds/*.json`` so that reruns with the same
seed and config give byte-identical manifests.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import latency
from .models import StudentModel, TeacherModel

SCHEMA_VERSION = 1

REPORT_COLUMNS = (
    "run",
    "components",
    "accuracy",
    "accuracy_std",
    "macro_f1",
    "macro_f1_std",
    "params",
    "macs",
    "latency_ms",
    "teacher_params",
    "teacher_macs",
    "teacher_latency_ms",
    "params_ratio",
    "macs_ratio",
    "latency_ratio",
)


@dataclass
class Efficiency:
    student_params: int
    student_macs: int
    teacher_params: int
    teacher_macs: int
    student_latency_ms: float | None = None
    teacher_latency_ms: float | None = None

    @property
    def params_ratio(self) -> float:
        return self.teacher_params / self.student_params

    @property
    def macs_ratio(self) -> float:
        return self.teacher_macs / self.student_macs

    @property
    def latency_ratio(self) -> float | None:
        if self.student_latency_ms is None or self.teacher_latency_ms is None:
            return None
        return self.teacher_latency_ms / self.student_latency_ms

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "student_params": self.student_params,
            "student_macs": self.student_macs,
            "teacher_params": self.teacher_params,
            "teacher_macs": self.teacher_macs,
            "params_ratio": self.params_ratio,
            "macs_ratio": self.macs_ratio,
        }
        if timing:
            out.update(
                student_latency_ms=self.student_latency_ms,
                teacher_latency_ms=self.teacher_latency_ms,
                latency_ratio=self.latency_ratio,
            )
        return out


def measure_efficiency(teacher: TeacherModel, student: StudentModel, measure_latency: bool = True,
                       iters: int = 30) -> Efficiency:
    """Parameter and MAC counts, plus single-image latency measured back to back.

    The projectors are training-only and not counted.
    """
    eff = Efficiency(student.count_params(), student.macs(), teacher.count_params(), teacher.macs())
    if measure_latency:
        shape = (student.cfg.image_side, student.cfg.image_side, student.cfg.channels)
        eff.student_latency_ms = latency(student, shape, warmup_iters=5, timed_iters=iters)
        eff.teacher_latency_ms = latency(teacher, shape, warmup_iters=5, timed_iters=iters)
    return eff


@dataclass
class ReportRow:
    run: str
    components: Sequence[str]
    aggregate: dict


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6f}"


def report_text(rows: Sequence[ReportRow], eff: Efficiency | None) -> str:
    if not rows:
        raise ValueError("a report needs at least one row")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        agg = row.aggregate
        e = eff
        writer.writerow(
            [
                row.run,
                "+".join(row.components),
                _fmt(agg.get("test_accuracy_mean")),
                _fmt(agg.get("test_accuracy_std")),
                _fmt(agg.get("test_macro_f1_mean")),
                _fmt(agg.get("test_macro_f1_std")),
                _fmt(e.student_params if e else None),
                _fmt(e.student_macs if e else None),
                _fmt(e.student_latency_ms if e else None),
                _fmt(e.teacher_params if e else None),
                _fmt(e.teacher_macs if e else None),
                _fmt(e.teacher_latency_ms if e else None),
                _fmt(e.params_ratio if e else None),
                _fmt(e.macs_ratio if e else None),
                _fmt(e.latency_ratio if e else None),
            ]
        )
    return buf.getvalue()


def write_report(rows: Sequence[ReportRow], path: str | Path, eff: Efficiency | None = None) -> None:
    Path(path).write_text(report_text(rows, eff))


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj
