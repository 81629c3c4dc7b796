"""Class- and method-level precision/recall/F1 against ground truth, and workload reduction."""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import InputError

if TYPE_CHECKING:
    from .pipeline import AnalysisReport
    from .review import VerdictRecord

TAXONOMY_SIZE = 12
PAIR = "pair"
COMPONENT = "component"
CLASS_LEVEL = "class"
METHOD_LEVEL = "method"


class ApkMismatch(InputError):
    pass


class UnknownBehaviorId(InputError):
    pass


class BadGroundTruth(InputError):
    pass


class DanglingVerdict(InputError):
    pass


@dataclass(frozen=True)
class MetricsRow:
    level: str
    tp: int
    fp: int
    fn: int | None
    precision: float
    recall: float | None
    f1: float | None


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics_row(level: str, tp: int, fp: int, fn: int) -> MetricsRow:
    """Precision/recall/F1 with every zero denominator mapped to 0."""
    # 2tp / (2tp + fp + fn) equals the harmonic mean of p and r but is a
    # single rounding step, so it does not drift from the exact ratio
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return MetricsRow(level, tp, fp, fn, p, r, _ratio(2 * tp, 2 * tp + fp + fn))


def precision_row(level: str, tp: int, fp: int) -> MetricsRow:
    return MetricsRow(level, tp, fp, None, _ratio(tp, tp + fp), None, None)


def workload_reduction(flagged_methods: int, total_methods: int) -> float:
    """Share of methods an analyst no longer has to read: 1 - flagged/total."""
    if total_methods < 0 or flagged_methods < 0:
        raise ValueError("counts must be non-negative")
    if total_methods == 0:
        return 0.0
    if flagged_methods > total_methods:
        raise ValueError(f"flagged ({flagged_methods}) exceeds total ({total_methods})")
    return 1 - flagged_methods / total_methods


def format_percent(fraction: float) -> str:
    return f"{fraction * 100:.0f}%"


@dataclass(frozen=True)
class GroundTruth:
    apk_id: str
    class_labels: Mapping[str, frozenset[int]]
    method_labels: Mapping[tuple[str, str], frozenset[int]]

    def __post_init__(self):
        for name, ids in [*self.class_labels.items(), *self.method_labels.items()]:
            bad = sorted(i for i in ids if not 1 <= i <= TAXONOMY_SIZE)
            if bad:
                raise UnknownBehaviorId(f"{name}: unknown behavior ids {bad}")
        for (cls, sig), ids in self.method_labels.items():
            if not ids <= self.class_labels.get(cls, frozenset()):
                raise BadGroundTruth(f"method {sig!r} of {cls} has behaviors not labeled on its class")

    def class_pairs(self) -> set[tuple[str, int]]:
        return {(c, b) for c, ids in self.class_labels.items() for b in ids}

    def method_pairs(self) -> set[tuple[tuple[str, str], int]]:
        return {(k, b) for k, ids in self.method_labels.items() for b in ids}


def loads_ground_truth(text: str) -> GroundTruth:
    """Parse the JSON ground-truth format.

    ``{"apk_id": ..., "classes": {class_name: [ids]},
    "methods": [{"class_name", "signature_line", "behaviors": [ids]}]}``
    """
    try:
        data = json.loads(text)
        classes = {str(c): frozenset(int(i) for i in ids) for c, ids in data["classes"].items()}
        methods: dict[tuple[str, str], frozenset[int]] = {}
        for m in data.get("methods", []):
            key = (m["class_name"], m["signature_line"].strip())
            methods[key] = methods.get(key, frozenset()) | frozenset(int(i) for i in m["behaviors"])
        apk_id = data["apk_id"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise BadGroundTruth(f"malformed ground truth: {exc}") from exc
    return GroundTruth(apk_id, classes, methods)


def load_ground_truth(path: str | Path) -> GroundTruth:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"ground truth not found: {path}")
    return loads_ground_truth(path.read_text(encoding="utf-8"))


def predicted_class_pairs(report: AnalysisReport) -> set[tuple[str, int]]:
    return {(f.class_name, f.behavior_id) for f in report.findings}


def predicted_method_pairs(report: AnalysisReport) -> set[tuple[tuple[str, str], int]]:
    """Method predictions; unmatched lines get a key no truth entry can equal."""
    out = set()
    for f in report.findings:
        for m in f.methods:
            sig = m.resolved_signature if m.resolved_signature is not None else "\0unmatched:" + m.reported_method_line
            out.add(((f.class_name, sig), f.behavior_id))
    return out


def _confusion(pred: set, truth: set, unit: str) -> tuple[int, int, int]:
    if unit == COMPONENT:
        pred = {k for k, _ in pred}
        truth = {k for k, _ in truth}
    elif unit != PAIR:
        raise ValueError(f"unknown count unit {unit!r}")
    return len(pred & truth), len(pred - truth), len(truth - pred)


def score(report: AnalysisReport, truth: GroundTruth, count_unit: str = PAIR) -> tuple[MetricsRow, MetricsRow]:
    """Score at class and method level.

    With the default ``pair`` unit a prediction counts as correct only when
    the component *and* the behavior match; ``component`` ignores behaviors.
    """
    if report.apk_id != truth.apk_id:
        raise ApkMismatch(f"report is for {report.apk_id!r}, ground truth for {truth.apk_id!r}")
    c = _confusion(predicted_class_pairs(report), truth.class_pairs(), count_unit)
    m = _confusion(predicted_method_pairs(report), truth.method_pairs(), count_unit)
    return metrics_row(CLASS_LEVEL, *c), metrics_row(METHOD_LEVEL, *m)


def score_from_verdicts(report: AnalysisReport, verdicts: Iterable[VerdictRecord]) -> tuple[MetricsRow, MetricsRow]:
    """Precision-only scoring from analyst accept/reject decisions; ``unsure`` is ignored."""
    class_keys = {(f.class_name, f.behavior_id) for f in report.findings}
    method_keys = {
        (f.class_name, f.behavior_id, m.resolved_signature or m.reported_method_line)
        for f in report.findings
        for m in f.methods
    }
    counts = {CLASS_LEVEL: [0, 0], METHOD_LEVEL: [0, 0]}
    for v in verdicts:
        if v.signature_line is None:
            level, known = CLASS_LEVEL, (v.class_name, v.behavior_id) in class_keys
        else:
            level, known = METHOD_LEVEL, (v.class_name, v.behavior_id, v.signature_line) in method_keys
        if not known:
            raise DanglingVerdict(f"verdict refers to a finding not in the report: {v.key}")
        if v.decision == "accepted":
            counts[level][0] += 1
        elif v.decision == "rejected":
            counts[level][1] += 1
    return precision_row(CLASS_LEVEL, *counts[CLASS_LEVEL]), precision_row(METHOD_LEVEL, *counts[METHOD_LEVEL])


def _cell(x: float | None) -> str:
    return "-" if x is None else f"{x:.2f}"


def format_table(rows: Sequence[tuple[str, str, MetricsRow, MetricsRow]]) -> str:
    """Render ``(method, model, class_row, method_row)`` tuples as a C-/M- metrics table."""
    header = ["Method", "Model", "C-Prec", "C-Rec", "C-F1", "M-Prec", "M-Rec", "M-F1"]
    body = [
        [method, model, *(_cell(x) for x in (c.precision, c.recall, c.f1, m.precision, m.recall, m.f1))]
        for method, model, c, m in rows
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"


def metrics_to_dict(class_row: MetricsRow, method_row: MetricsRow) -> dict:
    return {
        row.level: {
            "tp": row.tp,
            "fp": row.fp,
            "fn": row.fn,
            "precision": row.precision,
            "recall": row.recall,
            "f1": row.f1,
        }
        for row in (class_row, method_row)
    }
