"""Precision/recall/F1 aggregation and the variant comparison report.

Per-type columns use membership attribution: an example counts under every
ambiguity type it carries, so a turn tagged {SNR, TRUNC} contributes to both
columns. The "All" column is the plain metric over the full set. Reported
relative scores are 100 * (f_x - f_baseline) / f_baseline against the
always-ask baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .types import AmbiguityType, ClarigateError, LabeledExample

COLUMNS = ("All", "ASR", "IC", "HC", "SNR", "TRUNC")


class LengthMismatch(ClarigateError):
    pass


class BaselineZero(ClarigateError):
    pass


@dataclass(frozen=True)
class Prf1:
    precision: float
    recall: float
    f1: float


def prf1(predictions, labels) -> Prf1:
    """Standard binary precision/recall/F1; degenerate cases score 0."""
    pred = np.asarray(predictions, dtype=bool)
    lab = np.asarray(labels, dtype=bool)
    if pred.shape != lab.shape or pred.ndim != 1:
        raise LengthMismatch(f"predictions {pred.shape} vs labels {lab.shape}")
    if pred.size == 0:
        raise LengthMismatch("cannot score an empty prediction set")
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    fn = int(np.sum(~pred & lab))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Prf1(precision=precision, recall=recall, f1=f1)


def per_type_prf1(
    predictions, examples: Sequence[LabeledExample]
) -> dict[str, Prf1]:
    """Metrics for "All" plus every ambiguity type present in the data."""
    pred = np.asarray(predictions, dtype=bool)
    if len(pred) != len(examples):
        raise LengthMismatch(f"{len(pred)} predictions for {len(examples)} examples")
    labels = np.asarray([ex.label for ex in examples], dtype=bool)
    out = {"All": prf1(pred, labels)}
    for kind in (t for t in AmbiguityType if t is not AmbiguityType.TOP):
        member = np.asarray([kind in ex.type_tags for ex in examples], dtype=bool)
        if member.any():
            out[kind.value] = prf1(pred[member], labels[member])
    return out


def relative_f1(f_x: float, f_baseline: float) -> float:
    """Percent F1 change against a baseline score."""
    if f_baseline <= 0.0:
        raise BaselineZero(f"baseline F1 {f_baseline} is not positive")
    return 100.0 * (f_x - f_baseline) / f_baseline


@dataclass(frozen=True)
class EvaluatedModel:
    """One row of the report: a named model's per-column metrics."""

    name: str
    flags: str
    per_type: dict[str, Prf1]

    def f1(self, column: str) -> float | None:
        entry = self.per_type.get(column)
        return None if entry is None else entry.f1


def evaluate_model(
    name: str, flags: str, predictions, examples: Sequence[LabeledExample]
) -> EvaluatedModel:
    return EvaluatedModel(name=name, flags=flags, per_type=per_type_prf1(predictions, examples))


@dataclass(frozen=True)
class Report:
    """Relative-F1 comparison of models against a shared baseline."""

    baseline: EvaluatedModel
    models: tuple[EvaluatedModel, ...]

    def relative(self, model: EvaluatedModel, column: str) -> float | None:
        fx = model.f1(column)
        fb = self.baseline.f1(column)
        if fx is None or fb is None or fb <= 0.0:
            return None
        return relative_f1(fx, fb)

    def to_text(self) -> str:
        rows = [self.baseline, *self.models]
        header = ["model", "flags", *COLUMNS]
        table = [header]
        for m in rows:
            cells = [m.name, m.flags]
            for col in COLUMNS:
                rel = self.relative(m, col)
                cells.append("-" if rel is None else f"{rel:.2f}")
            table.append(cells)
        widths = [max(len(row[i]) for row in table) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in table]
        lines.append("")
        lines.append(
            f"cells: relative F1 % vs {self.baseline.name}; "
            "per-type columns count an example under every ambiguity type it carries"
        )
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        header = ["variant", "flags"]
        for col in COLUMNS:
            header += [f"f1_{col}", f"rel_{col}"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for m in (self.baseline, *self.models):
                row: list[str] = [m.name, m.flags]
                for col in COLUMNS:
                    f1 = m.f1(col)
                    rel = self.relative(m, col)
                    row.append("" if f1 is None else f"{f1:.10f}")
                    row.append("" if rel is None else f"{rel:.10f}")
                writer.writerow(row)


def read_report_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_report(models: Sequence[EvaluatedModel], baseline: EvaluatedModel) -> Report:
    return Report(baseline=baseline, models=tuple(models))
