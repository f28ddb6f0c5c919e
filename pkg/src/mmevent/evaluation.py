"""Precision / recall / F1 scoring and Table-style report emission."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import LABELS, NUM_CLASSES, EventLabel
from .errors import ContractError

AVERAGING = ("weighted", "macro")
SECTIONS = {"supervised": "Supervised Approaches", "generative": "Generative Approaches"}


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class Aggregate:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    per_class: dict[EventLabel, ClassMetrics]
    aggregate: dict[str, Aggregate]
    confusion: np.ndarray  # rows gold, columns predicted
    abstained: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=int))
    averaging: str = "weighted"

    @property
    def n(self) -> int:
        return int(self.confusion.sum() + self.abstained.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion)) / self.n if self.n else 0.0

    @property
    def precision(self) -> float:
        return self.aggregate[self.averaging].precision

    @property
    def recall(self) -> float:
        return self.aggregate[self.averaging].recall

    @property
    def f1(self) -> float:
        return self.aggregate[self.averaging].f1

    def to_dict(self) -> dict:
        return {
            "averaging": self.averaging,
            "n": self.n,
            "accuracy": self.accuracy,
            "aggregate": {k: vars(a) for k, a in self.aggregate.items()},
            "per_class": {lab.display: vars(m) for lab, m in self.per_class.items()},
            "confusion": self.confusion.tolist(),
            "abstained": self.abstained.tolist(),
            "labels": [lab.display for lab in LABELS],
        }


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return _ratio(2 * p * r, p + r)


def confusion_counts(pairs: Iterable[tuple[Optional[EventLabel], EventLabel]]):
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    abstained = np.zeros(NUM_CLASSES, dtype=np.int64)
    for pred, gold in pairs:
        g = EventLabel.parse(gold).index
        if pred is None:
            abstained[g] += 1
        else:
            confusion[g, EventLabel.parse(pred).index] += 1
    return confusion, abstained


def report_from_counts(confusion: np.ndarray, abstained: np.ndarray,
                       averaging: str = "weighted") -> MetricsReport:
    """Build a report from a gold-by-predicted count matrix plus per-gold abstention counts.

    Abstentions are wrong answers for recall but never count as a predicted
    positive. Macro averages run over labels that occur in gold or in the
    predictions; weighted averages weight each label by its gold support.
    """
    if averaging not in AVERAGING:
        raise ContractError(f"averaging must be one of {AVERAGING}")
    confusion = np.asarray(confusion, dtype=np.int64)
    abstained = np.asarray(abstained, dtype=np.int64)
    tp = np.diag(confusion)
    predicted = confusion.sum(axis=0)
    support = confusion.sum(axis=1) + abstained
    n = int(support.sum())
    if n == 0:
        raise ContractError("cannot score an empty set of predictions")

    per_class = {}
    for i, lab in enumerate(LABELS):
        p = _ratio(tp[i], predicted[i])
        r = _ratio(tp[i], support[i])
        per_class[lab] = ClassMetrics(p, r, _f1(p, r), int(support[i]))

    present = [lab for i, lab in enumerate(LABELS) if support[i] or predicted[i]]
    macro = Aggregate(*(float(np.mean([getattr(per_class[lab], m) for lab in present]))
                        for m in ("precision", "recall", "f1")))
    # divide once at the end so a perfect run scores exactly 1.0
    weighted = Aggregate(
        float(sum(support[i] * per_class[lab].precision for i, lab in enumerate(LABELS))) / n,
        # support-weighted recall collapses to sum(TP) / N; compute it that way so it equals accuracy
        float(tp.sum()) / n,
        float(sum(support[i] * per_class[lab].f1 for i, lab in enumerate(LABELS))) / n,
    )
    return MetricsReport(per_class, {"macro": macro, "weighted": weighted}, confusion,
                         abstained, averaging)


def score(pairs: Iterable[tuple[Optional[EventLabel], EventLabel]],
          averaging: str = "weighted") -> MetricsReport:
    """Score ``(predicted, gold)`` pairs; a predicted value of ``None`` is an abstention."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("cannot score an empty set of predictions")
    return report_from_counts(*confusion_counts(pairs), averaging=averaging)


def merge(a: MetricsReport, b: MetricsReport) -> MetricsReport:
    return report_from_counts(a.confusion + b.confusion, a.abstained + b.abstained, a.averaging)


# --- report emission -------------------------------------------------------------

def _entries(reports) -> list[tuple[str, MetricsReport, str]]:
    if isinstance(reports, Mapping):
        reports = list(reports.items())
    out = []
    for entry in reports:
        name, rep, *rest = entry
        section = rest[0] if rest else "supervised"
        if section not in SECTIONS:
            raise ContractError(f"section must be one of {list(SECTIONS)}, got {section!r}")
        out.append((name or "(unnamed)", rep, section))
    if not out:
        raise ContractError("emit_report needs at least one report")
    return out


def emit_report(reports, fmt: str = "markdown-table", averaging: str | None = None) -> str:
    """Render model rows with 4-decimal P/R/F1, grouped under Supervised/Generative headers.

    ``reports`` is a sequence of ``(name, report)`` or ``(name, report, section)``
    tuples, or a mapping of name to report; order is preserved within a section.
    """
    entries = _entries(reports)

    def nums(rep: MetricsReport):
        agg = rep.aggregate[averaging or rep.averaging]
        return [f"{agg.precision:.4f}", f"{agg.recall:.4f}", f"{agg.f1:.4f}"]

    sections = [s for s in SECTIONS if any(e[2] == s for e in entries)]
    if fmt == "markdown-table":
        lines = ["| Model | Precision | Recall | F1 |", "|---|---|---|---|"]
        for s in sections:
            lines.append(f"| **{SECTIONS[s]}** | | | |")
            lines += [f"| {name} | " + " | ".join(nums(rep)) + " |"
                      for name, rep, sec in entries if sec == s]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["section", "model", "precision", "recall", "f1"])
        for s in sections:
            for name, rep, sec in entries:
                if sec == s:
                    w.writerow([SECTIONS[s], name, *nums(rep)])
        return buf.getvalue()
    raise ContractError(f"unknown report format {fmt!r}; use 'markdown-table' or 'csv'")


def write_predictions(path: str | Path, records: Sequence[Mapping]) -> None:
    """Per-instance dump: one JSON object per line (id, gold, predicted, probs or raw text)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
