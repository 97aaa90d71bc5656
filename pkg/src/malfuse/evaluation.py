"""Confusion-matrix metrics, per-family detection tables, and timing stats.

Per-class precision/recall/F1 come from one-vs-rest TP/FP/FN counts with
the 0/0 := 0 convention (flagged as undefined rather than silently zero);
accuracy is trace/total. Both macro and weighted averages are always
computed so reports can be compared under either convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, EmptyMatrix, LabelOutOfRange


@dataclass
class ConfusionMatrix:
    """counts[t][p]: samples of true family t+1 predicted as family p+1."""

    counts: np.ndarray  # int64 (classes, classes)
    classes: int = 9

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.classes, self.classes):
            raise ValueError(f"counts shape {self.counts.shape} != {(self.classes, self.classes)}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    family: int
    precision: float
    recall: float
    f1: float
    support: int
    precision_defined: bool = True
    recall_defined: bool = True


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str  # "macro" | "weighted"
    per_class: tuple[ClassMetrics, ...]


@dataclass(frozen=True)
class TimingStats:
    mean: float
    p50: float
    p95: float


def confusion(predictions, classes: int = 9) -> ConfusionMatrix:
    """Tally (true family, predicted family) pairs, labels in 1..classes."""
    counts = np.zeros((classes, classes), dtype=np.int64)
    for true, pred in predictions:
        if not (1 <= true <= classes and 1 <= pred <= classes):
            raise LabelOutOfRange(f"pair ({true}, {pred}) outside 1..{classes}")
        counts[true - 1, pred - 1] += 1
    return ConfusionMatrix(counts, classes)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, False
    return num / den, True


def metrics(cm: ConfusionMatrix, averaging: str = "macro") -> Metrics:
    """Accuracy, precision, recall, F1 under macro or support-weighted averaging."""
    if averaging not in ("macro", "weighted"):
        raise ValueError(f"averaging {averaging!r} must be 'macro' or 'weighted'")
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    counts = cm.counts
    per_class = []
    for c in range(cm.classes):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum() - tp)
        fn = int(counts[c, :].sum() - tp)
        precision, p_def = _ratio(tp, tp + fp)
        recall, r_def = _ratio(tp, tp + fn)
        # integer form of 2PR/(P+R): identical algebraically, exact on
        # ratios like 8/10 where the float route drifts by one ulp
        f1 = 2.0 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else 0.0
        per_class.append(
            ClassMetrics(
                family=c + 1,
                precision=precision,
                recall=recall,
                f1=f1,
                support=tp + fn,
                precision_defined=p_def,
                recall_defined=r_def,
            )
        )
    accuracy = float(np.trace(counts)) / total
    if averaging == "macro":
        avg_p = sum(m.precision for m in per_class) / cm.classes
        avg_r = sum(m.recall for m in per_class) / cm.classes
        avg_f = sum(m.f1 for m in per_class) / cm.classes
    else:
        avg_p = sum(m.precision * m.support for m in per_class) / total
        avg_r = sum(m.recall * m.support for m in per_class) / total
        avg_f = sum(m.f1 * m.support for m in per_class) / total
    return Metrics(accuracy, avg_p, avg_r, avg_f, averaging, tuple(per_class))


def family_table(runs, kind: str = "recall") -> dict[str, list[float | None]]:
    """Per-family detection table: model label -> one value per family.

    kind 'recall' reports the detection rate (diagonal / row sum); kind 'f1'
    reports the per-family F1. Families absent from the evaluation map to
    None rather than 0.
    """
    if kind not in ("recall", "f1"):
        raise ValueError(f"kind {kind!r} must be 'recall' or 'f1'")
    table: dict[str, list[float | None]] = {}
    for label, cm in runs:
        m = metrics(cm, "macro")
        row: list[float | None] = []
        for c in m.per_class:
            if c.support == 0:
                row.append(None)
            else:
                row.append(c.recall if kind == "recall" else c.f1)
        table[label] = row
    return table


def timing_report(elapsed) -> TimingStats:
    """Mean plus nearest-rank p50/p95 of per-sample prediction seconds."""
    values = sorted(float(v) for v in elapsed)
    if not values:
        raise EmptyInput("no timing samples")
    n = len(values)

    def nearest_rank(p: float) -> float:
        rank = math.ceil(p / 100.0 * n)
        return values[max(rank, 1) - 1]

    return TimingStats(mean=sum(values) / n, p50=nearest_rank(50.0), p95=nearest_rank(95.0))


def average_over_seeds(per_seed: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Mean/min/max per metric key across per-seed metric dicts."""
    if not per_seed:
        raise EmptyInput("no per-seed metrics")
    keys = sorted(per_seed[0])
    out = {}
    for key in keys:
        vals = [d[key] for d in per_seed]
        out[key] = {"mean": sum(vals) / len(vals), "min": min(vals), "max": max(vals)}
    return out


def metrics_as_dict(macro: Metrics, weighted: Metrics) -> dict[str, float]:
    return {
        "accuracy": macro.accuracy,
        "macro_precision": macro.precision,
        "macro_recall": macro.recall,
        "macro_f1": macro.f1,
        "weighted_precision": weighted.precision,
        "weighted_recall": weighted.recall,
        "weighted_f1": weighted.f1,
    }


def render_metrics_table(rows, title: str = "") -> str:
    """Plain-text table: label, A, P, R, F1 (macro), mirroring the per-operator
    report layout. rows: (label, metrics dict with mean values)."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Feature':<18} {'A':>7} {'P':>7} {'R':>7} {'F1':>7}")
    for label, vals in rows:
        lines.append(
            f"{label:<18} {vals['accuracy']:>7.3f} {vals['macro_precision']:>7.3f} "
            f"{vals['macro_recall']:>7.3f} {vals['macro_f1']:>7.3f}"
        )
    return "\n".join(lines)


def render_family_table(table: dict[str, list[float | None]], classes: int = 9) -> str:
    """Plain-text per-family grid: one row per model, one column per family."""
    header = f"{'Models':<18} " + " ".join(f"{'F' + str(i):>6}" for i in range(1, classes + 1))
    lines = [header]
    for label, row in table.items():
        cells = " ".join("   ---" if v is None else f"{v:>6.3f}" for v in row)
        lines.append(f"{label:<18} {cells}")
    return "\n".join(lines)
