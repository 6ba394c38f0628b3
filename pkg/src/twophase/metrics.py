"""Confusion-matrix metrics, macro averages, and per-class F1 deltas."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.bincount(y_true * num_classes + y_pred, minlength=num_classes * num_classes)
    return cm.reshape(num_classes, num_classes)


@dataclass
class ClassMetrics:
    classes: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    def rows(self):
        for i, c in enumerate(self.classes):
            yield c, float(self.precision[i]), float(self.recall[i]), float(self.f1[i]), int(self.support[i])


@dataclass
class EvalReport:
    accuracy: float
    per_class: ClassMetrics
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray

    @property
    def classes(self) -> list[str]:
        return self.per_class.classes

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "n": int(self.confusion.sum()),
        }


def metrics_from_cm(cm, classes: Sequence[str] | None = None) -> EvalReport:
    """Per-class and macro metrics. Undefined ratios (0/0) count as 0.

    Macro values average over every class, including those that never occur
    or are never predicted.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative counts")
    c = cm.shape[0]
    classes = list(classes) if classes is not None else [str(i) for i in range(c)]
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return EvalReport(
        accuracy=accuracy,
        per_class=ClassMetrics(classes, precision, recall, f1, support),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=cm,
    )


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(model, data, batch_size: int = 256) -> EvalReport:
    """Top-1 / per-class / macro evaluation of ``model`` on a LabeledSet."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty manifest")
    classes = data.manifest.classes
    if model.spec.num_classes != len(classes):
        raise ValueError(f"model has {model.spec.num_classes} classes, data has {len(classes)}")
    logits = model.predict_logits(data.images, batch_size)
    cm = confusion_matrix(data.labels, predict(logits), len(classes))
    return metrics_from_cm(cm, classes)


# ---------------------------------------------------------------------------
# per-class tables and deltas
# ---------------------------------------------------------------------------

PER_CLASS_HEADER = ["Species", "Precision", "Recall", "F1", "Count(Train)", "Count(Test)"]


@dataclass
class PerClassTable:
    """Per-class precision/recall/F1 with train and test counts, in report order."""

    species: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    count_train: list[int]
    count_test: list[int]

    @classmethod
    def from_report(cls, report: EvalReport, train_counts: Sequence[int]) -> "PerClassTable":
        pc = report.per_class
        return cls(list(pc.classes), pc.precision.tolist(), pc.recall.tolist(), pc.f1.tolist(),
                   [int(v) for v in train_counts], pc.support.astype(int).tolist())

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "PerClassTable":
        return cls([r["species"] for r in rows], [r["precision"] for r in rows], [r["recall"] for r in rows],
                   [r["f1"] for r in rows], [r["count_train"] for r in rows], [r["count_test"] for r in rows])

    def macro(self) -> dict[str, float]:
        n = len(self.species)
        return {"precision": sum(self.precision) / n, "recall": sum(self.recall) / n, "f1": sum(self.f1) / n}

    def f1_of(self) -> dict[str, float]:
        return dict(zip(self.species, self.f1))

    def to_csv(self, digits: int = 6) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PER_CLASS_HEADER)
        for i, s in enumerate(self.species):
            w.writerow([s, f"{self.precision[i]:.{digits}f}", f"{self.recall[i]:.{digits}f}",
                        f"{self.f1[i]:.{digits}f}", self.count_train[i], self.count_test[i]])
        return buf.getvalue()

    @classmethod
    def read_csv(cls, path) -> "PerClassTable":
        """Accepts this package's header or the lower-case fixture header."""
        rows = []
        with open(path, newline="", encoding="utf-8") as f:
            for r in csv.DictReader(f):
                r = {k.lower().replace("(", "_").replace(")", "").replace("-", "_"): v for k, v in r.items()}
                rows.append({
                    "species": r["species"],
                    "precision": float(r["precision"]),
                    "recall": float(r["recall"]),
                    "f1": float(r.get("f1", r.get("f1_score"))),
                    "count_train": int(r.get("count_train")),
                    "count_test": int(r.get("count_test")),
                })
        return cls.from_rows(rows)


@dataclass(frozen=True)
class DeltaRow:
    species: str
    count_train: int
    support: int
    f1_a: float
    f1_b: float

    @property
    def delta(self) -> float:
        return self.f1_b - self.f1_a

    @property
    def relative_pct(self) -> float | None:
        return None if self.f1_a == 0 else 100.0 * (self.f1_b - self.f1_a) / self.f1_a


def delta_report(a: PerClassTable, b: PerClassTable,
                 frequency: dict[str, int] | None = None) -> list[DeltaRow]:
    """Per-class F1 change ``b - a`` sorted by descending training frequency.

    ``frequency`` defaults to ``a``'s train counts (the original distribution
    when ``a`` is the baseline). Ties keep ``a``'s class order.
    """
    if set(a.species) != set(b.species) or len(a.species) != len(b.species):
        raise ValueError(f"class sets differ: {sorted(set(a.species) ^ set(b.species))}")
    freq = frequency or dict(zip(a.species, a.count_train))
    f1b = b.f1_of()
    order = {s: i for i, s in enumerate(a.species)}
    species = sorted(a.species, key=lambda s: (-freq[s], order[s]))
    f1a = a.f1_of()
    support = dict(zip(a.species, a.count_test))
    return [DeltaRow(s, int(freq[s]), int(support[s]), f1a[s], f1b[s]) for s in species]


def mean_delta(rows: Sequence[DeltaRow], skip_both_zero: bool = True) -> float:
    """Average per-class F1 change, by default ignoring classes at 0 in both reports."""
    vals = [r.delta for r in rows if not (skip_both_zero and r.f1_a == 0 and r.f1_b == 0)]
    return sum(vals) / len(vals) if vals else 0.0


DELTA_HEADER = ["Species", "Count(Train)", "Count(Test)", "F1_a", "F1_b", "Delta", "RelativeChangePct"]


def deltas_to_csv(rows: Sequence[DeltaRow], digits: int = 6) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DELTA_HEADER)
    for r in rows:
        rel = "" if r.relative_pct is None else f"{r.relative_pct:.{digits}f}"
        w.writerow([r.species, r.count_train, r.support, f"{r.f1_a:.{digits}f}", f"{r.f1_b:.{digits}f}",
                    f"{r.delta:.{digits}f}", rel])
    return buf.getvalue()


def deltas_to_gnuplot(rows: Sequence[DeltaRow], title: str = "") -> str:
    """Whitespace-separated series: rank, percentage-point delta, relative %, name."""
    lines = [f"# {title}".rstrip(), "# rank delta_pp relative_pct species"]
    for i, r in enumerate(rows):
        rel = "NaN" if r.relative_pct is None else f"{r.relative_pct:.4f}"
        lines.append(f"{i} {100 * r.delta:.4f} {rel} {r.species}")
    return "\n".join(lines) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path
