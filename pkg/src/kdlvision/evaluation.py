"""Confusion matrices, their rendering and per-class precision/recall."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySplit, ParseError
from .imageproc import Image, write_netpbm
from .training import predict

CELL = 8  # rendered pixels per matrix cell


@dataclass
class ConfusionMatrix:
    """Counts with ground truth on rows and predictions on columns."""

    counts: np.ndarray
    class_names: list

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = self.counts.shape[0]
        if self.counts.shape != (c, c):
            raise ValueError(f"confusion counts must be square, got {self.counts.shape}")
        if self.class_names is None:
            self.class_names = [str(i) for i in range(c)]
        self.class_names = list(self.class_names)
        if len(self.class_names) != c:
            raise ValueError(f"{len(self.class_names)} class names for {c} classes")

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def accuracy(self):
        return int(np.trace(self.counts)) / self.total if self.total else 0.0

    def row_sums(self):
        return self.counts.sum(axis=1)

    def merge(self, other):
        """Counts add associatively, so shards of a split can be merged."""
        if other.class_names != self.class_names:
            raise ValueError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


def confusion_from_labels(labels, preds, num_classes, class_names=None):
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return ConfusionMatrix(counts, class_names)


def confusion(model, batches, num_classes, class_names=None, cache=None):
    """Confusion matrix of ``model`` over a batch stream (argmax, ties to the lowest index)."""
    try:
        labels, preds = predict(model, batches, cache)
    except EmptySplit:
        raise EmptySplit("test split is empty") from None
    return confusion_from_labels(labels, preds, num_classes, class_names)


def write_confusion_csv(cm, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + cm.class_names)
        for name, row in zip(cm.class_names, cm.counts):
            w.writerow([name] + [int(v) for v in row])


def read_confusion_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(1, "empty confusion file")
    names = rows[0][1:]
    counts = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(names) + 1:
            raise ParseError(lineno, f"expected {len(names) + 1} fields")
        try:
            counts.append([int(v) for v in row[1:]])
        except ValueError:
            raise ParseError(lineno, "counts must be integers") from None
    return ConfusionMatrix(np.array(counts, dtype=np.int64).reshape(len(names), len(names)), names)


def confusion_image(cm, cell=CELL):
    """Row-normalised grayscale raster; all-zero rows stay black."""
    if cm.num_classes < 2:
        raise ValueError("rendering needs at least 2 classes")
    row_max = cm.counts.max(axis=1, keepdims=True).astype(np.float64)
    norm = np.divide(cm.counts, row_max, out=np.zeros(cm.counts.shape), where=row_max > 0)
    px = np.floor(norm * 255.0 + 0.5).astype(np.uint8)
    return np.kron(px, np.ones((cell, cell), dtype=np.uint8))


def render_confusion(cm, out_path, csv_path=None):
    """Write the heatmap as PPM and the raw counts as CSV (next to it by default)."""
    out_path = Path(out_path)
    gray = confusion_image(cm)
    write_netpbm(out_path, Image(np.repeat(gray[:, :, None], 3, axis=2)))
    csv_path = Path(csv_path) if csv_path else out_path.with_suffix(".csv")
    write_confusion_csv(cm, csv_path)
    return out_path, csv_path


@dataclass(frozen=True)
class ClassReport:
    class_name: str
    precision: float
    recall: float
    support: int


def per_class_report(cm):
    diag = np.diag(cm.counts)
    col, row = cm.counts.sum(axis=0), cm.counts.sum(axis=1)
    return [
        ClassReport(
            name,
            float(diag[i] / col[i]) if col[i] else 0.0,
            float(diag[i] / row[i]) if row[i] else 0.0,
            int(row[i]),
        )
        for i, name in enumerate(cm.class_names)
    ]


def write_report_csv(report, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "support"])
        for r in report:
            w.writerow([r.class_name, repr(r.precision), repr(r.recall), r.support])


def macro_recall(cm):
    rows = cm.row_sums()
    present = rows > 0
    return float(np.mean(np.diag(cm.counts)[present] / rows[present])) if present.any() else 0.0
