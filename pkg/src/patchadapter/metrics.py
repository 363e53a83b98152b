"""Confusion-matrix construction and the evaluation suite: accuracy, macro and
weighted F1, adjusted balanced accuracy, the majority-class reference
predictor, and report export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapter import AdapterParams, adapter_forward
from .dataio import ClassifierWeights, EmbeddingSet, LabelTable
from .errors import (
    EmptyInput,
    EmptyMatrix,
    LabelOutOfRange,
    LengthMismatch,
    UnknownImageId,
    ZeroSupportClass,
)


@dataclass
class ConfusionMatrix:
    """Integer count matrix, rows = true class, columns = predicted class."""

    counts: np.ndarray
    class_names: list[str] | None = None

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(true_labels, predicted, n_classes: int,
                     class_names: list[str] | None = None) -> ConfusionMatrix:
    true_arr = np.asarray(true_labels, dtype=np.int64)
    pred_arr = np.asarray(predicted, dtype=np.int64)
    if true_arr.shape != pred_arr.shape or true_arr.ndim != 1:
        raise LengthMismatch(f"{true_arr.shape} vs {pred_arr.shape}")
    if true_arr.size and (true_arr.min() < 0 or true_arr.max() >= n_classes
                          or pred_arr.min() < 0 or pred_arr.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true_arr, pred_arr), 1)
    return ConfusionMatrix(counts=counts, class_names=class_names)


def per_class_stats(cm: ConfusionMatrix):
    """Per-class (precision, recall, f1, support) arrays. Undefined ratios
    (no predictions or no support for a class, or P+R = 0) score 0, the
    conservative convention under imbalance."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr_sum = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr_sum,
                   out=np.zeros_like(tp), where=pr_sum > 0)
    return precision, recall, f1, cm.counts.sum(axis=1)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.n_samples < 1:
        raise EmptyMatrix("no evaluated samples")
    return float(np.trace(cm.counts) / cm.n_samples)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Mean per-class F1, every class weighted equally."""
    _, _, f1, _ = per_class_stats(cm)
    return float(f1.mean())


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Per-class F1 weighted by the class share of true samples."""
    _, _, f1, support = per_class_stats(cm)
    return float(np.sum(support / cm.n_samples * f1))


def adjusted_balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall rescaled so chance scores 0 and perfection 1.

    Range [-1/(K-1), 1]; negative values are legal and mean worse than
    chance. Every class needs at least one true sample.
    """
    k = cm.n_classes
    support = cm.counts.sum(axis=1)
    if np.any(support < 1):
        raise ZeroSupportClass(f"classes without support: {np.where(support < 1)[0].tolist()}")
    recalls = np.diag(cm.counts) / support
    chance = 1.0 / k
    return float((recalls.mean() - chance) / (1.0 - chance))


def zero_rule_predict(train_labels, n_eval: int) -> np.ndarray:
    """Constant majority-class predictor; ties break to the lowest index."""
    arr = np.asarray(train_labels, dtype=np.int64)
    if arr.size == 0:
        raise EmptyInput("no training labels")
    majority = int(np.argmax(np.bincount(arr)))
    return np.full(n_eval, majority, dtype=np.int64)


@dataclass
class PerClassRow:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvaluationReport:
    confusion: ConfusionMatrix
    accuracy: float
    macro_f1: float
    weighted_f1: float
    adjusted_balanced_accuracy: float
    per_class: list[PerClassRow]

    def metrics_dict(self) -> dict[str, float]:
        """The four headline metrics as fractions."""
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "adjusted_balanced_accuracy": self.adjusted_balanced_accuracy,
        }


def report_from_confusion(cm: ConfusionMatrix) -> EvaluationReport:
    precision, recall, f1, support = per_class_stats(cm)
    names = cm.class_names or [str(i) for i in range(cm.n_classes)]
    rows = [PerClassRow(name=names[i], precision=float(precision[i]),
                        recall=float(recall[i]), f1=float(f1[i]),
                        support=int(support[i]))
            for i in range(cm.n_classes)]
    return EvaluationReport(
        confusion=cm,
        accuracy=accuracy(cm),
        macro_f1=macro_f1(cm),
        weighted_f1=weighted_f1(cm),
        adjusted_balanced_accuracy=adjusted_balanced_accuracy(cm),
        per_class=rows,
    )


def predict(params: AdapterParams, weights: ClassifierWeights,
            embeddings: EmbeddingSet, ids, cosine_mode: bool = True) -> np.ndarray:
    """Eval-mode argmax predictions on view 0, in the given id order."""
    out = np.empty(len(ids), dtype=np.int64)
    for j, image_id in enumerate(ids):
        try:
            tokens = embeddings.view(image_id, 0)
        except KeyError:
            raise UnknownImageId(image_id) from None
        trace = adapter_forward(tokens, params, weights, mode="eval",
                                cosine_mode=cosine_mode)
        out[j] = int(np.argmax(trace.probs))
    return out


def evaluate(params: AdapterParams, weights: ClassifierWeights,
             embeddings: EmbeddingSet, labels: LabelTable,
             cosine_mode: bool = True) -> EvaluationReport:
    """Full evaluation over every labeled image (eval mode, view 0)."""
    ids = list(labels.entries)
    if not ids:
        raise EmptyInput("no labeled samples")
    predictions = predict(params, weights, embeddings, ids, cosine_mode)
    truth = np.array([labels.entries[i] for i in ids], dtype=np.int64)
    cm = confusion_matrix(truth, predictions, weights.n_classes,
                          class_names=list(weights.class_names))
    return report_from_confusion(cm)


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    names = cm.class_names or [str(i) for i in range(cm.n_classes)]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([""] + list(names))
        for i, name in enumerate(names):
            writer.writerow([name] + [int(c) for c in cm.counts[i]])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    names = rows[0][1:]
    counts = np.array([[int(c) for c in row[1:]] for row in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts=counts, class_names=names)


def write_metrics_json(report: EvaluationReport, path) -> None:
    Path(path).write_text(
        json.dumps(report.metrics_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def write_per_class_csv(report: EvaluationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for row in report.per_class:
            writer.writerow([row.name, repr(row.precision), repr(row.recall),
                             repr(row.f1), row.support])
