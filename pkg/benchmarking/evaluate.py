"""
Class-level evaluation of a sequence classifier.

Accuracy is in percent. AUROC is the macro average of one-vs-rest ROC areas;
each area equals the probability that a random positive outscores a random
negative, ties counting one half (the trapezoidal area under the empirical
ROC curve).
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import polars as pl
from scipy.stats import rankdata
from tabulate import tabulate

from common.errors import DataError, DimensionError
from models.training.classifier import predict_scores


@dataclass
class EvalReport:
    accuracy: float
    auroc: float
    confusion: list
    per_class: list = field(default_factory=list)
    seed: Optional[int] = None
    paradigm: Optional[str] = None
    run: Optional[str] = None
    num_samples: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def per_class_frame(self):
        return pl.DataFrame(self.per_class)

    def table(self):
        rows = [
            [
                m["class_id"],
                m["support"],
                f"{m['sensitivity']:.3f}",
                f"{m['specificity']:.3f}",
                f"{m['precision']:.3f}",
                f"{m['f1']:.3f}",
                "-" if m["auroc"] is None else f"{m['auroc']:.3f}",
            ]
            for m in self.per_class
        ]
        text = tabulate(
            rows,
            headers=["Class", "Support", "Sensitivity", "Specificity", "Precision", "F1", "AUROC"],
            tablefmt="grid",
        )
        return f"{text}\nAccuracy {self.accuracy:.2f}% | macro AUROC {self.auroc:.4f}"


def binary_auroc(scores, positive):
    """Rank-sum form of the pair-counting AUROC; average ranks give ties half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC is undefined without both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_matrix(labels, predictions, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def _ratio(num, den):
    return float(num) / float(den) if den else 0.0


def evaluate_scores(scores, labels, seed=None, paradigm=None, run=None):
    """
    scores: (N, K) class scores, labels: (N,) true class ids.
    Macro AUROC averages the classes present in `labels`; fewer than two
    present classes make it undefined.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DimensionError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    if labels.size == 0:
        raise DataError("cannot evaluate an empty test set")
    num_classes = scores.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"labels outside [0, {num_classes})")
    present = np.unique(labels)
    if present.size < 2:
        raise DataError("AUROC is undefined on a single-class test set")

    predictions = scores.argmax(axis=1)
    cm = confusion_matrix(labels, predictions, num_classes)
    total = int(cm.sum())

    per_class, areas = [], []
    for c in range(num_classes):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        sensitivity = _ratio(tp, tp + fn)
        precision = _ratio(tp, tp + fp)
        f1 = _ratio(2 * precision * sensitivity, precision + sensitivity)
        area = None
        if c in present:
            area = binary_auroc(scores[:, c], labels == c)
            areas.append(area)
        per_class.append(
            {
                "class_id": c,
                "support": tp + fn,
                "sensitivity": sensitivity,
                "specificity": _ratio(tn, tn + fp),
                "precision": precision,
                "f1": f1,
                "auroc": area,
            }
        )

    return EvalReport(
        accuracy=float(100.0 * np.trace(cm) / total),
        auroc=float(np.mean(areas)),
        confusion=cm.tolist(),
        per_class=per_class,
        seed=seed,
        paradigm=paradigm,
        run=run,
        num_samples=total,
    )


def evaluate(classifier, test_clips, seed=None, paradigm=None, run=None):
    if not test_clips:
        raise DataError("cannot evaluate an empty test set")
    scores = predict_scores(classifier, test_clips)
    labels = [clip.class_id for clip in test_clips]
    return evaluate_scores(scores, labels, seed=seed, paradigm=paradigm, run=run)
