"""Clip-level classification metrics: macro-F1, balanced accuracy, accuracy, top-2, top-3."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class EvalReport:
    macro_f1: float
    accuracy: float
    balanced_accuracy: float
    top2: float
    top3: float
    confusion: np.ndarray  # rows: true class, cols: predicted class
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("confusion", "precision", "recall", "f1"):
            d[k] = np.asarray(d[k]).tolist()
        return d

    def to_json(self, path=None, **extra) -> str:
        text = json.dumps({**self.to_dict(), **extra}, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def write_confusion_csv(self, path, class_names=None):
        k = self.confusion.shape[0]
        names = list(class_names) if class_names else [str(i) for i in range(k)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *names])
            for name, row in zip(names, self.confusion):
                w.writerow([name, *row.tolist()])


def _mean(values) -> float:
    """Correctly rounded mean, independent of summation order."""
    return math.fsum(values) / len(values)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether each label is among the k largest scores; ties favour the lower class index."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def compute_metrics(logits, labels, num_classes: int | None = None) -> EvalReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty set")
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ValueError(f"logits {logits.shape} do not match {labels.size} labels")
    k = num_classes or logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels out of range")
    pred = np.argsort(-logits, axis=1, kind="stable")[:, 0]
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    # classes that occur neither as label nor as prediction do not enter the averages
    seen = (support > 0) | (predicted > 0)
    return EvalReport(
        macro_f1=_mean(f1[seen]),
        accuracy=float(tp.sum() / labels.size),
        balanced_accuracy=_mean(recall[support > 0]),
        top2=float(topk_hits(logits, labels, 2).mean()),
        top3=float(topk_hits(logits, labels, 3).mean()),
        confusion=conf,
        precision=precision,
        recall=recall,
        f1=f1,
    )
