"""Classification scores and multi-seed aggregation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction length {pred.shape} differs from truth length {truth.shape}")
    for name, v in (("prediction", pred), ("truth", truth)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def per_class_scores(cm: np.ndarray) -> dict[str, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return {"precision": precision, "recall": recall, "f1": f1}


def macro_f1(pred, truth, n_classes: int) -> float:
    """Unweighted mean of per-class F1. A class absent from both vectors scores 0."""
    cm = confusion_matrix(pred, truth, n_classes)
    absent = np.flatnonzero((cm.sum(axis=0) == 0) & (cm.sum(axis=1) == 0))
    if absent.size:
        warnings.warn(f"classes {absent.tolist()} appear in neither predictions nor truth; scored F1=0",
                      stacklevel=2)
    return float(per_class_scores(cm)["f1"].mean())


def micro_f1(pred, truth, n_classes: int) -> float:
    # single-label: micro F1 equals accuracy
    cm = confusion_matrix(pred, truth, n_classes)
    return float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0


def aggregate(values: Sequence[float]) -> dict[str, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    values = [float(v.macro_f1 if isinstance(v, RunMetrics) else v) for v in values]
    if not values:
        raise ValueError("aggregate needs at least one run")
    arr = np.array(sorted(values))
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": len(arr)}


@dataclass
class RunMetrics:
    seed: int
    macro_f1: float = float("nan")
    micro_f1: float = float("nan")
    per_class: dict[str, list[float]] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    loss_traces: dict[str, list[float]] = field(default_factory=dict)
    kept_traces: dict[str, list[float]] = field(default_factory=dict)
    epoch_f1: list[float] = field(default_factory=list)

    @classmethod
    def score(cls, seed: int, pred, truth, n_classes: int, **traces) -> "RunMetrics":
        cm = confusion_matrix(pred, truth, n_classes)
        scores = per_class_scores(cm)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mf1 = macro_f1(pred, truth, n_classes)
        return cls(seed=seed, macro_f1=mf1, micro_f1=micro_f1(pred, truth, n_classes),
                   per_class={k: v.tolist() for k, v in scores.items()}, confusion=cm.tolist(), **traces)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "macro_f1": self.macro_f1, "micro_f1": self.micro_f1,
                "per_class": self.per_class, "confusion": self.confusion, "loss_traces": self.loss_traces,
                "kept_traces": self.kept_traces, "epoch_f1": self.epoch_f1}
