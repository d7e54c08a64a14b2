"""AUROC via the Mann-Whitney rank statistic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise DataError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auroc(probs: np.ndarray, labels: np.ndarray) -> tuple[float, list[float]]:
    """Macro one-vs-rest AUROC. Binary problems use the positive-class column only.

    Classes absent from ``labels`` are skipped; at least two must be present.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    k = probs.shape[1]
    if k == 2:
        score = auroc(probs[:, 1], labels == 1)
        return score, [score]
    present = [c for c in range(k) if 0 < np.sum(labels == c) < labels.size]
    if not present:
        raise DataError("AUROC needs at least two classes present")
    per_class = [auroc(probs[:, c], labels == c) for c in present]
    return float(np.mean(per_class)), per_class


@dataclass
class MetricReport:
    auroc: float
    per_class: list[float] = field(default_factory=list)
    n_samples: int = 0
    seed: int | None = None
    accuracy: float | None = None

    @classmethod
    def from_predictions(cls, probs, labels, seed=None) -> "MetricReport":
        score, per_class = multiclass_auroc(probs, labels)
        acc = float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))
        return cls(score, per_class, int(len(labels)), seed, acc)

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "per_class_auroc": self.per_class,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "accuracy": self.accuracy,
        }
