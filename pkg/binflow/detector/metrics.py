from typing import Sequence

import numpy as np
from sklearn.metrics import roc_auc_score


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve: the share of (malicious, benign) pairs ranked
    correctly, ties counting one half.

    :raises ValueError: length mismatch, labels other than 0/1, or a single class
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"Scores {scores.shape} and labels {labels.shape} must be equal-length lists")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"Labels must be 0 or 1, got {sorted(set(labels.tolist()))}")
    if len(np.unique(labels)) < 2:
        raise ValueError("AUC needs both classes among the labels")
    return float(roc_auc_score(labels, scores))


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or not len(labels):
        raise ValueError(f"Scores {scores.shape} and labels {labels.shape} must be equal-length, nonempty lists")
    return float(np.mean((scores > threshold) == (labels == 1)))
