"""Binary AUC, one-vs-rest mAUC, landmark error and per-transition summaries."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import roc_curve

from kneerisk.dataset import N_GRADES


class UndefinedMetricError(ValueError):
    pass


def auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: ``(wins + 0.5 * ties) / (n_pos * n_neg)``.

    Wins and ties are counted as integers, so the result is the same float
    a brute-force pair enumeration produces.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    pos, neg = s[y == 1], np.sort(s[y == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    twice_wins = int((2 * below + (not_above - below)).sum())
    return twice_wins / (2 * len(pos) * len(neg))


def mauc(prob_matrix, labels) -> tuple[float, np.ndarray]:
    """Mean one-vs-rest AUC over the grades present in ``labels``.

    Returns the mean and a length-5 vector of per-class AUCs (NaN for
    grades absent from the labels, which are left out of the mean).
    """
    p = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if p.ndim != 2 or p.shape[1] != N_GRADES or len(p) != len(y):
        raise ValueError("prob_matrix must be N x 5 and aligned with labels")
    present = np.unique(y)
    if len(present) < 2:
        raise UndefinedMetricError("mAUC needs at least two distinct grades")
    per_class = np.full(N_GRADES, np.nan)
    for c in present:
        per_class[c] = auc_binary(p[:, c], (y == c).astype(int))
    return float(np.nanmean(per_class)), per_class


def landmark_error(pred, true) -> tuple[np.ndarray, float]:
    """Euclidean distance per landmark (pixels) and its mean."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(true, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 2:
        raise ValueError(f"landmark arrays differ: {a.shape} vs {b.shape}")
    d = np.sqrt(((a - b) ** 2).sum(-1))
    return d, float(d.mean())


def roc_points(scores, labels) -> np.ndarray:
    """ROC curve as rows of ``(threshold, fpr, tpr)``."""
    fpr, tpr, thr = roc_curve(np.asarray(labels), np.asarray(scores))
    return np.stack([thr, fpr, tpr], axis=1)


def transition_breakdown(y0, y12, risk) -> dict:
    """Map ``"a->b"`` grade transitions to their count and mean predicted risk."""
    groups: dict[str, list] = defaultdict(list)
    for a, b, r in zip(y0, y12, risk):
        groups[f"{int(a)}->{int(b)}"].append(float(r))
    return {k: {"count": len(v), "mean_risk": float(np.mean(v))} for k, v in sorted(groups.items())}


@dataclass
class MetricReport:
    task: str  # classification | prediction | risk
    row: str
    score: float  # mAUC (classification/prediction) or binary AUC (risk)
    per_class_auc: list = field(default_factory=list)
    per_transition: dict = field(default_factory=dict)
    landmark_rmse_px: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0 or np.isnan(self.score)):
            raise ValueError(f"AUC outside [0, 1]: {self.score}")
