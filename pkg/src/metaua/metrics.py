"""Evaluation metrics and the per-round metrics record."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import LOG_CLAMP


def auc(scores, labels) -> Optional[float]:
    """Rank-based (Mann-Whitney) ROC AUC with average ranks for ties.

    Returns ``None`` when ``labels`` holds a single class.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # average 1-based rank over each run of tied scores
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [len(scores)]))
    avg = (starts + stops + 1) / 2.0
    ranks[order] = np.repeat(avg, stops - starts)
    # 2*U is an integer-valued sum of half-ranks, so the ratio is exact
    u2 = 2.0 * ranks[pos].sum() - n_pos * (n_pos + 1.0)
    return float(u2 / (2.0 * n_pos * n_neg))


def logloss(scores, labels) -> float:
    """Mean binary cross-entropy, probabilities clamped to [1e-12, 1 - 1e-12]."""
    p = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(p) == 0:
        raise ValueError("logloss of an empty input")
    q = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    return float(np.mean(-(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))))


@dataclass
class RoundMetrics:
    round: int
    auc: Optional[float]
    logloss: float
    n_clients: int
    uplink_floats: int
    theta_s: dict[str, float] = field(default_factory=dict)
    attr_weights: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def uplink_bytes(self) -> int:
        return 8 * self.uplink_floats

    @property
    def theta_s_mean(self) -> Optional[float]:
        if not self.theta_s:
            return None
        return float(np.mean(list(self.theta_s.values())))
