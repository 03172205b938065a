"""Ranking metrics and bootstrap resampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores for {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return s, y.astype(np.int64)


def auc_roc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting one half.

    Computed from midranks, so the value is the exact pairwise count:
    ``2 * wins + ties`` is an integer divided by ``2 * n_pos * n_neg``.
    """
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC-ROC needs both classes present")
    # doubled midranks are integers, which keeps the count exact
    twice_ranks = np.rint(2 * rankdata(s)).astype(np.int64)
    twice_u = int(twice_ranks[y == 1].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def auc_prc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUC-PRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # evaluate only at the last index of each tied score block
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred).ravel()
    labels = np.asarray(labels).ravel()
    if len(pred) == 0 or pred.shape != labels.shape:
        raise MetricError("accuracy needs equally sized, non-empty inputs")
    return float(np.mean(pred == labels))


def bootstrap(
    metric: Callable,
    scores,
    labels,
    B: int = 1000,
    seed: int = 0,
    draw: Callable[[np.random.Generator, int], np.ndarray] | None = None,
    max_redraws: int = 1000,
) -> tuple[float, float]:
    """Mean and std of ``metric`` over B resamples with replacement.

    Resamples holding a single class are redrawn.  ``draw(rng, n)`` overrides
    the index sampler (used to force specific resamples in tests).
    """
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    draw = draw or (lambda r, k: r.integers(0, k, size=k))
    values = np.empty(B)
    for b in range(B):
        for _ in range(max_redraws):
            idx = draw(rng, n)
            if len(np.unique(labels[idx])) > 1:
                break
        else:
            raise MetricError("could not draw a resample containing both classes")
        values[b] = metric(scores[idx], labels[idx])
    return float(values.mean()), float(values.std())


@dataclass
class MetricsReport:
    auc_roc: float
    auc_prc: float
    accuracy: float
    bootstrap: dict[str, tuple[float, float]] = field(default_factory=dict)
    per_seed: dict[str, list[float]] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {"auc_roc": self.auc_roc, "auc_prc": self.auc_prc, "accuracy": self.accuracy}
        for name, (m, s) in self.bootstrap.items():
            row[f"{name}_boot_mean"] = m
            row[f"{name}_boot_std"] = s
        return row


def positive_scores(probs: np.ndarray) -> np.ndarray:
    return np.asarray(probs)[:, 1]


def evaluate_probs(probs: np.ndarray, labels, B: int = 1000, seed: int = 0) -> MetricsReport:
    """Binary report on the positive-class column; C > 2 uses one-vs-rest macro averages."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    acc = accuracy(probs.argmax(axis=1), labels)
    if probs.shape[1] == 2:
        s, y = probs[:, 1], labels
        roc, prc = auc_roc(s, y), auc_prc(s, y)
        boot = {}
        if B > 0:
            boot["auc_roc"] = bootstrap(auc_roc, s, y, B, seed)
            boot["auc_prc"] = bootstrap(auc_prc, s, y, B, seed)
        return MetricsReport(roc, prc, acc, boot)
    present = [k for k in range(probs.shape[1]) if 0 < (labels == k).sum() < len(labels)]
    roc = float(np.mean([auc_roc(probs[:, k], labels == k) for k in present]))
    prc = float(np.mean([auc_prc(probs[:, k], labels == k) for k in present]))
    return MetricsReport(roc, prc, acc)
