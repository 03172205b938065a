"""Bias analytics: label entropy per mask pattern, per-group AUC, embedding robustness."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..bigraph import build_graph
from ..scmgen import GROUP_NAMES, apply_mcar, assign_group
from .metrics import auc_roc

NCE_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class PatternStats:
    pattern: tuple[int, ...]
    count: int
    histogram: list[int]
    nce: float


@dataclass
class NceReport:
    patterns: list[PatternStats]
    buckets: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(p.count for p in self.patterns)


def normalized_entropy(histogram, num_classes: int) -> float:
    counts = np.asarray(histogram, dtype=float)
    p = counts[counts > 0] / counts.sum()
    h = float(-(p * np.log(p)).sum())
    # adding 0.0 turns a -0.0 from a one-class pattern into 0.0
    return float(np.clip(h / np.log(num_classes), 0.0, 1.0)) + 0.0


def _bucket(nce: float) -> int:
    # [0,.2) [.2,.4) ... [.8,1]: the last bucket is closed
    return min(int(np.searchsorted(NCE_EDGES, nce, side="right")) - 1, len(NCE_EDGES) - 2)


def nce_analysis(samples, num_classes: int | None = None) -> NceReport:
    """Normalised conditional entropy H(y | mask pattern) / ln C for every observed pattern.

    Buckets count samples (not patterns), as in a histogram of patients by the
    NCE of their pattern.
    """
    C = num_classes or max(2, max(s.y for s in samples) + 1)
    groups: dict[tuple, Counter] = {}
    for s in samples:
        groups.setdefault(tuple(int(v) for v in s.mask), Counter())[int(s.y)] += 1
    stats = []
    buckets = [0] * (len(NCE_EDGES) - 1)
    for pattern in sorted(groups):
        hist = [groups[pattern].get(k, 0) for k in range(C)]
        nce = normalized_entropy(hist, C)
        stats.append(PatternStats(pattern, sum(hist), hist, nce))
        buckets[_bucket(nce)] += sum(hist)
    return NceReport(stats, buckets)


def subgroup_eval(model, samples) -> dict[int, float | None]:
    """AUC-ROC inside each of the six age x severity groups; None where one class is missing."""
    probs = model.predict_proba(build_graph(samples))[:, 1]
    labels = np.array([s.y for s in samples])
    groups = np.array([assign_group(s) for s in samples])
    report: dict[int, float | None] = {}
    for g in range(1, len(GROUP_NAMES) + 1):
        sel = groups == g
        if not sel.any():
            continue
        ys = labels[sel]
        report[g] = auc_roc(probs[sel], ys) if 0 < ys.sum() < len(ys) else None
    return report


def embedding_distance(model, samples, mask_rate: float = 0.3, seed: int = 0) -> float:
    """Mean L2 distance between Z'_c rows of complete and MCAR-masked copies of each patient."""
    full = [s for s in samples if s.fully_observed]
    if not full:
        raise ValueError("embedding distance needs fully-observed samples")
    Z_full = model.causal_embedding(build_graph(full))
    Z_masked = model.causal_embedding(build_graph(apply_mcar(full, mask_rate, seed)))
    return float(np.linalg.norm(Z_full - Z_masked, axis=1).mean())
