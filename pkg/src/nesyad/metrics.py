from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise ValueError("percentile of an empty sample")
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must lie in (0, 100]")
    rank = max(1, math.ceil(percentile / 100.0 * x.size))
    return float(x[rank - 1])


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Area under the ROC curve via mid-ranks (ties count one half).

    Returns ``None`` when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    thresholds = np.unique(s)[::-1]
    fpr = [0.0]
    tpr = [0.0]
    for t in thresholds:
        pred = s >= t
        tpr.append((pred & y).sum() / max(y.sum(), 1))
        fpr.append((pred & ~y).sum() / max((~y).sum(), 1))
    return np.array(fpr), np.array(tpr)


def percentiles_ns(samples: Sequence[int]) -> dict[str, int]:
    x = np.sort(np.asarray(samples, dtype=np.int64))
    return {f"p{p}": int(nearest_rank(x, p)) for p in (50, 95, 99)}
