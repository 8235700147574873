"""Small numeric helpers shared by the predictors and the metrics."""

from __future__ import annotations

import numpy as np
from scipy import stats


def rank_auc(y, score) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties count 1/2).

    NaN when only one class is present.
    """
    y = np.asarray(y).astype(bool)
    score = np.asarray(score, dtype=float)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(score)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_loss_terms(y, logits):
    """Per-row binary cross-entropy written in terms of the logit (stable)."""
    z = np.asarray(logits, dtype=float)
    return np.logaddexp(0.0, z) - np.asarray(y, dtype=float) * z
