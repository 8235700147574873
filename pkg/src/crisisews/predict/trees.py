"""Random forest and gradient-boosted trees on a shared CART builder.

Splits minimise the within-node sum of squared deviations. For 0/1 labels
that is the Gini criterion up to a factor of two (n * 2p(1 - p) = 2 * SSE),
so one builder serves the classification forest and the regression trees
that boosting fits to residuals.
"""

from __future__ import annotations

import logging

import numba
import numpy as np

from .._stats import rank_auc
from ..frame import FactorPanel
from .base import ImportanceTable, Predictor, PredictorError, stream, training_data

log = logging.getLogger(__name__)

GBT_LEARNING_RATE = 0.1
GBT_DEPTHS = (1, 2, 3, 4, 5)
GBT_ROUNDS = tuple(range(50, 501, 50))
STABLE_TAIL = 50


@numba.njit(cache=True)
def _grow(X, y, rows, max_depth, max_features, seed):
    np.random.seed(seed)
    n_feat = X.shape[1]
    m0 = rows.size
    cap = 2 * m0 + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    idx = rows.copy()
    buf = np.empty(m0, np.int64)
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    top = 1
    st_node[0], st_start[0], st_end[0], st_depth[0] = 0, 0, m0, 0
    n_nodes = 1
    while top > 0:
        top -= 1
        node, s, e, d = st_node[top], st_start[top], st_end[top], st_depth[top]
        m = e - s
        ysum = 0.0
        ysq = 0.0
        for i in range(s, e):
            v = y[idx[i]]
            ysum += v
            ysq += v * v
        value[node] = ysum / m
        sse = ysq - ysum * ysum / m
        if m < 2 or sse <= 1e-12 * max(1.0, ysq) or (max_depth >= 0 and d >= max_depth):
            continue
        perm = np.random.permutation(n_feat)
        best = -np.inf
        best_f = -1
        best_thr = 0.0
        tried = 0
        xs = np.empty(m)
        ys = np.empty(m)
        for fi in range(n_feat):
            if tried >= max_features:
                break
            f = perm[fi]
            for i in range(m):
                xs[i] = X[idx[s + i], f]
            order = np.argsort(xs, kind="mergesort")
            if xs[order[0]] == xs[order[m - 1]]:
                continue
            tried += 1
            for i in range(m):
                ys[i] = y[idx[s + order[i]]]
            cum = 0.0
            for i in range(m - 1):
                cum += ys[i]
                lo = xs[order[i]]
                hi = xs[order[i + 1]]
                if lo == hi:
                    continue
                nl = i + 1
                nr = m - nl
                score = cum * cum / nl + (ysum - cum) * (ysum - cum) / nr
                if score > best:
                    best = score
                    best_f = f
                    mid = 0.5 * (lo + hi)
                    best_thr = mid if mid < hi else lo
        if best_f < 0:
            continue
        g = best - ysum * ysum / m
        if g <= 1e-12 * max(1.0, ysq):
            continue
        nl = 0
        nr = 0
        for i in range(s, e):
            r = idx[i]
            if X[r, best_f] <= best_thr:
                idx[s + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for i in range(nr):
            idx[s + nl + i] = buf[i]
        feature[node] = best_f
        threshold[node] = best_thr
        gain[node] = g
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top], st_start[top], st_end[top], st_depth[top] = n_nodes + 1, s + nl, e, d + 1
        top += 1
        st_node[top], st_start[top], st_end[top], st_depth[top] = n_nodes, s, s + nl, d + 1
        top += 1
        n_nodes += 2
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gain[:n_nodes])


@numba.njit(cache=True)
def _apply(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


_FIELDS = ("feature", "threshold", "left", "right", "value", "gain")


def grow_tree(X, y, rows=None, max_depth: int = -1, max_features: int | None = None,
              seed: int = 0) -> dict[str, np.ndarray]:
    """One CART tree; ``max_depth=-1`` grows until leaves are pure."""
    X = np.ascontiguousarray(X, dtype=float)
    rows = np.arange(X.shape[0], dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    k = X.shape[1] if max_features is None else int(max_features)
    parts = _grow(X, np.asarray(y, dtype=float), rows, int(max_depth), k, int(seed))
    return dict(zip(_FIELDS, parts))


def apply_tree(tree: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    return _apply(np.ascontiguousarray(X, dtype=float), tree["feature"], tree["threshold"],
                  tree["left"], tree["right"], tree["value"])


# random forest


def _grow_forest(X, y, k, n_trees, seed):
    n = X.shape[0]
    rng = stream(seed, 100 + k)
    trees, oob = [], np.zeros((n_trees, n), dtype=bool)
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n)
    errors = np.empty(n_trees)
    for m in range(n_trees):
        boot = rng.integers(0, n, n)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        tree = grow_tree(X, y, boot, -1, k, tree_seed)
        mask = np.ones(n, dtype=bool)
        mask[boot] = False
        oob[m] = mask
        if mask.any():
            oob_sum[mask] += apply_tree(tree, X[mask])
            oob_cnt[mask] += 1
        seen = oob_cnt > 0
        pred = oob_sum[seen] / oob_cnt[seen] >= 0.5
        errors[m] = np.mean(pred != (y[seen] > 0.5)) if seen.any() else np.nan
        trees.append(tree)
    return trees, oob, errors


def _stable_size(errors: np.ndarray, n: int) -> tuple[float, int]:
    """Stable OOB level (mean of the tail) and the first tree count after
    which the error never leaves the band above that level."""
    tail = errors[-min(STABLE_TAIL, errors.size):]
    tail = tail[np.isfinite(tail)]
    level = float(np.mean(tail))
    band = max(float(np.std(tail)), 1.0 / n)
    above = np.flatnonzero(~(errors <= level + band))
    size = int(above[-1] + 2) if above.size else 1
    return level, min(size, errors.size)


def fit_random_forest(features: FactorPanel, labels, M_max: int = 200, seed: int = 0,
                      k_values=None) -> Predictor:
    """Forests for every candidate-feature count k in 1..n-1 (1 when only one
    feature), each grown to ``M_max`` trees while tracking out-of-bag error;
    keeps the (k, M) with the lowest stabilised error."""
    X, y = training_data(features, labels)
    if X.shape[0] < 20:
        raise PredictorError("random forest needs at least 20 rows")
    n_feat = X.shape[1]
    ks = list(k_values) if k_values is not None else list(range(1, max(2, n_feat)))
    curves, best = {}, None
    for k in ks:
        if not 1 <= k <= n_feat:
            raise PredictorError(f"k={k} outside 1..{n_feat}")
        trees, oob, errors = _grow_forest(X, y, k, M_max, seed)
        level, size = _stable_size(errors, X.shape[0])
        curves[k] = errors
        if best is None or level < best[0] - 1e-12:
            best = (level, k, size, trees, oob)
    level, k, size, trees, oob = best
    state = {
        "trees": trees[:size],
        "oob": np.packbits(oob[:size], axis=1),
        "n_train": X.shape[0],
        "k": k,
        "M": size,
        "oob_error": level,
        "oob_curves": {str(kk): v for kk, v in curves.items()},
        "used_features": list(features.columns),
    }
    hyper = {"M_max": M_max, "k_values": ks, "k_default": max(1, n_feat // 3)}
    return Predictor("random_forest", hyper, state, features.columns, seed)


def _forest_proba(trees, X):
    return np.mean([apply_tree(t, X) for t in trees], axis=0)


def rf_importance(model: Predictor, features: FactorPanel, labels, permutation: str = "random"
                  ) -> ImportanceTable:
    """Mean decrease in out-of-bag accuracy after permuting each feature, in percent.

    ``permutation="identity"`` leaves the columns in place (self-check hook).
    """
    X, y = training_data(features.select(list(model.feature_names)), labels)
    state = model.state
    n = int(state["n_train"])
    if X.shape[0] != n:
        raise PredictorError("importance needs the training panel the forest was grown on")
    oob = np.unpackbits(state["oob"], axis=1, count=n).astype(bool)
    rng = stream(model.seed, 200)
    truth = y > 0.5
    drops = np.zeros(X.shape[1])
    used = 0
    for tree, mask in zip(state["trees"], oob):
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            continue
        used += 1
        Xo = X[rows]
        base = np.mean((apply_tree(tree, Xo) >= 0.5) == truth[rows])
        for j in range(X.shape[1]):
            perm = np.arange(rows.size) if permutation == "identity" else rng.permutation(rows.size)
            Xp = Xo.copy()
            Xp[:, j] = Xo[perm, j]
            drops[j] += base - np.mean((apply_tree(tree, Xp) >= 0.5) == truth[rows])
    scores = 100.0 * drops / max(used, 1)
    return ImportanceTable.from_scores(model.feature_names, scores, "mda")


# gradient boosting


def _boost(X, y, depth, rounds, lr, seed):
    F = np.full(X.shape[0], float(np.mean(y)))
    rng = stream(seed, 300)
    trees = []
    for _ in range(rounds):
        tree = grow_tree(X, y - F, None, depth, None, int(rng.integers(0, 2**31 - 1)))
        F = F + lr * apply_tree(tree, X)
        trees.append(tree)
    return float(np.mean(y)), trees


def fit_gradient_boost(features: FactorPanel, labels, D: int = 3, M: int = 100, seed: int = 0,
                       learning_rate: float = GBT_LEARNING_RATE) -> Predictor:
    """Squared-loss boosting from the label mean; M rounds of depth-D trees on residuals."""
    if D not in GBT_DEPTHS:
        raise PredictorError(f"depth D must be in {GBT_DEPTHS}")
    if M < 0:
        raise PredictorError("M must be non-negative")
    X, y = training_data(features, labels)
    init, trees = _boost(X, y, D, M, learning_rate, seed)
    state = {"init": init, "trees": trees, "used_features": list(features.columns)}
    return Predictor("gradient_boost", {"D": D, "M": M, "learning_rate": learning_rate},
                     state, features.columns, seed)


def staged_scores(init: float, trees, X, lr: float) -> np.ndarray:
    """Raw boosted score after each round (rows: rounds 0..M)."""
    out = np.empty((len(trees) + 1, X.shape[0]))
    out[0] = init
    for m, t in enumerate(trees, 1):
        out[m] = out[m - 1] + lr * apply_tree(t, X)
    return out


def tune_gradient_boost(features: FactorPanel, labels, depths=GBT_DEPTHS, rounds=GBT_ROUNDS,
                        folds: int = 5, seed: int = 0, learning_rate: float = GBT_LEARNING_RATE
                        ) -> tuple[tuple[int, int], dict[tuple[int, int], float]]:
    """Contiguous-block cross-validation of (D, M) by mean held-out AUC.

    Returns the best pair (ties go to the shallower, then smaller model)
    and the full grid of mean AUCs.
    """
    X, y = training_data(features, labels)
    n = X.shape[0]
    edges = np.linspace(0, n, folds + 1).astype(int)
    top = max(rounds)
    grid: dict[tuple[int, int], list[float]] = {(d, m): [] for d in depths for m in rounds}
    for f in range(folds):
        test = np.zeros(n, dtype=bool)
        test[edges[f]:edges[f + 1]] = True
        if np.unique(y[~test]).size < 2 or np.unique(y[test]).size < 2:
            continue
        for d in depths:
            init, trees = _boost(X[~test], y[~test], d, top, learning_rate, seed)
            staged = staged_scores(init, trees, X[test], learning_rate)
            for m in rounds:
                grid[(d, m)].append(rank_auc(y[test], staged[m]))
    means = {key: float(np.mean(v)) if v else float("nan") for key, v in grid.items()}
    valid = [key for key, v in means.items() if np.isfinite(v)]
    if not valid:
        raise PredictorError("no fold contains both classes in its training and test blocks")
    best = max(valid, key=lambda key: (means[key], -key[0], -key[1]))
    return best, means


def gbt_importance(model: Predictor) -> ImportanceTable:
    """Summed split gain per feature as a percentage of the total; features
    never split on are excluded."""
    totals = np.zeros(len(model.feature_names))
    for t in model.state["trees"]:
        inner = t["feature"] >= 0
        np.add.at(totals, t["feature"][inner], t["gain"][inner])
    total = totals.sum()
    scores = np.where(totals > 0, 100.0 * totals / total if total > 0 else 0.0, np.nan)
    return ImportanceTable.from_scores(model.feature_names, scores, "gain")


def predict_proba(model: Predictor, X: np.ndarray) -> np.ndarray:
    if model.kind == "random_forest":
        return _forest_proba(model.state["trees"], X)
    lr = model.hyperparams["learning_rate"]
    F = np.full(X.shape[0], float(model.state["init"]))
    for t in model.state["trees"]:
        F += lr * apply_tree(t, X)
    return np.clip(F, 0.0, 1.0)


def importance(model: Predictor, features=None, labels=None) -> ImportanceTable:
    if model.kind == "random_forest":
        if features is None or labels is None:
            raise PredictorError("forest importance needs the training features and labels")
        return rf_importance(model, features, labels)
    return gbt_importance(model)
