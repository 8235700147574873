"""Signal extraction: per-variable threshold search on the noise-to-signal ratio."""

from __future__ import annotations

import logging

import numpy as np

from ..frame import FactorPanel
from .base import ImportanceTable, Predictor, PredictorError, design_matrix, label_vector

log = logging.getLogger(__name__)

PERCENTILE_GRID = tuple(float(q) for q in range(80, 91))
NSR_FLOOR = 0.01
DIRECTIONS = ("upper", "lower", "abs")


def confusion(signal: np.ndarray, crisis: np.ndarray) -> tuple[int, int, int, int]:
    """(A, B, C, D): signal&crisis, signal&calm, quiet&crisis, quiet&calm."""
    s = np.asarray(signal, dtype=bool)
    c = np.asarray(crisis, dtype=bool)
    return (int(np.sum(s & c)), int(np.sum(s & ~c)), int(np.sum(~s & c)), int(np.sum(~s & ~c)))


def nsr(A: int, B: int, C: int, D: int) -> float:
    """[B/(B+D)] / [A/(A+C)]; +inf when no crisis is signalled."""
    if A + C == 0:
        raise PredictorError("no crisis observations")
    if A == 0:
        return float("inf")
    noise = B / (B + D) if B + D else 0.0
    return noise / (A / (A + C))


def grid_cutoff(x: np.ndarray, q: float, direction: str) -> float:
    if direction == "upper":
        return float(np.percentile(x, q))
    if direction == "lower":
        return float(np.percentile(x, 100.0 - q))
    return float(np.percentile(np.abs(x), q))


def breach(x: np.ndarray, cutoff: float, direction: str) -> np.ndarray:
    if direction == "upper":
        return x > cutoff
    if direction == "lower":
        return x < cutoff
    return np.abs(x) > cutoff


def fit_klr(features: FactorPanel, labels, nsr_ceiling: float = 0.75,
            directions: dict[str, str] | None = None, grid=PERCENTILE_GRID, seed: int = 0) -> Predictor:
    X = design_matrix(features)
    y = label_vector(labels, X.shape[0]).astype(bool)
    if not y.any():
        raise PredictorError("no crisis observations")
    names = list(features.columns)
    directions = dict(directions or {})
    unknown = set(directions) - set(names)
    if unknown:
        raise PredictorError(f"direction given for unknown feature(s): {', '.join(sorted(unknown))}")
    per_var = []
    for j, name in enumerate(names):
        direction = directions.get(name, "upper")
        if direction not in DIRECTIONS:
            raise PredictorError(f"unknown tail direction {direction!r} for {name}")
        scan = []
        for q in grid:
            c = grid_cutoff(X[:, j], q, direction)
            counts = confusion(breach(X[:, j], c, direction), y)
            scan.append({"percentile": q, "cutoff": c, "counts": list(counts), "nsr": nsr(*counts)})
        best = min(range(len(scan)), key=lambda i: (scan[i]["nsr"], i))
        b = scan[best]
        retained = b["nsr"] < nsr_ceiling
        weight = 1.0 / max(b["nsr"], NSR_FLOOR) if retained else 0.0
        per_var.append({"feature": name, "direction": direction, "cutoff": b["cutoff"],
                        "percentile": b["percentile"], "nsr": b["nsr"], "weight": weight,
                        "retained": bool(retained), "scan": scan})
    kept = [v for v in per_var if v["retained"]]
    if not kept:
        log.warning("no variable passed the noise-to-signal ceiling %.3g", nsr_ceiling)
    state = {
        "variables": per_var,
        "used_features": [v["feature"] for v in kept],
        "cutoffs": np.array([v["cutoff"] for v in kept], dtype=float),
        "weights": np.array([v["weight"] for v in kept], dtype=float),
        "directions": [v["direction"] for v in kept],
    }
    hyper = {"nsr_ceiling": nsr_ceiling, "grid": list(grid), "nsr_floor": NSR_FLOOR}
    return Predictor("klr", hyper, state, names, seed)


def predict_proba(model: Predictor, X: np.ndarray) -> np.ndarray:
    w = np.asarray(model.state["weights"], dtype=float)
    if w.size == 0:
        log.warning("signal extraction model retained no variables; forecasting 0")
        return np.zeros(X.shape[0])
    cutoffs = np.asarray(model.state["cutoffs"], dtype=float)
    S = np.column_stack([breach(X[:, j], cutoffs[j], d)
                         for j, d in enumerate(model.state["directions"])])
    return (S @ w) / w.sum()


def importance(model: Predictor, features=None, labels=None) -> ImportanceTable:
    """Noise-to-signal ratio per variable; lower is better, so the score is
    the composite weight 1/NSR and excluded variables carry no score."""
    rows = []
    for v in model.state["variables"]:
        rows.append((v["feature"], v["weight"] if v["retained"] else np.nan, "inverse_nsr"))
    return ImportanceTable(tuple(rows))
