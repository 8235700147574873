"""Logistic regression with backward stepwise elimination."""

from __future__ import annotations

import logging

import numpy as np
from scipy import stats

from .._stats import log_loss_terms, sigmoid
from ..frame import FactorPanel
from .base import ImportanceTable, Predictor, PredictorError, training_data

log = logging.getLogger(__name__)

RIDGE = 1e-6
SEPARATION_TOL = 1e-6


def fit_logit(X: np.ndarray, y: np.ndarray, ridge: float = RIDGE, max_iter: int = 200,
              tol: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Newton-Raphson on the log likelihood minus ``ridge/2 * |beta[1:]|^2``.

    ``X`` carries no intercept column; the returned vector is (b0, b1..bk).
    The intercept is not penalised. Returns (beta, converged).
    """
    n, k = X.shape
    Z = np.column_stack([np.ones(n), X])
    pen = np.full(k + 1, ridge)
    pen[0] = 0.0
    ybar = np.clip(y.mean(), 1e-12, 1 - 1e-12)
    beta = np.zeros(k + 1)
    beta[0] = np.log(ybar / (1 - ybar))
    obj = _penalised(Z, y, beta, pen)
    for _ in range(max_iter):
        p = sigmoid(Z @ beta)
        grad = Z.T @ (y - p) - pen * beta
        w = p * (1 - p)
        H = (Z * w[:, None]).T @ Z + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # step halving keeps the objective monotone under near-separation
        t = 1.0
        while True:
            cand = beta + t * step
            new = _penalised(Z, y, cand, pen)
            if new >= obj - 1e-14 * max(1.0, abs(obj)) or t < 1e-10:
                break
            t *= 0.5
        done = abs(new - obj) <= tol * max(1.0, abs(obj)) and np.max(np.abs(t * step)) < 1e-8
        beta, obj = cand, new
        if done:
            return beta, True
    return beta, False


def _penalised(Z, y, beta, pen) -> float:
    return float(-np.sum(log_loss_terms(y, Z @ beta)) - 0.5 * np.sum(pen * beta * beta))


def log_likelihood(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    z = beta[0] + (X @ beta[1:] if X.shape[1] else 0.0)
    return float(-np.sum(log_loss_terms(y, z)))


def _separated(X, y, beta) -> bool:
    p = sigmoid(beta[0] + (X @ beta[1:] if X.shape[1] else 0.0))
    return bool(np.all(np.abs(p - y) < SEPARATION_TOL))


def fit_stepwise_logit(features: FactorPanel, labels, alpha: float = 0.05, seed: int = 0,
                       ridge: float = RIDGE) -> Predictor:
    """Backward elimination: drop the variable with the smallest likelihood-ratio
    statistic while that statistic is at or below the chi2(1) critical value."""
    if not 0.0 < alpha < 1.0:
        raise PredictorError("alpha must lie in (0, 1)")
    X, y = training_data(features, labels)
    names = list(features.columns)
    critical = float(stats.chi2.ppf(1.0 - alpha, 1))
    keep = list(range(len(names)))
    eliminated: list[dict] = []
    beta, converged = fit_logit(X[:, keep], y, ridge)
    while keep:
        ll_full = log_likelihood(X[:, keep], y, beta)
        lr = []
        for j in range(len(keep)):
            sub = keep[:j] + keep[j + 1:]
            b_sub, _ = fit_logit(X[:, sub], y, ridge)
            lr.append(2.0 * (ll_full - log_likelihood(X[:, sub], y, b_sub)))
        j = int(np.argmin(lr))
        if lr[j] > critical:
            break
        eliminated.append({"feature": names[keep[j]], "statistic": float(lr[j])})
        del keep[j]
        beta, converged = fit_logit(X[:, keep], y, ridge)
    separated = _separated(X[:, keep], y, beta)
    if separated:
        log.warning("perfect separation in stepwise logit; ridge penalty keeps estimates finite")
    if not converged:
        log.warning("stepwise logit Newton iterations did not converge")
    retained = [names[i] for i in keep]
    state = {
        "intercept": float(beta[0]),
        "coefficients": np.asarray(beta[1:], dtype=float),
        "used_features": retained,
        "elimination_order": eliminated,
        "critical_value": critical,
        "separation": separated,
        "converged": converged,
        "log_likelihood": log_likelihood(X[:, keep], y, beta),
    }
    return Predictor("stepwise_logit", {"alpha": alpha, "ridge": ridge}, state, names, seed)


def predict_proba(model: Predictor, X: np.ndarray) -> np.ndarray:
    coef = np.asarray(model.state["coefficients"], dtype=float)
    z = model.state["intercept"] + (X @ coef if coef.size else np.zeros(X.shape[0]))
    return sigmoid(z)


def importance(model: Predictor, features=None, labels=None) -> ImportanceTable:
    coef = dict(zip(model.state["used_features"], np.asarray(model.state["coefficients"])))
    scores = [coef.get(n, np.nan) for n in model.feature_names]
    return ImportanceTable.from_scores(model.feature_names, scores, "coefficient")
