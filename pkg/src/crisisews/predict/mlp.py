"""Three-layer perceptron (ReLU hidden layer, sigmoid output)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .._stats import log_loss_terms, sigmoid
from ..frame import FactorPanel
from .base import ImportanceTable, Predictor, PredictorError, stream, training_data

log = logging.getLogger(__name__)

HIDDEN_OPTIONS = (2, 4, 8, 16, 32)
IMPORTANCE_FLOOR = 0.1  # percentage points


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class MlpParams:
    W1: np.ndarray  # hidden x inputs
    b1: np.ndarray
    w2: np.ndarray  # hidden
    b2: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def unflat(cls, v: np.ndarray, n_in: int, hidden: int) -> "MlpParams":
        i = hidden * n_in
        return cls(v[:i].reshape(hidden, n_in), v[i:i + hidden].copy(),
                   v[i + hidden:i + 2 * hidden].copy(), float(v[-1]))

    @classmethod
    def zeros(cls, n_in: int, hidden: int) -> "MlpParams":
        return cls(np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros(hidden), 0.0)


def forward(params: MlpParams, X: np.ndarray) -> np.ndarray:
    return sigmoid(relu(X @ params.W1.T + params.b1) @ params.w2 + params.b2)


def loss_and_grad(params: MlpParams, X: np.ndarray, y: np.ndarray, l2: float,
                  mask: np.ndarray | None = None) -> tuple[float, MlpParams]:
    """Mean cross-entropy plus ``l2/2`` times the squared weights (biases unpenalised).

    ``mask`` multiplies the inputs (inverted dropout) when given.
    """
    Xi = X if mask is None else X * mask
    pre = Xi @ params.W1.T + params.b1
    hid = relu(pre)
    z = hid @ params.w2 + params.b2
    n = X.shape[0]
    loss = float(np.mean(log_loss_terms(y, z))
                 + 0.5 * l2 * (np.sum(params.W1 ** 2) + np.sum(params.w2 ** 2)))
    dz = (sigmoid(z) - y) / n
    gw2 = hid.T @ dz + l2 * params.w2
    gb2 = float(dz.sum())
    dpre = np.outer(dz, params.w2) * (pre > 0)
    gW1 = dpre.T @ Xi + l2 * params.W1
    gb1 = dpre.sum(axis=0)
    return loss, MlpParams(gW1, gb1, gw2, gb2)


def _init(n_in: int, hidden: int, rng: np.random.Generator) -> MlpParams:
    W1 = rng.normal(0.0, np.sqrt(2.0 / n_in), (hidden, n_in))
    w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), hidden)
    return MlpParams(W1, np.zeros(hidden), w2, 0.0)


def fit_mlp(features: FactorPanel, labels, hidden: int = 8, l2: float = 1e-3, epochs: int = 100,
            seed: int = 0, learning_rate: float = 0.01, patience: int = 10,
            validation: float = 0.1, dropout: float = 0.0) -> Predictor:
    if hidden not in HIDDEN_OPTIONS:
        raise PredictorError(f"hidden must be one of {HIDDEN_OPTIONS}")
    if not 0.0 <= dropout < 1.0:
        raise PredictorError("dropout must lie in [0, 1)")
    X, y = training_data(features, labels)
    params, history = _train(X, y, hidden, l2, epochs, seed, learning_rate, patience, validation, dropout)
    hyper = {"hidden": hidden, "l2": l2, "epochs": epochs, "learning_rate": learning_rate,
             "patience": patience, "validation": validation, "dropout": dropout}
    state = {"W1": params.W1, "b1": params.b1, "w2": params.w2, "b2": params.b2,
             "used_features": list(features.columns), **history}
    return Predictor("mlp", hyper, state, features.columns, seed)


def _train(X, y, hidden, l2, epochs, seed, lr, patience, validation, dropout):
    n, n_in = X.shape
    n_val = int(round(validation * n)) if validation > 0 else 0
    if n_val and n - n_val < 2:
        raise PredictorError("too few rows for the validation split")
    Xt, yt = X[: n - n_val], y[: n - n_val]
    Xv, yv = X[n - n_val:], y[n - n_val:]
    params = _init(n_in, hidden, stream(seed, 1))
    drop_rng = stream(seed, 2)
    best, best_val, best_epoch, waited = params, np.inf, 0, 0
    losses = []
    for epoch in range(1, epochs + 1):
        mask = None
        if dropout > 0:
            mask = (drop_rng.random(Xt.shape) >= dropout) / (1.0 - dropout)
        loss, g = loss_and_grad(params, Xt, yt, l2, mask)
        if not np.isfinite(loss):
            raise PredictorError(f"non-finite training loss at epoch {epoch}")
        params = MlpParams(params.W1 - lr * g.W1, params.b1 - lr * g.b1,
                           params.w2 - lr * g.w2, params.b2 - lr * g.b2)
        losses.append(loss)
        if n_val:
            val = float(np.mean(log_loss_terms(yv, _logit(params, Xv))))
            if val < best_val - 1e-12:
                best, best_val, best_epoch, waited = params, val, epoch, 0
            else:
                waited += 1
                if waited >= patience:
                    break
        else:
            best, best_epoch = params, epoch
    return best, {"train_loss": np.asarray(losses), "best_epoch": best_epoch,
                  "best_validation_loss": float(best_val) if n_val else float("nan")}


def _logit(params: MlpParams, X):
    return relu(X @ params.W1.T + params.b1) @ params.w2 + params.b2


def _params(model: Predictor) -> MlpParams:
    s = model.state
    return MlpParams(np.asarray(s["W1"]), np.asarray(s["b1"]), np.asarray(s["w2"]), float(s["b2"]))


def predict_proba(model: Predictor, X: np.ndarray) -> np.ndarray:
    return forward(_params(model), X)


def _accuracy(model: Predictor, features: FactorPanel, y: np.ndarray, threshold: float) -> float:
    return float(np.mean((model.predict_proba(features) >= threshold) == (y > 0.5)))


def importance(model: Predictor, features: FactorPanel | None = None, labels=None,
               threshold: float = 0.5) -> ImportanceTable:
    """Drop-one accuracy loss in percentage points; refits use the same seed
    and hyperparameters. Losses under 0.1 points are reported as 0."""
    if features is None or labels is None:
        raise PredictorError("MLP importance needs the training features and labels")
    _, y = training_data(features, labels)
    base = _accuracy(model, features, y, threshold)
    names = list(model.feature_names)
    hp = {k: model.hyperparams[k] for k in ("hidden", "l2", "epochs", "learning_rate",
                                            "patience", "validation", "dropout")}
    scores = []
    for name in names:
        if len(names) == 1:
            reduced = None
        else:
            sub = features.drop([name])
            reduced = fit_mlp(sub, labels, seed=model.seed, **hp)
        if reduced is None:
            acc = float(np.mean(y == (np.mean(y) >= threshold)))
        else:
            acc = _accuracy(reduced, features.drop([name]), y, threshold)
        loss = 100.0 * (base - acc)
        scores.append(loss if loss >= IMPORTANCE_FLOOR else 0.0)
    return ImportanceTable.from_scores(names, scores, "drop_one_accuracy")
