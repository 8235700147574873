"""Attention layer feeding a single LSTM layer, sigmoid head, trained by BPTT.

Attention: feature scores ``e[t, i] = tanh(Wa[i] * x[t, i] + ba[i])`` share
``Wa, ba`` across timesteps; the timestep score is their mean over features
and ``alpha = softmax_t``. The LSTM input is ``d[t] = alpha[t] * x[t]``.
Gates (order f, u, o, c) are ``sigma(d U + a W + b)`` with a tanh candidate;
``C_0 = a_0 = 0``. The forecast for row ``t`` uses rows ``t - T + 1 .. t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._stats import log_loss_terms, sigmoid
from ..frame import FactorPanel
from .base import ImportanceTable, Predictor, PredictorError, stream, training_data

ATTENTION_READING = "shared feature-wise tanh scores, mean over features, softmax over timesteps"


@dataclass
class LstmParams:
    Wa: np.ndarray  # (n,)
    ba: np.ndarray  # (n,)
    U: np.ndarray  # (n, 4h)
    W: np.ndarray  # (h, 4h)
    b: np.ndarray  # (4h,)
    v: np.ndarray  # (h,)
    c: float

    _ORDER = ("Wa", "ba", "U", "W", "b", "v")

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in self._ORDER] + [np.array([self.c])])

    @classmethod
    def unflat(cls, vec: np.ndarray, n: int, h: int) -> "LstmParams":
        shapes = {"Wa": (n,), "ba": (n,), "U": (n, 4 * h), "W": (h, 4 * h), "b": (4 * h,), "v": (h,)}
        out, i = {}, 0
        for k in cls._ORDER:
            size = int(np.prod(shapes[k]))
            out[k] = vec[i:i + size].reshape(shapes[k]).copy()
            i += size
        return cls(c=float(vec[i]), **out)

    @classmethod
    def zeros(cls, n: int, h: int) -> "LstmParams":
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 4 * h)), np.zeros((h, 4 * h)),
                   np.zeros(4 * h), np.zeros(h), 0.0)

    @property
    def hidden(self) -> int:
        return self.v.size


def windows(X: np.ndarray, T: int, pad: bool = True) -> np.ndarray:
    """(rows, T, n) stack of trailing windows. With ``pad`` every row gets a
    window (the first ``T - 1`` repeat row 0 on the left); otherwise only
    rows ``T - 1 ..`` do."""
    if pad:
        X = np.concatenate([np.repeat(X[:1], T - 1, axis=0), X])
    view = np.lib.stride_tricks.sliding_window_view(X, T, axis=0)  # (rows, n, T)
    return np.ascontiguousarray(np.transpose(view, (0, 2, 1)))


def _attention(p: LstmParams, Xw: np.ndarray):
    e = np.tanh(Xw * p.Wa + p.ba)  # (B, T, n)
    s = e.mean(axis=2)
    s = s - s.max(axis=1, keepdims=True)
    alpha = np.exp(s)
    alpha /= alpha.sum(axis=1, keepdims=True)
    return e, alpha


def forward(p: LstmParams, Xw: np.ndarray, keep: bool = False):
    B, T, n = Xw.shape
    h = p.hidden
    e, alpha = _attention(p, Xw)
    d = alpha[:, :, None] * Xw
    a = np.zeros((B, h))
    C = np.zeros((B, h))
    cache = []
    for t in range(T):
        z = d[:, t] @ p.U + a @ p.W + p.b
        gf, gu, go = sigmoid(z[:, :h]), sigmoid(z[:, h:2 * h]), sigmoid(z[:, 2 * h:3 * h])
        cand = np.tanh(z[:, 3 * h:])
        C_prev, a_prev = C, a
        C = gf * C_prev + gu * cand
        tc = np.tanh(C)
        a = go * tc
        if keep:
            cache.append((a_prev, C_prev, gf, gu, go, cand, tc))
    logit = a @ p.v + p.c
    return logit, (e, alpha, d, a, cache)


def loss_and_grad(p: LstmParams, Xw: np.ndarray, y: np.ndarray, l2: float = 0.0
                  ) -> tuple[float, LstmParams]:
    """Mean cross-entropy (+ ``l2/2`` times squared non-bias weights) and its
    gradient by backpropagation through time."""
    B, T, n = Xw.shape
    h = p.hidden
    logit, (e, alpha, d, a_T, cache) = forward(p, Xw, keep=True)
    loss = float(np.mean(log_loss_terms(y, logit)))
    loss += 0.5 * l2 * sum(float(np.sum(w * w)) for w in (p.Wa, p.U, p.W, p.v))
    dz = (sigmoid(logit) - y) / B
    g = LstmParams.zeros(n, h)
    g.v = a_T.T @ dz + l2 * p.v
    g.c = float(dz.sum())
    da = np.outer(dz, p.v)
    dC = np.zeros((B, h))
    dd = np.zeros_like(d)
    for t in range(T - 1, -1, -1):
        a_prev, C_prev, gf, gu, go, cand, tc = cache[t]
        dC = dC + da * go * (1.0 - tc * tc)
        dzs = np.concatenate([
            dC * C_prev * gf * (1.0 - gf),
            dC * cand * gu * (1.0 - gu),
            da * tc * go * (1.0 - go),
            dC * gu * (1.0 - cand * cand),
        ], axis=1)
        g.U += d[:, t].T @ dzs
        g.W += a_prev.T @ dzs
        g.b += dzs.sum(axis=0)
        dd[:, t] = dzs @ p.U.T
        da = dzs @ p.W.T
        dC = dC * gf
    g.U += l2 * p.U
    g.W += l2 * p.W
    dalpha = np.sum(dd * Xw, axis=2)
    ds = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dpre = (ds[:, :, None] / n) * (1.0 - e * e)
    g.Wa = np.sum(dpre * Xw, axis=(0, 1)) + l2 * p.Wa
    g.ba = np.sum(dpre, axis=(0, 1))
    return loss, g


def _init(n: int, h: int, rng: np.random.Generator) -> LstmParams:
    Wa = rng.uniform(-0.5, 0.5, n)
    U = rng.normal(0.0, 1.0 / np.sqrt(n), (n, 4 * h))
    W = rng.normal(0.0, 1.0 / np.sqrt(h), (h, 4 * h))
    v = rng.normal(0.0, 1.0 / np.sqrt(h), h)
    return LstmParams(Wa, np.zeros(n), U, W, np.zeros(4 * h), v, 0.0)


class _Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


def fit_attn_lstm(features: FactorPanel, labels, T_steps: int = 6, hidden: int = 8, epochs: int = 50,
                  seed: int = 0, learning_rate: float = 0.01, l2: float = 0.0, patience: int = 10,
                  validation: float = 0.1) -> Predictor:
    if T_steps < 2:
        raise PredictorError("T_steps must be at least 2")
    if hidden < 1:
        raise PredictorError("hidden must be positive")
    X, y = training_data(features, labels)
    if X.shape[0] < T_steps:
        raise PredictorError(f"window of {T_steps} steps is longer than the {X.shape[0]} rows")
    Xw = windows(X, T_steps, pad=False)
    yw = y[T_steps - 1:]
    n_val = int(round(validation * yw.size)) if validation > 0 else 0
    if n_val and yw.size - n_val < 2:
        n_val = 0
    Xt, yt, Xv, yv = Xw[: yw.size - n_val], yw[: yw.size - n_val], Xw[yw.size - n_val:], yw[yw.size - n_val:]
    n = X.shape[1]
    p = _init(n, hidden, stream(seed, 1))
    theta = p.flat()
    opt = _Adam(theta.size, learning_rate)
    best, best_val, best_epoch, waited, losses = theta, np.inf, 0, 0, []
    for epoch in range(1, epochs + 1):
        loss, g = loss_and_grad(LstmParams.unflat(theta, n, hidden), Xt, yt, l2)
        if not np.isfinite(loss):
            raise PredictorError(f"non-finite training loss at epoch {epoch}")
        theta = opt.step(theta, g.flat())
        losses.append(loss)
        if n_val:
            logit, _ = forward(LstmParams.unflat(theta, n, hidden), Xv)
            val = float(np.mean(log_loss_terms(yv, logit)))
            if val < best_val - 1e-12:
                best, best_val, best_epoch, waited = theta, val, epoch, 0
            else:
                waited += 1
                if waited >= patience:
                    break
        else:
            best, best_epoch = theta, epoch
    params = LstmParams.unflat(best, n, hidden)
    state = {"theta": best, "n_inputs": n, "used_features": list(features.columns),
             "train_loss": np.asarray(losses), "best_epoch": best_epoch,
             "attention": ATTENTION_READING}
    state["importance"] = attention_shares(params, windows(X, T_steps, pad=False))
    hyper = {"T_steps": T_steps, "hidden": hidden, "epochs": epochs, "learning_rate": learning_rate,
             "l2": l2, "patience": patience, "validation": validation, "optimizer": "adam"}
    return Predictor("attn_lstm", hyper, state, features.columns, seed)


def _params(model: Predictor) -> LstmParams:
    return LstmParams.unflat(np.asarray(model.state["theta"]), int(model.state["n_inputs"]),
                             int(model.hyperparams["hidden"]))


def predict_proba(model: Predictor, X: np.ndarray) -> np.ndarray:
    logit, _ = forward(_params(model), windows(X, int(model.hyperparams["T_steps"])))
    return sigmoid(logit)


def attention_shares(p: LstmParams, Xw: np.ndarray) -> np.ndarray:
    """Percent attention mass per feature: the timestep weights spread over
    features by a softmax of the absolute feature scores, averaged over windows."""
    e, alpha = _attention(p, Xw)
    mag = np.abs(e)
    beta = np.exp(mag - mag.max(axis=2, keepdims=True))
    beta /= beta.sum(axis=2, keepdims=True)
    mass = np.sum(alpha[:, :, None] * beta, axis=1)  # (B, n), rows sum to 1
    return 100.0 * mass.mean(axis=0)


def importance(model: Predictor, features: FactorPanel | None = None, labels=None) -> ImportanceTable:
    if features is None:
        shares = np.asarray(model.state["importance"], dtype=float)
    else:
        X = features.values(list(model.feature_names))
        shares = attention_shares(_params(model), windows(X, int(model.hyperparams["T_steps"])))
    return ImportanceTable.from_scores(model.feature_names, shares, "attention")
