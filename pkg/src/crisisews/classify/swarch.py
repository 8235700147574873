"""AR(p)-SWARCH(K, q): autoregression with regime-scaled ARCH variance.

The conditional variance of the AR residual is::

    h_t = g[s_t] * (a0 + sum_j a_j * e_{t-j}**2 / g[s_{t-j}])

with the hidden regime ``s_t`` following a K-state Markov chain. Because the
ARCH terms depend on the last q regimes, the Hamilton filter runs over the
K**(q+1) composite histories ``(s_t, ..., s_{t-q})``. The likelihood is
conditional on the first ``p + q`` observations; the composite state at that
point starts from the chain's ergodic distribution.

Scales are ordered, ``1 = g[0] < g[1] < ...``, so the last regime is always the
high-volatility one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


class SwarchError(ValueError):
    """Invalid data or settings for a SWARCH fit."""


@dataclass(frozen=True)
class RegimeModel:
    K: int
    p: int
    q: int
    intercept: float
    ar: np.ndarray          # theta_1..theta_p
    arch: np.ndarray        # alpha_0..alpha_q
    scales: np.ndarray      # gamma_1..gamma_K, gamma_1 == 1
    transition: np.ndarray  # K x K, rows sum to one
    log_likelihood: float
    filtered: np.ndarray    # T x K
    n_obs: int
    converged: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def start(self) -> int:
        """First index entering the conditional likelihood."""
        return self.p + self.q

    def params_vector(self) -> np.ndarray:
        return _to_unconstrained(self.intercept, self.ar, self.arch, self.scales, self.transition)

    def report(self) -> str:
        lines = [
            f"AR({self.p})-SWARCH({self.K},{self.q})",
            f"observations        {self.n_obs}",
            f"log likelihood      {self.log_likelihood:.6f}",
            f"converged           {self.converged}",
            f"intercept u         {self.intercept:.6g}",
        ]
        for i, th in enumerate(self.ar, start=1):
            lines.append(f"theta_{i:<13d}{th:.6g}")
        for j, a in enumerate(self.arch):
            lines.append(f"alpha_{j:<13d}{a:.6g}")
        for k, g in enumerate(self.scales, start=1):
            lines.append(f"gamma_{k:<13d}{g:.6g}")
        lines.append("transition")
        for row in self.transition:
            lines.append("  " + "  ".join(f"{v:.6f}" for v in row))
        lines.append(f"RCM                 {rcm(self):.4f}")
        return "\n".join(lines) + "\n"

    def write(self, report_path: "str | Path", filtered_path: "str | Path", dates=None) -> None:
        Path(report_path).write_text(self.report(), encoding="utf-8")
        header = ",".join(["date" if dates is not None else "t"] +
                          [f"regime_{k + 1}" for k in range(self.K)])
        with Path(filtered_path).open("w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for t, row in enumerate(self.filtered):
                key = dates[t].strftime("%Y-%m-%d") if dates is not None else str(t)
                fh.write(key + "," + ",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# filter


@numba.njit(cache=True)
def _hamilton(y, u, theta, alpha, gamma, P, pi, filtered):
    """Run the filter, writing marginal regime probabilities into ``filtered``.

    Returns the conditional log likelihood.
    """
    T = y.shape[0]
    p = theta.shape[0]
    q = alpha.shape[0] - 1
    K = gamma.shape[0]
    N = K ** (q + 1)
    t0 = p + q

    eps = np.zeros(T)
    for t in range(p, T):
        m = u
        for i in range(p):
            m += theta[i] * y[t - 1 - i]
        eps[t] = y[t] - m

    digits = np.empty((N, q + 1), dtype=np.int64)
    for c in range(N):
        r = c
        for j in range(q + 1):
            digits[c, j] = r % K
            r //= K

    pred = np.empty(N)
    for c in range(N):
        pr = pi[digits[c, q]]
        for j in range(q):
            pr *= P[digits[c, j + 1], digits[c, j]]
        pred[c] = pr

    for t in range(min(t0, T)):
        for k in range(K):
            filtered[t, k] = pi[k]

    Kq = N // K
    marg = np.empty(Kq)
    logf = np.empty(N)
    xi = np.empty(N)
    loglik = 0.0
    for t in range(t0, T):
        if t > t0:
            for m in range(Kq):
                s = 0.0
                for x in range(K):
                    s += xi[m + Kq * x]
                marg[m] = s
            if q > 0:
                for c in range(N):
                    pred[c] = P[digits[c, 1], digits[c, 0]] * marg[c // K]
            else:
                for k in range(K):
                    s = 0.0
                    for j in range(K):
                        s += xi[j] * P[j, k]
                    pred[k] = s
        best = -np.inf
        for c in range(N):
            h = alpha[0]
            for j in range(1, q + 1):
                h += alpha[j] * eps[t - j] * eps[t - j] / gamma[digits[c, j]]
            h *= gamma[digits[c, 0]]
            if pred[c] > 0.0:
                logf[c] = math.log(pred[c]) - 0.5 * (_LOG_2PI + math.log(h) + eps[t] * eps[t] / h)
            else:
                logf[c] = -np.inf
            if logf[c] > best:
                best = logf[c]
        total = 0.0
        for c in range(N):
            xi[c] = math.exp(logf[c] - best)
            total += xi[c]
        loglik += best + math.log(total)
        for k in range(K):
            filtered[t, k] = 0.0
        for c in range(N):
            xi[c] /= total
            filtered[t, digits[c, 0]] += xi[c]
    return loglik


def ergodic(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix."""
    K = P.shape[0]
    if K == 1:
        return np.ones(1)
    A = np.vstack([P.T - np.eye(K), np.ones(K)])
    b = np.zeros(K + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def filter_probabilities(y, intercept, ar, arch, scales, transition) -> tuple[float, np.ndarray]:
    """Log likelihood and T x K filtered regime probabilities."""
    y = np.ascontiguousarray(y, dtype=float)
    P = np.ascontiguousarray(transition, dtype=float)
    K = P.shape[0]
    filtered = np.empty((y.size, K))
    ll = _hamilton(y, float(intercept), np.ascontiguousarray(ar, dtype=float),
                   np.ascontiguousarray(arch, dtype=float),
                   np.ascontiguousarray(scales, dtype=float), P, ergodic(P), filtered)
    # renormalise away rounding so rows sum to one at machine precision
    filtered /= filtered.sum(axis=1, keepdims=True)
    return float(ll), filtered


def log_likelihood(y, intercept, ar, arch, scales, transition) -> float:
    return filter_probabilities(y, intercept, ar, arch, scales, transition)[0]


# ---------------------------------------------------------------------------
# parameterisation


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _unpack(z: np.ndarray, K: int, p: int, q: int):
    i = 0
    u = z[i]; i += 1
    theta = z[i:i + p]; i += p
    arch = np.exp(z[i:i + q + 1]); i += q + 1
    steps = np.exp(z[i:i + K - 1]); i += K - 1
    scales = np.concatenate([[1.0], 1.0 + np.cumsum(steps)])
    logits = np.zeros((K, K))
    if K > 1:
        logits[:, :K - 1] = z[i:i + K * (K - 1)].reshape(K, K - 1)
    P = _softmax_rows(logits)
    return u, theta, arch, scales, P


def _to_unconstrained(u, theta, arch, scales, P) -> np.ndarray:
    K = P.shape[0]
    steps = np.diff(np.asarray(scales, dtype=float))
    logP = np.log(np.clip(P, 1e-300, None))
    logits = (logP - logP[:, -1:])[:, :K - 1]
    return np.concatenate([[u], theta, np.log(arch), np.log(np.clip(steps, 1e-300, None)),
                           logits.ravel()])


def _bounds(K: int, p: int, q: int, var: float) -> list[tuple[float, float]]:
    lv = math.log(var)
    b = [(None, None)] + [(-5.0, 5.0)] * p
    b += [(lv - 15.0, lv + 5.0)] + [(-15.0, 1.0)] * q
    b += [(-10.0, 6.0)] * (K - 1)
    b += [(-15.0, 15.0)] * (K * (K - 1))
    return b


def _random_start(rng: np.random.Generator, y: np.ndarray, K: int, p: int, q: int) -> np.ndarray:
    var = float(np.var(y))
    theta = rng.uniform(-0.2, 0.2, p)
    u = float(np.mean(y)) * (1.0 - theta.sum())
    arch_lags = rng.uniform(0.0, 0.3, q)
    ratio = math.exp(rng.uniform(math.log(1.5), math.log(50.0)))
    scales = np.geomspace(1.0, ratio, K) if K > 1 else np.ones(1)
    low_share = rng.uniform(0.5, 0.9)
    a0 = var / (low_share + (1 - low_share) * scales[-1]) * max(1.0 - arch_lags.sum(), 0.1)
    stay = rng.uniform(0.7, 0.99, K)
    P = np.full((K, K), 0.0)
    for k in range(K):
        P[k] = (1 - stay[k]) / max(K - 1, 1)
        P[k, k] = stay[k] if K > 1 else 1.0
    return _to_unconstrained(u, theta, np.concatenate([[a0], np.maximum(arch_lags, 1e-4)]),
                             scales, P)


def _heuristic_start(y: np.ndarray, K: int, p: int, q: int) -> np.ndarray:
    """Data-driven start: split local variance into K quantile bands."""
    var = float(np.var(y))
    dev2 = (y - y.mean()) ** 2
    w = max(5, min(50, y.size // 20))
    local = np.convolve(dev2, np.ones(w) / w, mode="same")
    if K > 1:
        qs = np.quantile(local, np.linspace(0, 1, K + 1))
        band = np.clip(np.searchsorted(qs[1:-1], local, side="right"), 0, K - 1)
        means = np.array([local[band == k].mean() if np.any(band == k) else var for k in range(K)])
        means = np.maximum.accumulate(np.maximum(means, 1e-12 * var))
        scales = np.concatenate([[1.0], 1.0 + np.cumsum(np.maximum(np.diff(means / means[0]), 0.05))])
        base = means[0]
    else:
        scales = np.ones(1)
        base = var
    arch_lags = np.full(q, 0.1)
    a0 = base * (1 - arch_lags.sum())
    P = np.full((K, K), 0.05 / max(K - 1, 1))
    np.fill_diagonal(P, 0.95 if K > 1 else 1.0)
    return _to_unconstrained(float(y.mean()), np.zeros(p), np.concatenate([[a0], arch_lags]),
                             scales, P)


def _negloglik(z, y, K, p, q, buf):
    u, theta, arch, scales, P = _unpack(z, K, p, q)
    ll = _hamilton(y, u, theta, arch, scales, P, ergodic(P), buf)
    if not np.isfinite(ll):
        return 1e300
    return -ll


def fit_swarch(returns, K: int = 2, p: int = 1, q: int = 1, seed: int = 0,
               n_starts: int = 20, init: "RegimeModel | None" = None,
               maxiter: int = 500) -> RegimeModel:
    """Maximum-likelihood AR(p)-SWARCH(K, q) fit with seeded multistarts.

    The first start is data-driven (or ``init`` when given, e.g. a fit on a
    longer sample); the remaining ``n_starts - 1`` are random feasible draws.
    The best optimum by likelihood is kept.
    """
    y = np.ascontiguousarray(returns, dtype=float)
    if not 1 <= K <= 4:
        raise SwarchError(f"K must be in 1..4, got {K}")
    if not (0 <= p <= 3 and 0 <= q <= 3):
        raise SwarchError("AR and ARCH orders must be in 0..3")
    if y.size < 30 * K:
        raise SwarchError(f"need at least {30 * K} observations for K={K}, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise SwarchError("returns contain missing or non-finite values")
    if not np.std(y) > 0:
        raise SwarchError("degenerate data: constant returns")

    var = float(np.var(y))
    bounds = _bounds(K, p, q, var)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    rng = np.random.default_rng(np.random.SeedSequence([seed, K, p, q]))
    starts = [init.params_vector() if init is not None and (init.K, init.p, init.q) == (K, p, q)
              else _heuristic_start(y, K, p, q)]
    starts += [_random_start(rng, y, K, p, q) for _ in range(max(n_starts, 1) - 1)]

    buf = np.empty((y.size, K))
    best = None
    for z0 in starts:
        z0 = np.clip(z0, lo, hi)
        res = optimize.minimize(_negloglik, z0, args=(y, K, p, q, buf), method="L-BFGS-B",
                                bounds=bounds, options={"maxiter": maxiter})
        if best is None or res.fun < best.fun:
            best = res
    converged = bool(best.success) and np.isfinite(best.fun) and best.fun < 1e299
    if not converged:
        logger.warning("SWARCH optimiser did not converge (%s); keeping best-so-far", best.message)
    u, theta, arch, scales, P = _unpack(best.x, K, p, q)
    ll, filtered = filter_probabilities(y, u, theta, arch, scales, P)
    return RegimeModel(K, p, q, float(u), theta.copy(), arch, scales, P, ll, filtered, y.size,
                       converged, {"n_starts": len(starts), "seed": seed})


def refilter(model: RegimeModel, returns) -> RegimeModel:
    """Apply fitted parameters to another series without re-estimation."""
    y = np.asarray(returns, dtype=float)
    ll, filtered = filter_probabilities(y, model.intercept, model.ar, model.arch,
                                        model.scales, model.transition)
    return replace(model, log_likelihood=ll, filtered=filtered, n_obs=y.size)


def filtered_high_vol(model: RegimeModel) -> np.ndarray:
    """Filtered probability of the highest-scale regime at each time."""
    return model.filtered[:, -1].copy()


RCM_KINDS = ("product", "dispersion")


def rcm_from_probabilities(probs: np.ndarray, kind: str = "product") -> float:
    """Regime classification measure on a T x K probability matrix; 0 is sharp.

    ``product``: ``100 K^2 mean_t prod_k p_{t,k}``.
    ``dispersion``: ``100 (1 - K/(K-1) mean_t sum_k (p_{t,k} - 1/K)^2)``.
    Both equal ``400 mean p(1-p)`` for two regimes. The product form collapses
    to 0 whenever any regime is unused, so it cannot penalise a regime that
    duplicates another; the dispersion form can. One regime scores 100.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    K = probs.shape[1]
    if kind == "product":
        return float(100.0 * K * K * np.mean(np.prod(probs, axis=1)))
    if kind == "dispersion":
        if K == 1:
            return 100.0
        spread = np.sum((probs - 1.0 / K) ** 2, axis=1)
        return float(100.0 * (1.0 - K / (K - 1) * np.mean(spread)))
    raise ValueError(f"unknown RCM kind {kind!r}")


def rcm(model: RegimeModel, kind: str = "product") -> float:
    return rcm_from_probabilities(model.filtered[model.start:], kind)


def select_regimes(returns, candidates=(1, 2, 3), p: int = 1, q: int = 1, seed: int = 0,
                   n_starts: int = 20, kind: str = "dispersion") -> tuple[int, dict[int, float]]:
    """Pick the regime count with the lowest RCM among ``candidates``.

    Defaults to the dispersion form, which stays meaningful when a fit splits
    one true regime into two near-identical states. A single-regime model
    scores the maximal RCM of 100, so it is chosen only when no multi-regime
    fit is possible.
    """
    scores: dict[int, float] = {}
    for K in candidates:
        try:
            scores[K] = rcm(fit_swarch(returns, K, p, q, seed=seed, n_starts=n_starts), kind)
        except SwarchError:
            continue
    if not scores:
        raise SwarchError("no candidate regime count could be fitted")
    return min(scores, key=lambda k: (scores[k], k)), scores
