"""Synthetic AR-SWARCH return panels with known regimes and leading factors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .frame import FactorPanel, Frequency


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SwarchSpec:
    transition: np.ndarray
    scales: np.ndarray
    arch: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.2]))
    intercept: float = 0.05
    ar: np.ndarray = field(default_factory=lambda: np.array([0.1]))
    initial_state: int = 0

    def __post_init__(self) -> None:
        P = np.atleast_2d(np.asarray(self.transition, dtype=float))
        g = np.atleast_1d(np.asarray(self.scales, dtype=float))
        a = np.atleast_1d(np.asarray(self.arch, dtype=float))
        K = P.shape[0]
        if P.shape != (K, K):
            raise SimulationError("transition matrix must be square")
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-10):
            raise SimulationError("transition rows must be non-negative and sum to one")
        if g.shape != (K,) or np.any(g <= 0):
            raise SimulationError("need one positive scale per regime")
        if a.size < 1 or a[0] <= 0 or np.any(a < 0):
            raise SimulationError("ARCH coefficients must be non-negative with alpha_0 > 0")
        if not 0 <= self.initial_state < K:
            raise SimulationError("initial state out of range")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "scales", g)
        object.__setattr__(self, "arch", a)
        object.__setattr__(self, "ar", np.atleast_1d(np.asarray(self.ar, dtype=float)))

    @classmethod
    def two_regime(cls, ratio: float = 10.0, persistence: float = 0.98, **kw) -> "SwarchSpec":
        P = np.array([[persistence, 1 - persistence], [1 - persistence, persistence]])
        return cls(P, np.array([1.0, ratio]), **kw)

    @property
    def K(self) -> int:
        return self.transition.shape[0]

    @property
    def high_regime(self) -> int:
        """0-based index of the most volatile regime."""
        return int(np.argmax(self.scales))


def simulate_swarch(spec: SwarchSpec, T: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``T`` returns and the 0-based regime path."""
    if T < 1:
        raise SimulationError("T must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    K, P, g, a = spec.K, spec.transition, spec.scales, spec.arch
    q, p = a.size - 1, spec.ar.size
    cum = np.cumsum(P, axis=1)
    states = np.empty(T, dtype=np.int64)
    states[0] = spec.initial_state
    draws = rng.random(T)
    for t in range(1, T):
        states[t] = min(int(np.searchsorted(cum[states[t - 1]], draws[t], side="right")), K - 1)
    z = rng.standard_normal(T)
    persist = a[1:].sum()
    ustd2 = a[0] / (1 - persist) if persist < 1 else a[0]
    scaled_hist = np.full(q, ustd2)  # e^2 / g for the last q periods
    y = np.zeros(T)
    mean0 = spec.intercept / (1 - spec.ar.sum()) if abs(spec.ar.sum()) < 1 else spec.intercept
    y_hist = np.full(p, mean0)
    for t in range(T):
        h_tilde = a[0] + (a[1:] @ scaled_hist if q else 0.0)
        e = np.sqrt(g[states[t]] * h_tilde) * z[t]
        y[t] = spec.intercept + (spec.ar @ y_hist if p else 0.0) + e
        if q:
            scaled_hist = np.roll(scaled_hist, 1)
            scaled_hist[0] = e * e / g[states[t]]
        if p:
            y_hist = np.roll(y_hist, 1)
            y_hist[0] = y[t]
    return y, states


def simulate_panel(spec: SwarchSpec, T: int, seed: int = 0, n_factors: int = 6,
                   frequency: "Frequency | str" = "monthly", start: str = "1990-01-31",
                   leads: tuple[int, ...] = (1, 3, 6), strengths: tuple[float, ...] = (2.0, 1.5, 1.0),
                   ) -> tuple[FactorPanel, np.ndarray]:
    """Simulated panel and true regime path.

    Columns: ``ret`` (AR-SWARCH returns, percent), ``price`` (cumulated),
    ``rf`` (near-constant risk-free return), and ``f1..fN``. Factor ``j`` for
    ``j < len(leads)`` shifts by ``strengths[j]`` when the most volatile regime holds
    ``leads[j]`` periods ahead; the remaining factors are noise correlated
    with f1.
    """
    frequency = Frequency.parse(frequency)
    y, states = simulate_swarch(spec, T, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    high = (states == spec.high_regime).astype(float)
    factors = {}
    base = rng.standard_normal((n_factors, T))
    for j in range(n_factors):
        if j < len(leads):
            lead = leads[j]
            ahead = np.concatenate([high[lead:], np.repeat(high[-1], lead)])
            factors[f"f{j + 1}"] = strengths[j] * ahead + base[j]
        else:
            factors[f"f{j + 1}"] = 0.3 * base[0] + base[j]
    price = 100.0 * np.cumprod(1.0 + np.clip(y, -99.0, None) / 100.0)
    rf = 0.2 + 0.001 * rng.standard_normal(T)
    freq = {"daily": "B", "monthly": "ME", "annual": "YE"}[frequency.value]
    dates = pd.date_range(start, periods=T, freq=freq)
    columns = {"ret": y, "price": price, "rf": rf, **factors}
    return FactorPanel.from_dict(dates, columns, frequency), states
