"""Signal-driven portfolio weights, Sharpe/CER, and the reality check."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .frame import FactorPanel, Frequency, format_float

log = logging.getLogger(__name__)

WEIGHT_MIN, WEIGHT_MAX = -0.5, 1.5
VOL_FLOOR = 1e-6
GAMMAS = (1, 2, 3)
DEFAULT_VOL_WINDOW = {Frequency.DAILY: 252, Frequency.MONTHLY: 12, Frequency.ANNUAL: 2}
ETA_MODES = ("return", "trailing_mean")
VARIANCE_SERIES = "squared deviation of portfolio returns from their expanding mean"


class BacktestError(ValueError):
    pass


def realized_vol(returns, window: int) -> np.ndarray:
    """Trailing standard deviation (n - 1 divisor); the first ``window - 1``
    positions use the expanding prefix and position 0 is NaN."""
    r = np.asarray(returns, dtype=float)
    if window < 2:
        raise BacktestError("volatility window must be at least 2")
    if r.size < 2:
        raise BacktestError("need at least two returns")
    return pd.Series(r).rolling(window, min_periods=2).std(ddof=1).to_numpy()


def portfolio_weights(signal, mean_return, vol, gamma: float) -> np.ndarray:
    """``clamp((eta / sigma) / (gamma + y_hat), -0.5, 1.5)``; zero or missing
    sigma gives weight 0."""
    y = np.asarray(signal, dtype=float)
    eta = np.asarray(mean_return, dtype=float)
    sigma = np.asarray(vol, dtype=float)
    if not (y.shape == eta.shape == sigma.shape):
        raise BacktestError("signal, return and volatility series differ in length")
    if gamma not in GAMMAS:
        raise BacktestError(f"risk aversion must be one of {GAMMAS}")
    if np.any((y < 0) | (y > 1)):
        raise BacktestError("signals must lie in [0, 1]")
    bad = ~(sigma > 0) | ~np.isfinite(eta)
    # the first position never has a volatility estimate
    if bad[1:].any():
        log.warning("%d position(s) after the first with zero or undefined volatility get weight 0",
                    int(bad[1:].sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = (eta / sigma) / (gamma + y)
    w = np.clip(raw, WEIGHT_MIN, WEIGHT_MAX)
    w[bad] = 0.0
    return w


def expected_return(returns, mode: str = "return") -> np.ndarray:
    """eta series: the period return itself (as printed) or the mean of
    returns strictly before t (0 at t = 0)."""
    r = np.asarray(returns, dtype=float)
    if mode == "return":
        return r.copy()
    if mode == "trailing_mean":
        out = np.zeros_like(r)
        out[1:] = np.cumsum(r)[:-1] / np.arange(1, r.size)
        return out
    raise BacktestError(f"unknown eta mode {mode!r}; expected one of {ETA_MODES}")


@dataclass(frozen=True)
class PortfolioTrack:
    weights: np.ndarray  # T x S
    returns: np.ndarray  # R_p
    gamma: int
    strategy: str
    assets: tuple[str, ...]
    dates: pd.DatetimeIndex | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if np.any(w < WEIGHT_MIN) or np.any(w > WEIGHT_MAX):
            raise BacktestError("weights outside [-0.5, 1.5]")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "returns", np.asarray(self.returns, dtype=float))

    def __len__(self) -> int:
        return int(self.returns.size)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *(f"w_{a}" for a in self.assets), "R_p"])
            dates = self.dates if self.dates is not None else range(len(self))
            for d, row, r in zip(dates, self.weights, self.returns):
                label = d.strftime("%Y-%m-%d") if hasattr(d, "strftime") else d
                w.writerow([label, *(format_float(x) for x in row), format_float(r)])


def run_backtest(assets: FactorPanel, forecasts=None, gamma: int = 1, strategy: str = "ews",
                 vol_window: int | None = None, risk_free=(), eta: str = "return") -> PortfolioTrack:
    """Signal-scaled weights per asset and the portfolio return ``sum_i w_i eta_i``.

    ``forecasts`` maps asset name to a probability series (anything with
    ``.probabilities`` or a plain array) read as the warning issued at t for
    t + 1; assets without one get ``y_hat = 0`` (buy-and-hold). Assets named
    in ``risk_free`` use a volatility floor of 1e-6.
    """
    forecasts = dict(forecasts or {})
    names = list(assets.columns)
    unknown = set(forecasts) - set(names)
    if unknown:
        raise BacktestError(f"forecast for unknown asset(s): {', '.join(sorted(unknown))}")
    window = vol_window or DEFAULT_VOL_WINDOW[assets.frequency]
    n = len(assets)
    W = np.zeros((n, len(names)))
    R = np.zeros(n)
    for j, name in enumerate(names):
        r = assets.column(name)
        if not np.all(np.isfinite(r)):
            raise BacktestError(f"asset {name} has missing returns")
        f = forecasts.get(name)
        y_hat = np.zeros(n) if f is None else np.asarray(getattr(f, "probabilities", f), dtype=float)
        if y_hat.size != n:
            raise BacktestError(f"forecast for {name} has {y_hat.size} dates, assets have {n}")
        fdates = getattr(f, "dates", None)
        if fdates is not None and not fdates.equals(assets.dates):
            raise BacktestError(f"forecast dates for {name} are not aligned with the asset dates")
        sigma = realized_vol(r, window)
        if name in risk_free:
            sigma = np.where(np.isfinite(sigma), np.maximum(sigma, VOL_FLOOR), sigma)
        e = expected_return(r, eta)
        W[:, j] = portfolio_weights(y_hat, e, sigma, gamma)
        R += W[:, j] * e
    meta = {"vol_window": window, "eta": eta, "risk_free": list(risk_free)}
    return PortfolioTrack(W, R, gamma, strategy, tuple(names), assets.dates, meta)


def sharpe_and_cer(track: PortfolioTrack, variance: bool = False) -> tuple[float, float]:
    """Sharpe = mean / sd; CER = mean - gamma/2 * sd (or * variance)."""
    r = track.returns
    if r.size < 2:
        raise BacktestError("need at least two portfolio returns")
    mu = float(np.mean(r))
    # exact zero for constant tracks; np.std leaves rounding residue
    sd = 0.0 if np.ptp(r) == 0 else float(np.std(r, ddof=1))
    sharpe = mu / sd if sd > 0 else float("nan")
    cer = mu - 0.5 * track.gamma * (sd * sd if variance else sd)
    return sharpe, cer


def stationary_bootstrap(series, p: float = 0.1, B: int = 1000, seed: int = 0) -> np.ndarray:
    """``B x n`` resamples: blocks start uniformly, continue with probability
    ``1 - p`` and wrap around the end."""
    x = np.asarray(series, dtype=float)
    return x[stationary_indices(x.size, p, B, seed)]


def stationary_indices(n: int, p: float, B: int, seed: int = 0) -> np.ndarray:
    if not 0.0 < p <= 1.0:
        raise BacktestError("block parameter must lie in (0, 1]")
    if B < 1 or n < 1:
        raise BacktestError("need B >= 1 and a non-empty series")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 33]))
    starts = rng.integers(0, n, size=(B, n))
    new = rng.random((B, n)) < p
    new[:, 0] = True
    pos = np.arange(n)
    last = np.maximum.accumulate(np.where(new, pos, 0), axis=1)
    begin = np.take_along_axis(starts, last, axis=1)
    return (begin + (pos - last)) % n


def realized_variance(returns) -> np.ndarray:
    r = np.asarray(returns, dtype=float)
    mean = np.cumsum(r) / np.arange(1, r.size + 1)
    return (r - mean) ** 2


@dataclass(frozen=True)
class RealityCheckResult:
    statistic: float
    p_value: float
    B: int
    block_parameter: float
    seed: int
    variance_series: str = VARIANCE_SERIES

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["statistic", "p_value", "B", "p", "seed"])
            w.writerow([format_float(self.statistic), format_float(self.p_value), self.B,
                        format_float(self.block_parameter), self.seed])


def reality_check_differential(f, B: int = 1000, p: float = 0.1, seed: int = 0) -> RealityCheckResult:
    """One-sided test of E(f) >= 0 against E(f) < 0 with centred stationary-
    bootstrap means: p = (1 + #{mean(f*) - mean(f) <= mean(f)}) / (B + 1)."""
    f = np.asarray(f, dtype=float)
    if f.size == 0:
        raise BacktestError("empty loss differential")
    if not np.all(np.isfinite(f)):
        raise BacktestError("loss differential has missing values")
    fbar = float(np.mean(f))
    idx = stationary_indices(f.size, p, B, seed)
    boot = f[idx].mean(axis=1) - fbar
    count = int(np.sum(boot <= fbar + 1e-12 * max(1.0, abs(fbar))))
    return RealityCheckResult(fbar, (1 + count) / (B + 1), B, p, seed)


def reality_check(ews: PortfolioTrack, bench: PortfolioTrack, B: int = 1000, p: float = 0.1,
                  seed: int = 0) -> RealityCheckResult:
    if len(ews) != len(bench) or len(ews) == 0:
        raise BacktestError("tracks must be non-empty and of equal length")
    if ews.dates is not None and bench.dates is not None and not ews.dates.equals(bench.dates):
        raise BacktestError("tracks are not aligned in time")
    f = realized_variance(ews.returns) - realized_variance(bench.returns)
    return reality_check_differential(f, B, p, seed)
