"""Technically quantized indices (FPI, CMAX, EPI) and their threshold labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .labels import SHORT_TERM, CrisisLabels

TQI_KINDS = ("FPI", "CMAX", "EPI_ERW", "EPI_KLR")
LAMBDA_GRID = (1.0, 1.5, 2.0, 2.5, 3.0)


class TqiInputError(ValueError):
    """Invalid inputs for an index calculation."""


@dataclass(frozen=True)
class TqiIndex:
    kind: str
    values: np.ndarray
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in TQI_KINDS:
            raise ValueError(f"unknown index kind {self.kind!r}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


def _moments(x: np.ndarray, name: str) -> tuple[float, float]:
    mu = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise TqiInputError(f"zero standard deviation in {name}")
    return mu, sd


def _check_lengths(*series: np.ndarray) -> None:
    lengths = {s.size for s in series}
    if len(lengths) != 1:
        raise TqiInputError(f"inputs differ in length: {sorted(lengths)}")
    if lengths.pop() < 2:
        raise TqiInputError("need at least two observations")


def compute_fpi(exchange_pct, reserves_pct, rate_change) -> TqiIndex:
    """Financial pressure index: mean of the standardized exchange-rate change,
    negated reserve change and interest-rate change."""
    e, r, i = (np.asarray(a, dtype=float) for a in (exchange_pct, reserves_pct, rate_change))
    _check_lengths(e, r, i)
    (mu_e, sd_e), (mu_r, sd_r), (mu_i, sd_i) = (
        _moments(e, "exchange rate change"),
        _moments(r, "reserve change"),
        _moments(i, "interest rate change"),
    )
    values = ((e - mu_e) / sd_e - (r - mu_r) / sd_r + (i - mu_i) / sd_i) / 3.0
    return TqiIndex("FPI", values, {"mu": (mu_e, mu_r, mu_i), "sigma": (sd_e, sd_r, sd_i)})


def compute_epi(kind: str, exchange_pct, reserves_pct, rate_change,
                ref_reserves_pct=None, ref_rate_change=None) -> TqiIndex:
    """Exchange market pressure index in the ``ERW`` or ``KLR`` weighting.

    Inputs are relative changes (exchange rate, reserves) and the interest-rate
    change. For ``ERW`` the optional reference-country series are subtracted;
    without them the index collapses to the single-economy form.
    """
    kind = kind.upper().removeprefix("EPI_")
    e, r, i = (np.asarray(a, dtype=float) for a in (exchange_pct, reserves_pct, rate_change))
    _check_lengths(e, r, i)
    if kind == "ERW":
        if ref_reserves_pct is not None:
            r = r - np.asarray(ref_reserves_pct, dtype=float)
        if ref_rate_change is not None:
            i = i - np.asarray(ref_rate_change, dtype=float)
        _check_lengths(e, r, i)
        _, sd_e = _moments(e, "exchange rate change")
        _, sd_r = _moments(r, "reserve change differential")
        _, sd_i = _moments(i, "interest rate differential change")
        values = e / sd_e - r / sd_r + i / sd_i
    elif kind == "KLR":
        _, sd_e = _moments(e, "exchange rate change")
        _, sd_r = _moments(r, "reserve change")
        _, sd_i = _moments(i, "interest rate change")
        values = e - (sd_e / sd_r) * r + (sd_e / sd_i) * i
    else:
        raise ValueError(f"unknown EPI kind {kind!r}")
    return TqiIndex(f"EPI_{kind}", values, {"sigma": (sd_e, sd_r, sd_i)})


def compute_cmax(prices, m: int = 12) -> TqiIndex:
    """Price over its trailing ``m``-period maximum (prefix max before ``m``)."""
    p = np.asarray(prices, dtype=float)
    if m < 1:
        raise TqiInputError("window m must be at least 1")
    if p.size <= m:
        raise TqiInputError(f"need more than m={m} prices, got {p.size}")
    if not np.all(p > 0):
        raise TqiInputError("nonpositive price")
    running = np.empty_like(p)
    running[:m] = np.maximum.accumulate(p[:m])
    running[m:] = sliding_window_view(p, m + 1).max(axis=1)
    return TqiIndex("CMAX", p / running, {"m": m})


def tqi_label(index: TqiIndex, lam: float) -> CrisisLabels:
    """Crisis where the index leaves its ``mean +/- lam * sd`` band.

    FPI/EPI flag upward exceedances; CMAX flags values at or below the lower
    bound. A constant index yields no crises.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    x = index.values
    mu = float(np.mean(x))
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    if not sd > 0:
        labels = np.zeros(x.size, dtype=np.int8)
    elif index.kind == "CMAX":
        labels = x <= mu - lam * sd
    else:
        labels = x > mu + lam * sd
    prov = {"classifier": index.kind, "lambda": lam, **index.params}
    return CrisisLabels(np.asarray(labels, dtype=np.int8), SHORT_TERM, prov)
