"""Fixed and two-peak (histogram valley) cutoffs for filtered probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .labels import HORIZON_KINDS, LONG_TERM, SHORT_TERM, CrisisLabels

FALLBACK_CUTOFF = 0.5
MIN_RELATIVE_PROMINENCE = 0.10
LONG_TERM_EXPONENT = 12


@dataclass(frozen=True)
class CutoffPolicy:
    """``kind`` is ``"fixed"`` (constant ``value``) or ``"two_peak"``.

    For ``two_peak`` the cutoff is re-estimated on the expanding sample from
    ``window`` observations onward; ``window=None`` means 60% of the series.
    """

    kind: str = "fixed"
    value: float = 0.5
    window: int | None = None
    bins: int = 50
    smooth: int = 3
    min_prominence: float = MIN_RELATIVE_PROMINENCE

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "two_peak"):
            raise ValueError(f"unknown cutoff policy {self.kind!r}")
        if self.kind == "fixed" and not 0.0 < self.value < 1.0:
            raise ValueError("fixed cutoff must lie in (0, 1)")

    @classmethod
    def fixed(cls, value: float = 0.5) -> "CutoffPolicy":
        return cls("fixed", value)

    @classmethod
    def two_peak(cls, window: int | None = None, bins: int = 50, smooth: int = 3,
                 min_prominence: float = MIN_RELATIVE_PROMINENCE) -> "CutoffPolicy":
        return cls("two_peak", window=window, bins=bins, smooth=smooth, min_prominence=min_prominence)

    def resolve_window(self, n: int) -> int:
        return int(self.window) if self.window is not None else max(1, int(0.6 * n))


@dataclass(frozen=True)
class ValleyResult:
    cutoff: float
    unimodal: bool
    peaks: tuple[int, ...] = ()
    valley: float | None = None
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0))


def valley_from_counts(counts: np.ndarray, smooth: int = 3,
                       min_prominence: float = MIN_RELATIVE_PROMINENCE) -> ValleyResult:
    """Valley between the two most prominent peaks of a histogram over [0, 1].

    Peaks are local maxima of the (optionally moving-average smoothed) counts,
    edge bins included. Ranking by prominence rather than raw height keeps a
    noise bump on the flank of a tall mode from being taken as the second
    mode. Peaks whose prominence is below ``min_prominence`` times the tallest
    bin are treated as noise. The valley is the lowest bin strictly between the two peaks; among
    tied minimal bins the median position is used, which keeps the rule
    symmetric under x -> 1 - x.
    """
    counts = np.asarray(counts, dtype=float)
    bins = counts.size
    h = counts
    if smooth and smooth > 1:
        kernel = np.ones(smooth)
        num = np.convolve(counts, kernel, mode="same")
        den = np.convolve(np.ones(bins), kernel, mode="same")
        h = num / den
    padded = np.concatenate([[-1.0], h, [-1.0]])
    peaks, props = signal.find_peaks(padded, prominence=0.0)
    keep = (h[peaks - 1] > 0) & (props["prominences"] >= min_prominence * h.max())
    peaks, prom = peaks[keep] - 1, props["prominences"][keep]
    if peaks.size < 2:
        return ValleyResult(FALLBACK_CUTOFF, True, counts=h)
    order = np.lexsort((peaks, -prom))
    a, b = sorted(int(i) for i in peaks[order[:2]])
    inner = np.arange(a + 1, b)
    if inner.size == 0:
        return ValleyResult(FALLBACK_CUTOFF, True, counts=h)
    seg = h[inner]
    at_min = inner[np.isclose(seg, seg.min(), rtol=0.0, atol=1e-12 * max(1.0, h.max()))]
    valley = float(np.median(at_min))
    centre = (valley + 0.5) / bins
    return ValleyResult(float(centre), False, (a, b), valley, h)


def two_peak_cutoff(fph_window, bins: int = 50, smooth: int = 3,
                    min_prominence: float = MIN_RELATIVE_PROMINENCE) -> ValleyResult:
    """Histogram-valley cutoff for a window of probabilities in [0, 1]."""
    x = np.asarray(fph_window, dtype=float)
    if x.size < 30:
        raise ValueError(f"two-peak window needs at least 30 values, got {x.size}")
    if np.any((x < 0) | (x > 1)) or not np.all(np.isfinite(x)):
        raise ValueError("values must lie in [0, 1]")
    counts = np.bincount(_bin_index(x, bins), minlength=bins)
    return valley_from_counts(counts, smooth, min_prominence)


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((x * bins).astype(np.int64), bins - 1)


def expanding_cutoffs(fph, policy: CutoffPolicy) -> tuple[np.ndarray, list[tuple[int, float]], int]:
    """Per-position two-peak cutoffs on the expanding sample.

    Position ``i >= l - 1`` uses the histogram of ``fph[:i + 1]``; earlier
    positions reuse the first cutoff. Returns (cutoffs, history, unimodal count).
    """
    x = np.asarray(fph, dtype=float)
    n = x.size
    l = policy.resolve_window(n)
    if not 30 <= l < n:
        raise ValueError(f"two-peak window {l} must be >= 30 and below series length {n}")
    idx = _bin_index(x, policy.bins)
    counts = np.bincount(idx[:l], minlength=policy.bins).astype(float)
    cutoffs = np.empty(n)
    history: list[tuple[int, float]] = []
    unimodal = 0
    for i in range(l - 1, n):
        if i >= l:
            counts[idx[i]] += 1
        res = valley_from_counts(counts, policy.smooth, policy.min_prominence)
        unimodal += res.unimodal
        cutoffs[i] = res.cutoff
        history.append((i, res.cutoff))
    cutoffs[: l - 1] = cutoffs[l - 1]
    return cutoffs, history, unimodal


def long_term_transform(fph, exponent: int = LONG_TERM_EXPONENT) -> np.ndarray:
    """Probability of at least one high-volatility period in the next ``exponent``."""
    return 1.0 - (1.0 - np.asarray(fph, dtype=float)) ** exponent


def swarch_label(fph, policy: CutoffPolicy = CutoffPolicy(), horizon_kind: str = SHORT_TERM,
                 dates=None) -> CrisisLabels:
    """Crisis where the (possibly long-term transformed) FPH reaches its cutoff."""
    x = np.asarray(fph, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("filtered probabilities must lie in [0, 1]")
    if horizon_kind not in HORIZON_KINDS:
        raise ValueError(f"unknown horizon kind {horizon_kind!r}")
    prov = {"classifier": "SWARCH_opt" if policy.kind == "two_peak" else "SWARCH",
            "cutoff_policy": policy.kind}
    if policy.kind == "fixed":
        cutoffs = np.full(x.size, policy.value)
        prov["cutoff"] = policy.value
    else:
        cutoffs, history, unimodal = expanding_cutoffs(x, policy)
        prov.update(window=policy.resolve_window(x.size), bins=policy.bins,
                    min_prominence=policy.min_prominence,
                    cutoff_history=history, unimodal_steps=unimodal)
    score = x if horizon_kind == SHORT_TERM else long_term_transform(x)
    labels = (score >= cutoffs).astype(np.int8)
    return CrisisLabels(labels, horizon_kind, prov, dates, cutoffs)


__all__ = ["CutoffPolicy", "ValleyResult", "two_peak_cutoff", "valley_from_counts",
           "expanding_cutoffs", "long_term_transform", "swarch_label", "LONG_TERM", "SHORT_TERM"]
