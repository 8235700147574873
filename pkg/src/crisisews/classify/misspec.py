"""Classifier robustness: full-sample versus re-run-on-window disagreement."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..frame import FactorPanel
from .labels import CrisisLabels

logger = logging.getLogger(__name__)

Classifier = Callable[[FactorPanel], CrisisLabels]


def _as_array(labels) -> np.ndarray:
    return np.asarray(labels.labels if isinstance(labels, CrisisLabels) else labels)


def misspecification_rate(full_sample_labels, test_labels) -> float:
    """Share of positions where truncated full-sample and window labels differ."""
    a, b = _as_array(full_sample_labels), _as_array(test_labels)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty label vectors")
    return float(np.count_nonzero(a != b)) / a.size


@dataclass(frozen=True)
class ClassifierComparison:
    """Single split comparison (full sample vs. test window)."""

    full: CrisisLabels
    truncated: CrisisLabels
    test: CrisisLabels
    count: int
    rate: float


def compare_on_test(classifier: Classifier, panel: FactorPanel, n_test: int,
                    full: CrisisLabels | None = None) -> ClassifierComparison:
    """Label the full panel and its last ``n_test`` rows separately and compare."""
    n = len(panel)
    if not 0 < n_test < n:
        raise ValueError(f"test window {n_test} must lie in 1..{n - 1}")
    full = classifier(panel) if full is None else full
    test = classifier(panel.slice(n - n_test, n))
    truncated = full.tail(n_test)
    rate = misspecification_rate(truncated, test)
    return ClassifierComparison(full, truncated, test, int(round(rate * n_test)), rate)


@dataclass(frozen=True)
class BootstrapMisspecification:
    rate: float
    rates: np.ndarray
    starts: np.ndarray
    excluded: int
    piece_length: int

    @property
    def mean_count(self) -> float:
        return float(self.rate * self.piece_length)

    def __float__(self) -> float:
        return self.rate


def window_starts(n: int, piece_length: int, B: int, seed: int) -> np.ndarray:
    if not 0 < piece_length < n:
        raise ValueError(f"piece length {piece_length} must lie in 1..{n - 1}")
    if B < 1:
        raise ValueError("B must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 25]))
    return rng.integers(0, n - piece_length + 1, size=B)


def bootstrap_misspecification(classifier: Classifier, panel: FactorPanel, piece_length: int,
                               B: int = 1000, seed: int = 0,
                               full: CrisisLabels | None = None) -> BootstrapMisspecification:
    """Average misspecification over ``B`` random contiguous windows.

    Each window is re-classified on its own and compared with the full-sample
    labels over the same dates. Windows on which the classifier raises are
    excluded and counted.
    """
    n = len(panel)
    starts = window_starts(n, piece_length, B, seed)
    full = classifier(panel) if full is None else full
    rates = np.full(B, np.nan)
    for b, s in enumerate(starts):
        try:
            window = classifier(panel.slice(int(s), int(s) + piece_length))
        except Exception as exc:  # noqa: BLE001 - any classifier failure excludes the window
            logger.warning("classifier failed on window %d (start %d): %s", b, s, exc)
            continue
        rates[b] = misspecification_rate(full.window(int(s), int(s) + piece_length), window)
    ok = ~np.isnan(rates)
    excluded = int(B - ok.sum())
    if not ok.any():
        raise RuntimeError("classifier failed on every bootstrap window")
    return BootstrapMisspecification(float(rates[ok].mean()), rates, starts, excluded, piece_length)
