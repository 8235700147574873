"""Binary crisis labels and the forward-looking perfect-signal transform."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from ..frame import format_float

SHORT_TERM = "short_term"
LONG_TERM = "long_term"
HORIZON_KINDS = (SHORT_TERM, LONG_TERM)


@dataclass(frozen=True)
class CrisisLabels:
    """0/1 crisis series plus the classifier settings that produced it.

    ``cutoffs`` optionally carries the threshold applied at each position
    (written as ``cutoff_used`` when serialised).
    """

    labels: np.ndarray
    horizon_kind: str = SHORT_TERM
    provenance: dict[str, Any] = field(default_factory=dict)
    dates: pd.DatetimeIndex | None = None
    cutoffs: np.ndarray | None = None

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "labels", labels.astype(np.int8))
        if self.horizon_kind not in HORIZON_KINDS:
            raise ValueError(f"unknown horizon kind {self.horizon_kind!r}")
        if self.dates is not None and len(self.dates) != labels.size:
            raise ValueError("dates and labels differ in length")
        if self.cutoffs is not None:
            cutoffs = np.asarray(self.cutoffs, dtype=float)
            if cutoffs.shape != labels.shape:
                raise ValueError("cutoffs and labels differ in length")
            object.__setattr__(self, "cutoffs", cutoffs)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def count(self) -> int:
        return int(self.labels.sum())

    def window(self, start: int, stop: int) -> "CrisisLabels":
        return CrisisLabels(
            self.labels[start:stop],
            self.horizon_kind,
            dict(self.provenance),
            None if self.dates is None else self.dates[start:stop],
            None if self.cutoffs is None else self.cutoffs[start:stop],
        )

    def tail(self, n: int) -> "CrisisLabels":
        return self.window(len(self) - n, len(self))

    def to_csv(self, path: "str | Path") -> None:
        if self.dates is None:
            raise ValueError("labels without dates cannot be written")
        cutoffs = self.cutoffs if self.cutoffs is not None else np.full(len(self), np.nan)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date", "label", "cutoff_used"])
            for d, y, c in zip(self.dates, self.labels, cutoffs):
                writer.writerow([d.strftime("%Y-%m-%d"), int(y), format_float(c)])

    @classmethod
    def from_csv(cls, path: "str | Path", horizon_kind: str = SHORT_TERM) -> "CrisisLabels":
        from ..frame import load_csv

        panel = load_csv(path, "daily")
        if "label" not in panel.columns:
            raise ValueError(f"{path}: no 'label' column")
        cutoffs = panel.column("cutoff_used") if "cutoff_used" in panel.columns else None
        if cutoffs is not None and np.isnan(cutoffs).all():
            cutoffs = None
        return cls(panel.column("label").astype(int), horizon_kind, {"source": str(path)},
                   panel.dates, cutoffs)


def perfect_signal(labels: CrisisLabels, horizon: int = 12) -> CrisisLabels:
    """``Y_t = 1`` iff some ``C_{t+k} = 1`` for ``k`` in ``0..horizon``.

    Near the end of the series only the available future points are used.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    c = labels.labels.astype(bool)
    n = c.size
    # reverse running window max via cumulative counts
    csum = np.concatenate([[0], np.cumsum(c, dtype=np.int64)])
    stop = np.minimum(np.arange(n) + horizon + 1, n)
    y = (csum[stop] - csum[:n]) > 0
    prov = dict(labels.provenance)
    prov["perfect_signal_horizon"] = horizon
    return CrisisLabels(y.astype(np.int8), LONG_TERM, prov, labels.dates, labels.cutoffs)
