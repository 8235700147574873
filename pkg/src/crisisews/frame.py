"""Factor panels: loading, frequency alignment, returns, splitting and scaling.

A :class:`FactorPanel` is a date-indexed table of named factor series at one
declared frequency. Panels are treated as immutable; every operation returns a
new panel.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class PanelError(ValueError):
    """Raised for malformed panel input or invalid panel operations."""


class Frequency(enum.Enum):
    DAILY = "daily"
    MONTHLY = "monthly"
    ANNUAL = "annual"

    @property
    def rank(self) -> int:
        return _FREQ_RANK[self]

    def __lt__(self, other: "Frequency") -> bool:
        if not isinstance(other, Frequency):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other: "Frequency") -> bool:
        if not isinstance(other, Frequency):
            return NotImplemented
        return self.rank <= other.rank

    @classmethod
    def parse(cls, value: "str | Frequency") -> "Frequency":
        if isinstance(value, Frequency):
            return value
        aliases = {"annually": "annual", "yearly": "annual", "day": "daily", "month": "monthly"}
        key = aliases.get(str(value).lower(), str(value).lower())
        try:
            return cls(key)
        except ValueError:
            raise PanelError(f"unknown frequency {value!r}") from None


_FREQ_RANK = {Frequency.DAILY: 0, Frequency.MONTHLY: 1, Frequency.ANNUAL: 2}


@dataclass(frozen=True)
class FactorPanel:
    """Date-indexed factor table.

    ``data`` holds one float column per factor, indexed by a strictly
    increasing ``DatetimeIndex`` of calendar dates. Missing values are NaN.
    """

    data: pd.DataFrame
    frequency: Frequency

    def __post_init__(self) -> None:
        df = self.data
        if not isinstance(df.index, pd.DatetimeIndex):
            raise PanelError("panel index must be a DatetimeIndex")
        if df.columns.has_duplicates:
            dupes = sorted(set(df.columns[df.columns.duplicated()]))
            raise PanelError(f"duplicate factor names: {dupes}")
        if not df.index.is_monotonic_increasing or df.index.has_duplicates:
            raise PanelError("non-monotone dates")
        object.__setattr__(self, "data", df.astype(float, copy=True))
        object.__setattr__(self, "frequency", Frequency.parse(self.frequency))

    @classmethod
    def from_dict(cls, dates: Iterable, columns: dict[str, Iterable[float]],
                  frequency: "Frequency | str") -> "FactorPanel":
        index = pd.DatetimeIndex(pd.to_datetime(list(dates)), name="date")
        df = pd.DataFrame({k: np.asarray(list(v), dtype=float) for k, v in columns.items()},
                          index=index)
        return cls(df, Frequency.parse(frequency))

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.data.index

    @property
    def columns(self) -> list[str]:
        return list(self.data.columns)

    def __len__(self) -> int:
        return len(self.data)

    def column(self, name: str) -> np.ndarray:
        if name not in self.data.columns:
            raise PanelError(f"unknown column {name!r}")
        return self.data[name].to_numpy(dtype=float, copy=True)

    def values(self, names: list[str] | None = None) -> np.ndarray:
        names = self.columns if names is None else names
        missing = [n for n in names if n not in self.data.columns]
        if missing:
            raise PanelError(f"unknown columns {missing}")
        return self.data[names].to_numpy(dtype=float, copy=True)

    def select(self, names: list[str]) -> "FactorPanel":
        self.values(names)
        return FactorPanel(self.data[names], self.frequency)

    def drop(self, names: Iterable[str]) -> "FactorPanel":
        names = [n for n in names if n in self.data.columns]
        return FactorPanel(self.data.drop(columns=names), self.frequency)

    def with_columns(self, **columns: np.ndarray) -> "FactorPanel":
        df = self.data.copy()
        for name, values in columns.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (len(df),):
                raise PanelError(f"column {name!r} has length {values.size}, expected {len(df)}")
            df[name] = values
        return FactorPanel(df, self.frequency)

    def slice(self, start: int, stop: int) -> "FactorPanel":
        return FactorPanel(self.data.iloc[start:stop], self.frequency)

    def has_missing(self) -> bool:
        return bool(self.data.isna().to_numpy().any())


@dataclass(frozen=True)
class SplitSpec:
    in_fraction: float = 0.75

    def __post_init__(self) -> None:
        if not 0.0 < self.in_fraction < 1.0:
            raise PanelError(f"in_fraction must lie in (0, 1), got {self.in_fraction}")

    def index(self, length: int) -> int:
        return int(math.floor(self.in_fraction * length))


def load_csv(path: "str | Path", frequency: "Frequency | str") -> FactorPanel:
    """Read a panel CSV whose first column is ``date`` (YYYY-MM-DD).

    Empty cells become NaN. Errors name the offending row and column.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise PanelError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if not header or header[0].strip() != "date":
            raise PanelError(f"{path}: first column header must be 'date'")
        names = [h.strip() for h in header[1:]]
        dates: list[pd.Timestamp] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise PanelError(f"{path}:{lineno}: ragged row ({len(row)} cells, expected {len(header)})")
            try:
                dates.append(pd.Timestamp(_parse_date(row[0])))
            except ValueError:
                raise PanelError(f"{path}:{lineno}: malformed date {row[0]!r}") from None
            values = []
            for name, cell in zip(names, row[1:]):
                cell = cell.strip()
                if cell == "":
                    values.append(np.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise PanelError(
                        f"{path}:{lineno}: non-numeric cell {cell!r} in column {name!r}") from None
            rows.append(values)
    index = pd.DatetimeIndex(dates, name="date")
    if len(index) > 1 and (not index.is_monotonic_increasing or index.has_duplicates):
        raise PanelError(f"{path}: non-monotone dates")
    df = pd.DataFrame(np.array(rows, dtype=float).reshape(len(rows), len(names)),
                      index=index, columns=names)
    return FactorPanel(df, Frequency.parse(frequency))


def _parse_date(text: str) -> "np.datetime64":
    text = text.strip()
    if len(text) != 10:
        raise ValueError(text)
    return np.datetime64(text, "D")


def write_csv(panel: FactorPanel, path: "str | Path") -> None:
    """Write ``panel`` in the format :func:`load_csv` reads, losslessly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", *panel.columns])
        values = panel.data.to_numpy()
        for date, row in zip(panel.dates, values):
            writer.writerow([date.strftime("%Y-%m-%d"), *(format_float(v) for v in row)])


def format_float(value: float) -> str:
    """Shortest repr that round-trips; NaN becomes the empty string."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def to_returns(panel: FactorPanel, column: str) -> np.ndarray:
    """Simple percentage returns ``100 * (P_t - P_{t-1}) / P_{t-1}``; length n-1."""
    prices = panel.column(column)
    return pct_change(prices)


def pct_change(prices: np.ndarray) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    if prices.size < 2:
        raise PanelError("need at least two prices")
    if not np.all(prices > 0):
        bad = int(np.flatnonzero(~(prices > 0))[0])
        raise PanelError(f"nonpositive price {prices[bad]} at position {bad}")
    return 100.0 * (prices[1:] - prices[:-1]) / prices[:-1]


def _period_key(index: pd.DatetimeIndex, freq: Frequency) -> np.ndarray:
    if freq is Frequency.DAILY:
        return index.normalize().asi8
    if freq is Frequency.MONTHLY:
        return (index.year * 12 + index.month - 1).to_numpy()
    return index.year.to_numpy()


def _period_end(key: int, freq: Frequency) -> pd.Timestamp:
    if freq is Frequency.MONTHLY:
        return pd.Timestamp(year=key // 12, month=key % 12 + 1, day=1) + pd.offsets.MonthEnd(0)
    return pd.Timestamp(year=key, month=12, day=31)


def align(panel: FactorPanel, target: "Frequency | str", method: str = "forward_fill") -> FactorPanel:
    """Re-express ``panel`` on a single calendar at ``target`` frequency.

    Observations are bucketed into target periods, keeping the last
    non-missing value in each period. ``forward_fill`` (coarse to fine) then
    carries the last published value forward; ``last_of_period`` (fine to
    coarse) takes period-final observations. Periods are labelled by the last
    panel date falling in them, or by the calendar period end when the panel
    has no date there. Leading gaps before a column's first publication stay
    missing.
    """
    target = Frequency.parse(target)
    if method not in ("forward_fill", "last_of_period"):
        raise PanelError(f"unknown alignment method {method!r}")
    if method == "forward_fill" and panel.frequency < target:
        raise PanelError(
            f"forward_fill cannot coarsen {panel.frequency.value} data to {target.value}")
    if method == "last_of_period" and target < panel.frequency:
        raise PanelError(
            f"last_of_period cannot fine-grain {panel.frequency.value} data to {target.value}")
    df = panel.data
    empty = [c for c in df.columns if df[c].isna().all()]
    if empty:
        raise PanelError(f"column(s) entirely missing, no anchor date: {empty}")

    keys = _period_key(df.index, target)
    if target is Frequency.DAILY:
        all_keys = np.unique(keys)
    else:
        all_keys = np.arange(keys.min(), keys.max() + 1)
    labels = []
    last_date_by_key = pd.Series(df.index, index=keys).groupby(level=0).last()
    for key in all_keys:
        if key in last_date_by_key.index:
            labels.append(last_date_by_key.loc[key])
        else:
            labels.append(_period_end(int(key), target))

    grouped = df.groupby(keys).last()  # last non-missing value per period
    out = grouped.reindex(all_keys).ffill()
    out.index = pd.DatetimeIndex(labels, name="date")
    return FactorPanel(out, target)


def split(panel: FactorPanel, spec: "SplitSpec | float" = SplitSpec()) -> tuple[FactorPanel, FactorPanel]:
    """Chronological in-sample / out-of-sample partition at ``floor(f * n)``."""
    if not isinstance(spec, SplitSpec):
        spec = SplitSpec(float(spec))
    n = len(panel)
    if n < 2:
        raise PanelError(f"cannot split a panel of length {n}")
    cut = spec.index(n)
    if cut < 1 or cut >= n:
        raise PanelError(f"split fraction {spec.in_fraction} leaves an empty side for length {n}")
    return panel.slice(0, cut), panel.slice(cut, n)


@dataclass(frozen=True)
class Standardizer:
    """Column-wise z-scoring fitted on a training panel.

    Standard deviations use the n-1 divisor. Zero-variance columns are
    recorded in ``dropped`` and removed on transform.
    """

    mean: dict[str, float]
    std: dict[str, float]
    dropped: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def fit(cls, train: FactorPanel) -> "Standardizer":
        mean, std, dropped = {}, {}, []
        for name in train.columns:
            x = train.column(name)
            x = x[~np.isnan(x)]
            sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
            if not sd > 0:
                logger.warning("dropping zero-variance column %r", name)
                dropped.append(name)
                continue
            mean[name] = float(np.mean(x))
            std[name] = sd
        return cls(mean, std, tuple(dropped))

    def transform(self, panel: FactorPanel) -> FactorPanel:
        unknown = [c for c in panel.columns if c not in self.mean and c not in self.dropped]
        if unknown:
            raise PanelError(f"columns not present in training panel: {unknown}")
        keep = [c for c in panel.columns if c in self.mean]
        df = panel.data[keep].copy()
        for c in keep:
            df[c] = (df[c] - self.mean[c]) / self.std[c]
        return FactorPanel(df, panel.frequency)

    def inverse_transform(self, panel: FactorPanel) -> FactorPanel:
        df = panel.data.copy()
        for c in df.columns:
            df[c] = df[c] * self.std[c] + self.mean[c]
        return FactorPanel(df, panel.frequency)


def standardize(train: FactorPanel, apply_to: FactorPanel) -> FactorPanel:
    return Standardizer.fit(train).transform(apply_to)


def concat(first: FactorPanel, second: FactorPanel) -> FactorPanel:
    if first.columns != second.columns:
        raise PanelError("cannot concatenate panels with different columns")
    return FactorPanel(pd.concat([first.data, second.data]), first.frequency)
