"""Hit ratios, calibration scores and the model-screening report.

Undefined quantities (a ratio with an empty denominator, AUC on one class)
are NaN in memory and the string ``undefined`` on disk.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._stats import rank_auc
from .classify.labels import LONG_TERM, CrisisLabels
from .frame import format_float
from .predict.base import ForecastSeries, ImportanceTable

UNDEFINED = "undefined"
DEFAULT_ADVANCE = {"short_term": 3, "long_term": 12}

# (metric, comparison, threshold)
DEFAULT_SCREEN = (
    ("hit1", ">", 90.0),
    ("hit2", ">", 80.0),
    ("hit3", "<", 10.0),
    ("abs_qps", "<", 0.05),
    ("youden_j", ">", 0.9),
    ("sar", ">", 0.8),
)
# +1 when larger is better
_DIRECTION = {"hit1": 1, "hit2": 1, "hit3": -1, "hit4": 1, "abs_qps": -1, "youden_j": 1, "sar": 1,
              "auc": 1, "accuracy": 1, "rmse": -1}
METRICS = tuple(_DIRECTION)


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else float("nan")


@dataclass(frozen=True)
class HitRatios:
    pct_crisis_called: float
    pct_onsets_called: float
    pct_false_alarms: float
    advance_periods: float
    horizon: int = 0


def onsets(y) -> np.ndarray:
    y = np.asarray(y).astype(bool)
    prev = np.concatenate([[False], y[:-1]])
    return np.flatnonzero(y & ~prev)


def hit_ratios(labels, signals, horizon: int | None = None) -> HitRatios:
    """hit(1) crisis periods signalled, hit(2) onsets with a signal in
    ``[t - H, t]``, hit(3) false share of issued signals, hit(4) mean lead of
    the earliest signal before each called onset."""
    y = _labels(labels)
    s = np.asarray(signals).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"labels ({y.size}) and signals ({s.size}) differ in length")
    if horizon is None:
        kind = labels.horizon_kind if isinstance(labels, CrisisLabels) else "short_term"
        horizon = DEFAULT_ADVANCE[kind]
    if horizon < 0:
        raise ValueError("advance allowance must be non-negative")
    hit1 = _pct(int(np.sum(y & s)), int(y.sum()))
    hit3 = _pct(int(np.sum(~y & s)), int(s.sum()))
    starts = onsets(y)
    leads = []
    for t in starts:
        lo = max(0, t - horizon)
        fired = np.flatnonzero(s[lo:t + 1])
        if fired.size:
            leads.append(t - (lo + int(fired[0])))
    hit2 = _pct(len(leads), starts.size)
    hit4 = float(np.mean(leads)) if leads else float("nan")
    return HitRatios(hit1, hit2, hit3, hit4, int(horizon))


@dataclass(frozen=True)
class CalibrationScores:
    qps: float
    youden_j: float
    sar: float
    auc: float
    accuracy: float
    rmse: float
    qps_squared: bool = False


def qps(y, p, squared: bool = False) -> float:
    """Mean of 2(p - y); with ``squared`` the conventional 2(p - y)^2."""
    d = np.asarray(p, dtype=float) - np.asarray(y, dtype=float)
    return float(np.mean(2.0 * (d * d if squared else d)))


def youden_j(y, s) -> float:
    y = np.asarray(y).astype(bool)
    s = np.asarray(s).astype(bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        return float("nan")
    return float(np.sum(s & y) / pos + np.sum(~s & ~y) / neg - 1.0)


def sar(accuracy: float, auc: float, rmse: float) -> float:
    return (accuracy + auc + (1.0 - rmse)) / 3.0


def calibration(labels, forecast: ForecastSeries, squared_qps: bool = False) -> CalibrationScores:
    y = _labels(labels)
    p = forecast.probabilities
    if p.shape != y.shape:
        raise ValueError(f"labels ({y.size}) and forecast ({p.size}) differ in length")
    s = forecast.signals.astype(bool)
    acc = float(np.mean(s == y))
    auc = rank_auc(y, p)
    rmse = float(np.sqrt(np.mean((p - y) ** 2)))
    return CalibrationScores(qps(y, p, squared_qps), youden_j(y, s), sar(acc, auc, rmse), auc, acc,
                             rmse, squared_qps)


def _labels(labels) -> np.ndarray:
    y = labels.labels if isinstance(labels, CrisisLabels) else np.asarray(labels)
    return y.astype(bool)


@dataclass(frozen=True)
class EvaluationCell:
    classifier: str
    predictor: str
    horizon: str
    hits: HitRatios
    scores: CalibrationScores
    importance: ImportanceTable | None = None
    status: str = "ok"

    @classmethod
    def failed(cls, classifier: str, predictor: str, horizon: str, reason: str) -> "EvaluationCell":
        """Placeholder for a cell whose fit raised: every metric undefined."""
        nan = float("nan")
        return cls(classifier, predictor, horizon, HitRatios(nan, nan, nan, nan),
                   CalibrationScores(nan, nan, nan, nan, nan, nan), None, f"failed: {reason}")

    def metrics(self) -> dict[str, float]:
        return {
            "hit1": self.hits.pct_crisis_called,
            "hit2": self.hits.pct_onsets_called,
            "hit3": self.hits.pct_false_alarms,
            "hit4": self.hits.advance_periods,
            "qps": self.scores.qps,
            "abs_qps": abs(self.scores.qps),
            "youden_j": self.scores.youden_j,
            "sar": self.scores.sar,
            "auc": self.scores.auc,
            "accuracy": self.scores.accuracy,
            "rmse": self.scores.rmse,
        }

    @property
    def name(self) -> str:
        return f"{self.classifier}-{self.predictor}"


def _passes(value: float, op: str, threshold: float) -> bool:
    if math.isnan(value):
        return False
    return value > threshold if op == ">" else value < threshold


def _dominates(a: dict, b: dict, keys) -> bool:
    better = False
    for k in keys:
        va, vb = a[k] * _DIRECTION[k], b[k] * _DIRECTION[k]
        if math.isnan(va) or math.isnan(vb):
            if math.isnan(va) and not math.isnan(vb):
                return False
            continue
        if va < vb:
            return False
        better |= va > vb
    return better


@dataclass(frozen=True)
class EvaluationReport:
    cells: tuple[EvaluationCell, ...]
    screen: tuple[tuple[str, str, float], ...] = DEFAULT_SCREEN
    passes: tuple[tuple[bool, ...], ...] = field(default=())
    selected: tuple[int, ...] = ()

    COLUMNS = ("classifier", "predictor", "horizon", "hit1", "hit2", "hit3", "hit4", "qps",
               "youden_j", "sar", "auc", "accuracy", "rmse", "conditions_passed", "selected", "status")

    def rows(self) -> list[list[str]]:
        out = []
        for i, c in enumerate(self.cells):
            m = c.metrics()
            vals = [_fmt(m[k]) for k in self.COLUMNS[3:13]]
            out.append([c.classifier, c.predictor, c.horizon, *vals, str(sum(self.passes[i])),
                        "yes" if i in self.selected else "no", c.status])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            w.writerows(self.rows())

    def to_text(self) -> str:
        header = list(self.COLUMNS)
        body = [[r[0], r[1], r[2], *(_short(v) for v in r[3:13]), r[13], r[14], r[15]] for r in self.rows()]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(str(x).rjust(w) for x, w in zip(row, widths)).rstrip() for row in [header, *body]]
        conds = ", ".join(f"{k} {op} {format_float(t)}" for k, op, t in self.screen)
        chosen = ", ".join(self.cells[i].name + f" ({self.cells[i].horizon})" for i in self.selected)
        return "\n".join(lines + ["", f"screening: {conds}", f"selected: {chosen or 'none'}", ""])


def _fmt(v: float) -> str:
    return UNDEFINED if isinstance(v, float) and math.isnan(v) else format_float(v)


def _short(v: str) -> str:
    if v == UNDEFINED:
        return v
    return f"{float(v):.4g}"


def assemble_report(cells, screen=DEFAULT_SCREEN) -> EvaluationReport:
    """Grid of cells plus the screening pass: each cell counts the conditions
    it meets; the cells with the highest count that no other such cell
    dominates on the screened metrics are selected."""
    cells = tuple(cells)
    if not cells:
        raise ValueError("report needs at least one cell")
    screen = tuple((str(k), str(op), float(t)) for k, op, t in screen)
    for k, op, _ in screen:
        if k not in _DIRECTION or op not in ("<", ">"):
            raise ValueError(f"bad screening condition {k} {op}")
    metrics = [c.metrics() for c in cells]
    passes = tuple(tuple(_passes(m[k], op, t) for k, op, t in screen) for m in metrics)
    counts = [sum(p) if c.status == "ok" else -1 for p, c in zip(passes, cells)]
    top = [i for i, n in enumerate(counts) if n == max(counts) and n >= 0]
    keys = [k for k, _, _ in screen]
    selected = tuple(i for i in top if not any(_dominates(metrics[j], metrics[i], keys) for j in top if j != i))
    return EvaluationReport(cells, screen, passes, selected)


def hits_dict(h: HitRatios) -> dict:
    return asdict(h)


__all__ = ["HitRatios", "CalibrationScores", "EvaluationCell", "EvaluationReport", "hit_ratios",
           "calibration", "assemble_report", "qps", "youden_j", "sar", "onsets", "UNDEFINED",
           "DEFAULT_SCREEN", "DEFAULT_ADVANCE", "LONG_TERM"]
