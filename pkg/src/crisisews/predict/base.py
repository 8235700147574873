"""Common predictor types, input checks and the model container format.

Fitted models are written as JSON with the layout::

    {"format": "crisisews-predictor", "version": 1, "kind": ..., "seed": ...,
     "feature_names": [...], "hyperparams": {...}, "state": {...}}

Arrays inside ``state`` are stored as ``{"__ndarray__": <base64 of the
little-endian bytes>, "dtype": ..., "shape": [...]}`` so a reload is
bit-for-bit identical.
"""

from __future__ import annotations

import base64
import csv
import importlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from ..classify.labels import CrisisLabels
from ..frame import FactorPanel, format_float

FORMAT_NAME = "crisisews-predictor"
FORMAT_VERSION = 1
PREDICTOR_KINDS = ("stepwise_logit", "klr", "mlp", "random_forest", "gradient_boost", "attn_lstm")
DEFAULT_THRESHOLD = 0.5
EXCLUDED = "excluded"

_MODULES = {
    "stepwise_logit": "logit",
    "klr": "klr",
    "mlp": "mlp",
    "random_forest": "trees",
    "gradient_boost": "trees",
    "attn_lstm": "attn_lstm",
}


class PredictorError(ValueError):
    """Invalid predictor input or a failed fit."""


def binarize(probabilities, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(probabilities, dtype=float) >= threshold).astype(np.int8)


@dataclass(frozen=True)
class ForecastSeries:
    probabilities: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    dates: pd.DatetimeIndex | None = None
    source: str = ""

    def __post_init__(self) -> None:
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1:
            raise ValueError("probabilities must be one-dimensional")
        if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
            raise ValueError("probabilities must be finite and lie in [0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.dates is not None and len(self.dates) != p.size:
            raise ValueError("dates and probabilities differ in length")
        object.__setattr__(self, "probabilities", p)

    def __len__(self) -> int:
        return int(self.probabilities.size)

    @property
    def signals(self) -> np.ndarray:
        return binarize(self.probabilities, self.threshold)

    def window(self, start: int, stop: int) -> "ForecastSeries":
        dates = None if self.dates is None else self.dates[start:stop]
        return ForecastSeries(self.probabilities[start:stop], self.threshold, dates, self.source)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "probability", "signal"])
            dates = self.dates if self.dates is not None else range(len(self))
            for d, p, s in zip(dates, self.probabilities, self.signals):
                label = d.strftime("%Y-%m-%d") if hasattr(d, "strftime") else d
                w.writerow([label, format_float(p), int(s)])


@dataclass(frozen=True)
class ImportanceTable:
    """(feature, score, method) rows, highest score first.

    A NaN score marks a feature the model excluded or could not score; those
    rows sort last and serialise as ``excluded``.
    """

    entries: tuple[tuple[str, float, str], ...]

    def __post_init__(self) -> None:
        rows = [(str(n), float(s), str(m)) for n, s, m in self.entries]
        scored = sorted((r for r in rows if not math.isnan(r[1])), key=lambda r: (-r[1], r[0]))
        missing = sorted((r for r in rows if math.isnan(r[1])), key=lambda r: r[0])
        object.__setattr__(self, "entries", tuple(scored + missing))

    @classmethod
    def from_scores(cls, names, scores, method: str) -> "ImportanceTable":
        return cls(tuple((n, float(s), method) for n, s in zip(names, scores)))

    def __len__(self) -> int:
        return len(self.entries)

    def as_dict(self) -> dict[str, float]:
        return {n: s for n, s, _ in self.entries}

    @property
    def features(self) -> list[str]:
        return [n for n, _, _ in self.entries]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["factor", "score", "method"])
            for n, s, m in self.entries:
                w.writerow([n, EXCLUDED if math.isnan(s) else format_float(s), m])


def design_matrix(features: FactorPanel, names=None) -> np.ndarray:
    names = list(features.columns) if names is None else list(names)
    missing = [n for n in names if n not in features.columns]
    if missing:
        raise PredictorError(f"features missing column(s): {', '.join(missing)}")
    X = features.values(names)
    if not np.all(np.isfinite(X)):
        raise PredictorError("features contain missing or non-finite values")
    return X


def label_vector(labels, n: int) -> np.ndarray:
    y = labels.labels if isinstance(labels, CrisisLabels) else np.asarray(labels)
    if y.ndim != 1 or y.size != n:
        raise PredictorError(f"labels have length {y.size}, features have {n} rows")
    if y.size and not np.isin(y, (0, 1)).all():
        raise PredictorError("labels must be 0 or 1")
    return y.astype(float)


def training_data(features: FactorPanel, labels) -> tuple[np.ndarray, np.ndarray]:
    X = design_matrix(features)
    y = label_vector(labels, X.shape[0])
    if np.unique(y).size < 2:
        raise PredictorError("labels contain a single class; at least one crisis and one tranquil period needed")
    return X, y


def stream(seed: int, purpose: int) -> np.random.Generator:
    """Independent generator per (seed, purpose) so streams never interleave."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose)]))


@dataclass(frozen=True)
class Predictor:
    kind: str
    hyperparams: dict[str, Any]
    state: dict[str, Any]
    feature_names: tuple[str, ...]
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in PREDICTOR_KINDS:
            raise PredictorError(f"unknown predictor kind {self.kind!r}")
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def _module(self):
        return importlib.import_module(f"{__package__}.{_MODULES[self.kind]}")

    def predict_proba(self, features: FactorPanel) -> np.ndarray:
        X = design_matrix(features, self.state.get("used_features", self.feature_names))
        p = self._module().predict_proba(self, X)
        return np.clip(p, 0.0, 1.0)

    def predict(self, features: FactorPanel, threshold: float = DEFAULT_THRESHOLD) -> ForecastSeries:
        return ForecastSeries(self.predict_proba(features), threshold, features.dates, self.kind)

    def importance(self, features: FactorPanel | None = None, labels=None) -> ImportanceTable:
        return self._module().importance(self, features, labels)

    # serialisation

    def to_json(self) -> str:
        doc = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "feature_names": list(self.feature_names),
            "hyperparams": _encode(self.hyperparams),
            "state": _encode(self.state),
            "meta": _encode(self.meta),
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Predictor":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_NAME:
            raise PredictorError("not a crisisews predictor file")
        if doc.get("version") != FORMAT_VERSION:
            raise PredictorError(f"unsupported predictor format version {doc.get('version')!r}")
        return cls(doc["kind"], _decode(doc["hyperparams"]), _decode(doc["state"]),
                   tuple(doc["feature_names"]), int(doc["seed"]), _decode(doc.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Predictor":
        return cls.from_json(Path(path).read_text())


def _encode(obj):
    if isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        return {"__ndarray__": base64.b64encode(arr.astype(dtype).tobytes()).decode("ascii"),
                "dtype": dtype.str, "shape": list(arr.shape)}
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"__float__": repr(obj)}
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            raw = base64.b64decode(obj["__ndarray__"])
            return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()
        if "__float__" in obj:
            return float(obj["__float__"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj
