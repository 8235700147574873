"""Experiment configuration: YAML tree merged over the shipped defaults.

Validation errors carry ``file:line`` of the offending entry so a typo can
be found without reading a traceback.
"""

from __future__ import annotations

import copy
import hashlib
import inspect
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .evaluate import METRICS
from .frame import Frequency
from .predict import FITTERS, PREDICTOR_KINDS

CLASSIFIERS = ("FPI", "CMAX", "SWARCH", "SWARCH_opt")
HORIZONS = ("short_term", "long_term")
BENCHMARKS = ("buy_and_hold", "classifier")
MLP_HIDDEN = (2, 4, 8, 16, 32)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the source location."""


def _construct(node, path, lines, fname, ctor):
    if isinstance(node, yaml.MappingNode):
        out = {}
        for knode, vnode in node.value:
            key = ctor.construct_object(knode, deep=True)
            if not isinstance(key, str):
                raise ConfigError(f"{fname}:{knode.start_mark.line + 1}: keys must be strings")
            if key in out:
                raise ConfigError(f"{fname}:{knode.start_mark.line + 1}: duplicate key {key!r}")
            lines[path + (key,)] = knode.start_mark.line + 1
            out[key] = _construct(vnode, path + (key,), lines, fname, ctor)
        return out
    if isinstance(node, yaml.SequenceNode):
        out = []
        for i, item in enumerate(node.value):
            lines[path + (i,)] = item.start_mark.line + 1
            out.append(_construct(item, path + (i,), lines, fname, ctor))
        return out
    return ctor.construct_object(node, deep=True)


def parse_yaml(text: str, fname: str = "<config>") -> tuple[dict, dict]:
    """Parse YAML into plain data plus a map from key path to line number."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{fname}:{mark.line + 1}" if mark is not None else fname
        raise ConfigError(f"{where}: {getattr(exc, 'problem', None) or exc}") from None
    if node is None:
        return {}, {}
    lines: dict = {}
    tree = _construct(node, (), lines, fname, yaml.SafeLoader(""))
    if not isinstance(tree, dict):
        raise ConfigError(f"{fname}:1: top level must be a mapping")
    return tree, lines


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "hyperparams":
            out[k] = _merge(out[k], v)
        elif isinstance(v, dict) and k == "hyperparams" and isinstance(out.get(k), dict):
            merged = copy.deepcopy(out[k])
            for kind, hp in v.items():
                merged[kind] = {**merged.get(kind, {}), **hp} if isinstance(hp, dict) else hp
            out[k] = merged
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_text() -> str:
    return resources.files("crisisews").joinpath("data/default.yaml").read_text(encoding="utf-8")


@dataclass(frozen=True)
class ExperimentConfig:
    tree: dict
    base_dir: Path
    source: str = "<defaults>"
    lines: dict = field(default_factory=dict, compare=False)

    def get(self, *path) -> Any:
        node = self.tree
        for key in path:
            node = node[key]
        return node

    def where(self, *path) -> str:
        for cut in range(len(path), 0, -1):
            if path[:cut] in self.lines:
                return f"{self.source}:{self.lines[path[:cut]]}"
        return f"{self.source} (default {'.'.join(map(str, path))})"

    def resolve(self, value: str | Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self.tree["run"]["seed"])

    @property
    def out(self) -> Path:
        return self.resolve(self.tree["run"]["out"])

    @property
    def run_id(self) -> str:
        blob = json.dumps(self.tree, sort_keys=True, default=str).encode()
        return hashlib.sha1(blob).hexdigest()[:10]

    def panel_path(self) -> Path:
        panel = self.tree["data"]["panel"]
        return self.resolve(panel) if panel is not None else self.out / "simulate" / "panel.csv"


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                require_data: bool = True) -> ExperimentConfig:
    """Read ``path`` (optional), merge over the defaults, apply command-line
    ``overrides`` (``{"seed": .., "out": .., "jobs": ..}``) and validate."""
    base, _ = parse_yaml(default_text(), "default.yaml")
    tree, lines, source, base_dir = base, {}, "<defaults>", Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        user, lines = parse_yaml(text, str(path))
        for key in user:
            if key not in base:
                raise ConfigError(f"{path}:{lines[(key,)]}: unknown section {key!r}")
        tree = _merge(base, user)
        source, base_dir = str(path), path.resolve().parent
    for key, value in (overrides or {}).items():
        if value is not None:
            tree["run"][key] = value
    cfg = ExperimentConfig(tree, base_dir, source, lines)
    validate(cfg, base, require_data)
    return cfg


# ---------------------------------------------------------------------------
# validation


class _Checker:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    def fail(self, path, msg):
        raise ConfigError(f"{self.cfg.where(*path)}: {'.'.join(map(str, path))}: {msg}")

    def val(self, path):
        return self.cfg.get(*path)

    def integer(self, path, lo=None, hi=None, null=False):
        v = self.val(path)
        if v is None and null:
            return v
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(path, f"expected an integer, got {v!r}")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            self.fail(path, f"{v} outside {lo if lo is not None else '-inf'}..{hi if hi is not None else 'inf'}")
        return v

    def number(self, path, lo=None, hi=None, open_lo=False, open_hi=False):
        v = self.val(path)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path, f"expected a number, got {v!r}")
        bad = ((lo is not None and (v <= lo if open_lo else v < lo))
               or (hi is not None and (v >= hi if open_hi else v > hi)))
        if bad:
            lb, rb = "(" if open_lo else "[", ")" if open_hi else "]"
            self.fail(path, f"{v} outside {lb}{lo}, {hi}{rb}")
        return float(v)

    def choice(self, path, options, null=False):
        v = self.val(path)
        if v is None and null:
            return v
        if v not in options:
            self.fail(path, f"{v!r} is not one of {', '.join(map(str, options))}")
        return v

    def string(self, path, null=False):
        v = self.val(path)
        if v is None and null:
            return v
        if not isinstance(v, str) or not v:
            self.fail(path, f"expected a non-empty string, got {v!r}")
        return v

    def boolean(self, path):
        v = self.val(path)
        if not isinstance(v, bool):
            self.fail(path, f"expected true or false, got {v!r}")
        return v

    def seq(self, path, null=False, nonempty=True):
        v = self.val(path)
        if v is None and null:
            return v
        if not isinstance(v, list) or (nonempty and not v):
            self.fail(path, "expected a non-empty list")
        return v

    def keys(self, path, allowed):
        v = self.val(path)
        if not isinstance(v, dict):
            self.fail(path, "expected a mapping")
        for k in v:
            if k not in allowed:
                self.fail(path + (k,), f"unknown key {k!r}")

    def existing_file(self, path):
        v = self.string(path, null=True)
        if v is not None and not self.cfg.resolve(v).is_file():
            self.fail(path, f"file not found: {self.cfg.resolve(v)}")


def validate(cfg: ExperimentConfig, base: dict, require_data: bool = True) -> None:
    c = _Checker(cfg)
    for section, body in base.items():
        if isinstance(body, dict):
            c.keys((section,), list(body))
    c.integer(("run", "seed"), 0)
    c.integer(("run", "jobs"), 1)
    c.string(("run", "out"))

    d = ("data",)
    c.keys(d + ("fpi",), ("exchange", "reserves", "rate"))
    c.choice(d + ("frequency",), [f.value for f in Frequency])
    c.choice(d + ("market",), ("stock", "currency"))
    for key in ("returns", "price"):
        c.string(d + (key,))
    for key in ("exchange", "reserves", "rate"):
        c.string(d + ("fpi", key), null=True)
    for key in ("features", "assets", "risk_free"):
        items = c.seq(d + (key,), null=key != "assets", nonempty=key != "risk_free")
        for i, _ in enumerate(items or ()):
            c.string(d + (key, i))
    for i, name in enumerate(c.val(d + ("risk_free",))):
        if name not in c.val(d + ("assets",)):
            c.fail(d + ("risk_free", i), f"{name!r} is not listed in data.assets")
    c.existing_file(d + ("labels",))
    if require_data:
        c.existing_file(d + ("panel",))

    s = ("simulate",)
    c.integer(s + ("T",), 50)
    P = c.seq(s + ("transition",))
    K = len(P)
    for i, row in enumerate(P):
        if not isinstance(row, list) or len(row) != K:
            c.fail(s + ("transition", i), f"row must have {K} entries (square matrix)")
        for j, _ in enumerate(row):
            c.number(s + ("transition", i, j), 0.0, 1.0)
        if abs(sum(row) - 1.0) > 1e-10:
            c.fail(s + ("transition", i), f"row sums to {sum(row)!r}, not 1")
    scales = c.seq(s + ("scales",))
    if len(scales) != K:
        c.fail(s + ("scales",), f"need {K} scales, one per regime")
    for i, _ in enumerate(scales):
        c.number(s + ("scales", i), 0.0, open_lo=True)
    arch = c.seq(s + ("arch",))
    c.number(s + ("arch", 0), 0.0, open_lo=True)
    for i in range(1, len(arch)):
        c.number(s + ("arch", i), 0.0)
    c.number(s + ("intercept",))
    for i, _ in enumerate(c.seq(s + ("ar",), nonempty=False)):
        c.number(s + ("ar", i))
    c.integer(s + ("initial_regime",), 1, K)
    c.integer(s + ("n_factors",), 1)
    c.string(s + ("start",))

    k = ("classify",)
    c.keys(k + ("swarch",), ("K", "p", "q", "n_starts"))
    c.keys(k + ("cutoff",), ("value", "bins", "smooth", "window"))
    c.keys(k + ("bootstrap",), ("B", "piece_length", "n_starts"))
    clfs = c.seq(k + ("classifiers",))
    for i, _ in enumerate(clfs):
        c.choice(k + ("classifiers", i), CLASSIFIERS)
    if len(set(clfs)) != len(clfs):
        c.fail(k + ("classifiers",), "duplicate classifier")
    for i, _ in enumerate(c.seq(k + ("lambda_grid",))):
        c.number(k + ("lambda_grid", i), 0.0, open_lo=True)
    c.integer(k + ("cmax_window",), 1)
    c.integer(k + ("swarch", "K"), 1, 4)
    c.integer(k + ("swarch", "p"), 0, 3)
    c.integer(k + ("swarch", "q"), 0, 3)
    c.integer(k + ("swarch", "n_starts"), 1)
    c.number(k + ("cutoff", "value"), 0.0, 1.0, open_lo=True, open_hi=True)
    c.integer(k + ("cutoff", "bins"), 3)
    c.integer(k + ("cutoff", "smooth"), 1)
    c.integer(k + ("cutoff", "window"), 30, null=True)
    c.choice(k + ("horizon",), HORIZONS)
    c.integer(k + ("perfect_signal_horizon",), 0)
    c.number(k + ("split",), 0.0, 1.0, open_lo=True, open_hi=True)
    c.integer(k + ("bootstrap", "B"), 1)
    c.integer(k + ("bootstrap", "piece_length"), 2, null=True)
    c.integer(k + ("bootstrap", "n_starts"), 1)
    if "FPI" in clfs:
        for key in ("exchange", "reserves", "rate"):
            if c.val(d + ("fpi", key)) is None:
                c.fail(d + ("fpi", key), "FPI classifier needs this input column")

    p = ("predict",)
    preds = c.seq(p + ("predictors",))
    for i, _ in enumerate(preds):
        c.choice(p + ("predictors", i), PREDICTOR_KINDS)
    if len(set(preds)) != len(preds):
        c.fail(p + ("predictors",), "duplicate predictor")
    c.number(p + ("threshold",), 0.0, 1.0, open_lo=True, open_hi=True)
    c.integer(p + ("lag",), 0)
    c.keys(p + ("hyperparams",), PREDICTOR_KINDS)
    for kind, hp in c.val(p + ("hyperparams",)).items():
        if not isinstance(hp, dict):
            c.fail(p + ("hyperparams", kind), "expected a mapping")
        allowed = [n for n in inspect.signature(FITTERS[kind]).parameters
                   if n not in ("features", "labels", "seed")]
        c.keys(p + ("hyperparams", kind), allowed)
    hp = c.val(p + ("hyperparams",))
    if "hidden" in hp.get("mlp", {}):
        c.choice(p + ("hyperparams", "mlp", "hidden"), MLP_HIDDEN)
    if "D" in hp.get("gradient_boost", {}):
        c.integer(p + ("hyperparams", "gradient_boost", "D"), 1, 5)
    if "M" in hp.get("gradient_boost", {}):
        c.integer(p + ("hyperparams", "gradient_boost", "M"), 1)
    if "alpha" in hp.get("stepwise_logit", {}):
        c.number(p + ("hyperparams", "stepwise_logit", "alpha"), 0.0, 1.0, open_lo=True, open_hi=True)

    e = ("evaluate",)
    c.integer(e + ("advance",), 0, null=True)
    c.boolean(e + ("squared_qps",))
    for i, cond in enumerate(c.seq(e + ("screen",), nonempty=False)):
        if not (isinstance(cond, list) and len(cond) == 3):
            c.fail(e + ("screen", i), "expected [metric, '<' or '>', threshold]")
        c.choice(e + ("screen", i, 0), METRICS)
        c.choice(e + ("screen", i, 1), ("<", ">"))
        c.number(e + ("screen", i, 2))

    b = ("backtest",)
    gammas = c.seq(b + ("gammas",))
    for i, _ in enumerate(gammas):
        c.choice(b + ("gammas", i), (1, 2, 3))
    if len(set(gammas)) != len(gammas):
        c.fail(b + ("gammas",), "duplicate risk-aversion level")
    c.integer(b + ("B",), 1)
    c.number(b + ("block_parameter",), 0.0, 1.0, open_lo=True)
    c.integer(b + ("vol_window",), 2, null=True)
    c.choice(b + ("eta",), ("return", "trailing_mean"))
    for i, _ in enumerate(c.seq(b + ("signal_assets",), null=True) or ()):
        name = c.string(b + ("signal_assets", i))
        if name not in c.val(d + ("assets",)):
            c.fail(b + ("signal_assets", i), f"{name!r} is not listed in data.assets")
    for i, _ in enumerate(c.seq(b + ("benchmarks",), nonempty=False)):
        c.choice(b + ("benchmarks", i), BENCHMARKS)


__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_yaml", "default_text",
           "CLASSIFIERS", "HORIZONS", "BENCHMARKS"]
