"""Command-line pipeline: simulate, classify, train-eval, backtest, report.

Every command reads the same YAML config (merged over the shipped defaults)
and writes under ``<out>/<command>/``. File contents depend only on the
config and seed; logs go to stderr.

Exit codes: 0 success, 1 model failure, 2 configuration or input failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backtest import BacktestError, reality_check, run_backtest, sharpe_and_cer
from .classify import (
    CrisisLabels,
    CutoffPolicy,
    SwarchError,
    bootstrap_misspecification,
    compare_on_test,
    compute_cmax,
    compute_fpi,
    filtered_high_vol,
    fit_swarch,
    perfect_signal,
    swarch_label,
    tqi_label,
)
from .classify.labels import LONG_TERM, SHORT_TERM
from .classify.tqi import TqiInputError
from .config import ConfigError, ExperimentConfig, load_config
from .evaluate import EvaluationCell, assemble_report, calibration, hit_ratios
from .frame import FactorPanel, PanelError, Standardizer, format_float, load_csv, write_csv
from .predict import ForecastSeries, PredictorError, fit_predictor
from .simulate import SimulationError, SwarchSpec, simulate_panel

log = logging.getLogger("crisisews")

EXIT_OK, EXIT_MODEL, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("simulate", "classify", "train-eval", "backtest", "report")
SWARCH_KINDS = ("SWARCH", "SWARCH_opt")


# ---------------------------------------------------------------------------
# plumbing


@contextmanager
def stage(cfg: ExperimentConfig, name: str):
    t0 = time.perf_counter()
    log.info("run=%s seed=%d stage=%s status=start", cfg.run_id, cfg.seed, name)
    try:
        yield
    except Exception:
        log.info("run=%s seed=%d stage=%s status=error wall=%.3fs", cfg.run_id, cfg.seed, name,
                 time.perf_counter() - t0)
        raise
    log.info("run=%s seed=%d stage=%s status=done wall=%.3fs", cfg.run_id, cfg.seed, name,
             time.perf_counter() - t0)


def _outdir(cfg: ExperimentConfig, *parts: str) -> Path:
    path = cfg.out.joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    """Header and string rows of a report CSV."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return (rows[0], rows[1:]) if rows else ([], [])


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    return str(value)


def load_panel(cfg: ExperimentConfig) -> FactorPanel:
    path = cfg.panel_path()
    if not path.is_file():
        hint = " (run 'crisisews simulate' first or set data.panel)" if cfg.get("data", "panel") is None else ""
        raise ConfigError(f"{cfg.where('data', 'panel')}: data file not found: {path}{hint}")
    panel = load_csv(path, cfg.get("data", "frequency"))
    needed = set(cfg.get("data", "assets")) | {cfg.get("data", "returns")}
    needed |= set(feature_columns(cfg, panel))
    missing = sorted(needed - set(panel.columns))
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
    return panel


def feature_columns(cfg: ExperimentConfig, panel: FactorPanel) -> list[str]:
    d = cfg.get("data")
    if d["features"] is not None:
        return list(d["features"])
    reserved = {d["returns"], d["price"], *d["assets"], *d["risk_free"],
                *(v for v in d["fpi"].values() if v is not None), "regime", "crisis"}
    return [c for c in panel.columns if c not in reserved]


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig) -> int:
    s = cfg.get("simulate")
    with stage(cfg, "simulate"):
        spec = SwarchSpec(np.array(s["transition"], dtype=float), np.array(s["scales"], dtype=float),
                          np.array(s["arch"], dtype=float), float(s["intercept"]),
                          np.array(s["ar"], dtype=float), int(s["initial_regime"]) - 1)
        panel, states = simulate_panel(spec, int(s["T"]), cfg.seed, int(s["n_factors"]),
                                       cfg.get("data", "frequency"), str(s["start"]))
        out = _outdir(cfg, "simulate")
        write_csv(panel, out / "panel.csv")
        high = spec.high_regime
        _write_rows(out / "regimes.csv", ["date", "regime", "crisis"],
                    [[d.strftime("%Y-%m-%d"), int(k) + 1, int(k == high)]
                     for d, k in zip(panel.dates, states)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# classify


@dataclass
class Labeller:
    """Builds short-term crisis classifications for one classifier kind.

    ``n_starts`` overrides the SWARCH optimiser starts (used for bootstrap
    refits); ``lam`` picks the TQI band width.
    """

    cfg: ExperimentConfig
    kind: str
    lam: float | None = None
    n_starts: int | None = None

    def __call__(self, panel: FactorPanel) -> CrisisLabels:
        c = self.cfg.get("classify")
        d = self.cfg.get("data")
        if self.kind in SWARCH_KINDS:
            sw = c["swarch"]
            model = fit_swarch(panel.column(d["returns"]), sw["K"], sw["p"], sw["q"], seed=self.cfg.seed,
                               n_starts=self.n_starts or sw["n_starts"])
            return swarch_label(filtered_high_vol(model), self.policy(), SHORT_TERM, panel.dates)
        if self.kind == "CMAX":
            index = compute_cmax(panel.column(d["price"]), c["cmax_window"])
        else:
            f = d["fpi"]
            index = compute_fpi(panel.column(f["exchange"]), panel.column(f["reserves"]),
                                panel.column(f["rate"]))
        lab = tqi_label(index, self.lam)
        return CrisisLabels(lab.labels, SHORT_TERM, lab.provenance, panel.dates)

    def policy(self) -> CutoffPolicy:
        cut = self.cfg.get("classify", "cutoff")
        if self.kind == "SWARCH_opt":
            return CutoffPolicy.two_peak(cut["window"], cut["bins"], cut["smooth"])
        return CutoffPolicy.fixed(cut["value"])


def _swarch_fit(cfg: ExperimentConfig, panel: FactorPanel):
    sw = cfg.get("classify", "swarch")
    return fit_swarch(panel.column(cfg.get("data", "returns")), sw["K"], sw["p"], sw["q"],
                      seed=cfg.seed, n_starts=sw["n_starts"])


def targets_from(cfg: ExperimentConfig, kind: str, short: CrisisLabels, fph=None) -> CrisisLabels:
    """Prediction target for the configured horizon: the classification itself
    (short term), the long-term FPH transform (SWARCH) or the perfect signal."""
    c = cfg.get("classify")
    if c["horizon"] == SHORT_TERM:
        return short
    if kind in SWARCH_KINDS:
        policy = Labeller(cfg, kind).policy()
        return swarch_label(fph, policy, LONG_TERM, short.dates)
    return perfect_signal(short, c["perfect_signal_horizon"])


MISSPEC_COLUMNS = ("classifier", "lambda", "crises_full", "crises_truncated", "crises_test",
                   "misspecified_test", "rate_test", "rate_bootstrap", "bootstrap_excluded", "B",
                   "piece_length", "selected")


def cmd_classify(cfg: ExperimentConfig) -> int:
    c = cfg.get("classify")
    panel = load_panel(cfg)
    n = len(panel)
    n_test = n - int(np.floor(c["split"] * n))
    boot = c["bootstrap"]
    piece = boot["piece_length"] or n_test
    out = _outdir(cfg, "classify")
    rows = []
    fitted = None
    for kind in c["classifiers"]:
        with stage(cfg, f"classify:{kind}"):
            fph = None
            if kind in SWARCH_KINDS:
                if fitted is None:
                    fitted = _swarch_fit(cfg, panel)
                    fitted.write(out / "swarch_model.txt", out / "swarch_filtered.csv", panel.dates)
                fph = filtered_high_vol(fitted)
                candidates = [(None, Labeller(cfg, kind))]
            else:
                candidates = [(float(lam), Labeller(cfg, kind, float(lam))) for lam in c["lambda_grid"]]
            results = []
            for lam, labeller in candidates:
                full = (swarch_label(fph, labeller.policy(), SHORT_TERM, panel.dates)
                        if fph is not None else labeller(panel))
                cmp = compare_on_test(labeller, panel, n_test, full)
                refit = Labeller(cfg, kind, lam, boot["n_starts"])
                bs = bootstrap_misspecification(refit, panel, piece, boot["B"], cfg.seed, full)
                results.append((lam, cmp, bs))
            best = min(range(len(results)), key=lambda i: (results[i][2].rate, i))
            for i, (lam, cmp, bs) in enumerate(results):
                rows.append([kind, _cell(lam), cmp.full.count, cmp.truncated.count, cmp.test.count,
                             cmp.count, _cell(cmp.rate), _cell(bs.rate), bs.excluded, boot["B"], piece,
                             "yes" if (i == best and lam is not None) else "no"])
            lam, cmp, _ = results[best]
            cmp.full.to_csv(out / f"labels_{kind}_full.csv")
            cmp.truncated.to_csv(out / f"labels_{kind}_truncated.csv")
            cmp.test.to_csv(out / f"labels_{kind}_test.csv")
            targets_from(cfg, kind, cmp.full, fph).to_csv(out / f"targets_{kind}_{c['horizon']}.csv")
    _write_rows(out / "misspecification.csv", MISSPEC_COLUMNS, rows)
    return EXIT_OK


def build_targets(cfg: ExperimentConfig, panel: FactorPanel) -> dict[str, CrisisLabels]:
    """Targets per classifier: a configured label file, the classify output
    when present, otherwise a fresh classification of the full panel."""
    horizon = cfg.get("classify", "horizon")
    path = cfg.get("data", "labels")
    if path is not None:
        labels = CrisisLabels.from_csv(cfg.resolve(path), horizon)
        if not labels.dates.equals(panel.dates):
            raise ConfigError(f"{cfg.where('data', 'labels')}: label dates do not match the panel dates")
        return {"file": labels}
    out = {}
    fitted = None
    for kind in cfg.get("classify", "classifiers"):
        saved = cfg.out / "classify" / f"targets_{kind}_{horizon}.csv"
        if saved.is_file():
            labels = CrisisLabels.from_csv(saved, horizon)
            if labels.dates.equals(panel.dates):
                out[kind] = labels
                continue
        with stage(cfg, f"label:{kind}"):
            if kind in SWARCH_KINDS:
                fitted = fitted or _swarch_fit(cfg, panel)
                fph = filtered_high_vol(fitted)
                short = swarch_label(fph, Labeller(cfg, kind).policy(), SHORT_TERM, panel.dates)
                out[kind] = targets_from(cfg, kind, short, fph)
            else:
                lam = _selected_lambda(cfg, kind)
                out[kind] = targets_from(cfg, kind, Labeller(cfg, kind, lam)(panel))
    return out


def _selected_lambda(cfg: ExperimentConfig, kind: str) -> float:
    path = cfg.out / "classify" / "misspecification.csv"
    if path.is_file():
        header, rows = read_table(path)
        for r in rows:
            rec = dict(zip(header, r))
            if rec["classifier"] == kind and rec["selected"] == "yes":
                return float(rec["lambda"])
    lam = float(cfg.get("classify", "lambda_grid")[0])
    log.warning("no λ selection for %s on disk; using %s", kind, lam)
    return lam


# ---------------------------------------------------------------------------
# train-eval


@dataclass(frozen=True)
class Design:
    """Lagged, standardised design: features at row t, target at t + lag."""

    X: FactorPanel
    y: np.ndarray
    cut: int

    @property
    def train(self) -> tuple[FactorPanel, np.ndarray]:
        return self.X.slice(0, self.cut), self.y[: self.cut]


def make_design(cfg: ExperimentConfig, panel: FactorPanel, targets: CrisisLabels) -> Design:
    lag = cfg.get("predict", "lag")
    feats = panel.select(feature_columns(cfg, panel))
    if feats.has_missing():
        raise ConfigError(f"{cfg.panel_path()}: feature columns contain missing values")
    m = len(panel) - lag
    X = feats.slice(0, m)
    y = targets.labels[lag:].astype(np.int8)
    cut = int(np.floor(cfg.get("classify", "split") * m))
    if not 0 < cut < m:
        raise ConfigError(f"{cfg.where('classify', 'split')}: split leaves an empty side")
    scaler = Standardizer.fit(X.slice(0, cut))
    return Design(scaler.transform(X), y, cut)


def _cell_name(classifier: str, predictor: str, horizon: str) -> str:
    return f"{classifier}_{predictor}_{horizon}"


def run_cell(cfg: ExperimentConfig, classifier: str, predictor: str, design: Design,
             threshold: float) -> tuple[EvaluationCell, ForecastSeries | None, object]:
    horizon = cfg.get("classify", "horizon")
    hp = dict(cfg.get("predict", "hyperparams").get(predictor, {}))
    t0 = time.perf_counter()
    try:
        Xtr, ytr = design.train
        model = fit_predictor(predictor, Xtr, ytr, seed=cfg.seed, **hp)
        probs = model.predict_proba(design.X)[design.cut:]
        dates = design.X.dates[design.cut:]
        forecast = ForecastSeries(probs, threshold, dates, _cell_name(classifier, predictor, horizon))
        y_test = design.y[design.cut:]
        adv = cfg.get("evaluate", "advance")
        hits = hit_ratios(CrisisLabels(y_test, horizon), forecast.signals, adv)
        scores = calibration(y_test, forecast, cfg.get("evaluate", "squared_qps"))
        imp = model.importance(Xtr, ytr)
    except (PredictorError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("run=%s seed=%d stage=cell:%s/%s status=failed wall=%.3fs reason=%s", cfg.run_id,
                  cfg.seed, classifier, predictor, time.perf_counter() - t0, exc)
        return EvaluationCell.failed(classifier, predictor, horizon, str(exc)), None, None
    log.info("run=%s seed=%d stage=cell:%s/%s status=done wall=%.3fs", cfg.run_id, cfg.seed,
             classifier, predictor, time.perf_counter() - t0)
    return EvaluationCell(classifier, predictor, horizon, hits, scores, imp), forecast, model


def cmd_train_eval(cfg: ExperimentConfig, threshold: float | None = None) -> int:
    threshold = cfg.get("predict", "threshold") if threshold is None else threshold
    horizon = cfg.get("classify", "horizon")
    panel = load_panel(cfg)
    targets = build_targets(cfg, panel)
    out = _outdir(cfg, "train_eval")
    for sub in ("forecasts", "importance", "models"):
        _outdir(cfg, "train_eval", sub)
    jobs = []
    with stage(cfg, "train-eval"):
        for classifier, labels in targets.items():
            design = make_design(cfg, panel, labels)
            for predictor in cfg.get("predict", "predictors"):
                jobs.append((classifier, predictor, design))
        workers = int(cfg.get("run", "jobs"))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: run_cell(cfg, *j, threshold), jobs))
        for (classifier, predictor, _), (cell, forecast, model) in zip(jobs, results):
            name = _cell_name(classifier, predictor, horizon)
            if forecast is not None:
                forecast.to_csv(out / "forecasts" / f"{name}.csv")
                cell.importance.to_csv(out / "importance" / f"{name}.csv")
                model.save(out / "models" / f"{name}.json")
        screen = [tuple(s) for s in cfg.get("evaluate", "screen")]
        report = assemble_report([r[0] for r in results], screen)
        report.to_csv(out / "report.csv")
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    if all(r[0].status != "ok" for r in results):
        log.error("every cell failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# backtest


PERFORMANCE_METRICS = ("sharpe", "cer")


def _forecast_files(cfg: ExperimentConfig) -> list[tuple[str, Path]]:
    horizon = cfg.get("classify", "horizon")
    base = cfg.out / "train_eval" / "forecasts"
    classifiers = ["file"] if cfg.get("data", "labels") is not None else cfg.get("classify", "classifiers")
    found = []
    for classifier in classifiers:
        for predictor in cfg.get("predict", "predictors"):
            name = _cell_name(classifier, predictor, horizon)
            if (base / f"{name}.csv").is_file():
                found.append((f"{classifier}-{predictor}", base / f"{name}.csv"))
    return found


def cmd_backtest(cfg: ExperimentConfig) -> int:
    b = cfg.get("backtest")
    d = cfg.get("data")
    panel = load_panel(cfg)
    assets = panel.select(list(d["assets"]))
    steer = list(b["signal_assets"] or [d["returns"]])
    for name in steer:
        if name not in assets.columns:
            raise ConfigError(f"{cfg.where('backtest', 'signal_assets')}: {name!r} is not a held asset")

    strategies: dict[str, np.ndarray | None] = {}
    window = None
    for label, path in _forecast_files(cfg):
        fc = load_csv(path, d["frequency"])
        idx = panel.dates.get_indexer(fc.dates)
        if np.any(idx < 0) or np.any(np.diff(idx) != 1):
            raise BacktestError(f"{path}: forecast dates are not a contiguous run of panel dates")
        span = (int(idx[0]), int(idx[-1]) + 1)
        if window is not None and span != window:
            raise BacktestError(f"{path}: forecast window differs from the other forecasts")
        window = span
        strategies[label] = fc.column("probability")
    if window is None:
        lag = cfg.get("predict", "lag")
        m = len(panel) - lag
        window = (int(np.floor(cfg.get("classify", "split") * m)), m)
    lo, hi = window
    if hi - lo < 3:
        raise BacktestError("back-test window shorter than three periods")

    benches: dict[str, np.ndarray | None] = {}
    if "buy_and_hold" in b["benchmarks"]:
        benches["buy_and_hold"] = None
    if "classifier" in b["benchmarks"]:
        for kind, labels in build_targets(cfg, panel).items():
            benches[f"classifier-{kind}"] = labels.labels[lo:hi].astype(float)

    held = assets.slice(lo, hi)
    out = _outdir(cfg, "backtest")
    _outdir(cfg, "backtest", "tracks")
    gammas = [int(g) for g in b["gammas"]]
    tracks = {}
    with stage(cfg, "backtest"):
        for label, signal in [*benches.items(), *strategies.items()]:
            fc = None if signal is None else {name: signal[: hi - lo] for name in steer}
            for g in gammas:
                track = run_backtest(held, fc, g, label, b["vol_window"], tuple(d["risk_free"]), b["eta"])
                tracks[label, g] = track
                track.to_csv(out / "tracks" / f"{label}_g{g}.csv")
        perf = []
        for label in [*benches, *strategies]:
            vals = [sharpe_and_cer(tracks[label, g]) for g in gammas]
            role = "ews" if label in strategies else "benchmark"
            for k, metric in enumerate(PERFORMANCE_METRICS):
                perf.append([label, role, metric, *(_cell(v[k]) for v in vals)])
        _write_rows(out / "performance.csv", ["strategy", "role", "metric", *(f"gamma_{g}" for g in gammas)],
                    perf)
        rc = []
        for ews in strategies:
            own = f"classifier-{ews.split('-', 1)[0]}"
            for bench in (name for name in benches if name in ("buy_and_hold", own)):
                for g in gammas:
                    res = reality_check(tracks[ews, g], tracks[bench, g], b["B"], b["block_parameter"], cfg.seed)
                    rc.append([ews, bench, g, _cell(res.statistic), _cell(res.p_value), res.B,
                               _cell(res.block_parameter), res.seed])
        _write_rows(out / "reality_check.csv",
                    ["ews", "benchmark", "gamma", "statistic", "p_value", "B", "p", "seed"], rc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _text_table(header, rows) -> list[str]:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    return ["  ".join(str(x).rjust(w) for x, w in zip(r, widths)).rstrip() for r in [header, *rows]]


def _short(x: str) -> str:
    try:
        return f"{float(x):.4g}" if x not in ("", "undefined") else x
    except ValueError:
        return x


def cmd_report(cfg: ExperimentConfig) -> int:
    out = cfg.out
    parts = []
    sections = [
        ("Crisis classification and misspecification", out / "classify" / "misspecification.csv"),
        ("Prediction grid", out / "train_eval" / "report.txt"),
        ("Portfolio performance", out / "backtest" / "performance.csv"),
        ("Reality check (H0: EWS variance >= benchmark variance)", out / "backtest" / "reality_check.csv"),
    ]
    for title, path in sections:
        parts += [title, "=" * len(title)]
        if not path.is_file():
            parts += ["(not run)", ""]
            continue
        if path.suffix == ".txt":
            parts += [path.read_text(encoding="utf-8").rstrip("\n"), ""]
            continue
        header, rows = read_table(path)
        parts += _text_table(header, [[_short(x) for x in r] for r in rows]) if rows else ["(no rows)"]
        parts.append("")
    if all(not p.is_file() for _, p in sections):
        raise ConfigError(f"nothing to report under {out}")
    with stage(cfg, "report"):
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text("\n".join(parts), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    def __init__(self) -> None:
        super().__init__(sys.stderr)

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crisisews", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML config merged over the defaults")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--jobs", type=int, help="override run.jobs (parallel grid cells)")
        p.add_argument("--out", type=Path, help="override run.out")
        if name == "train-eval":
            p.add_argument("--threshold", type=float, help="probability cutoff for warning signals")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers and not any(isinstance(h, _StderrHandler) for h in log.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    overrides = {"seed": args.seed, "jobs": args.jobs,
                 "out": None if args.out is None else str(args.out.resolve())}
    try:
        cfg = load_config(args.config, overrides, require_data=args.command not in ("simulate", "report"))
        if args.command == "train-eval" and args.threshold is not None and not 0 < args.threshold < 1:
            raise ConfigError(f"--threshold {args.threshold} outside (0, 1)")
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "classify":
            return cmd_classify(cfg)
        if args.command == "train-eval":
            return cmd_train_eval(cfg, args.threshold)
        if args.command == "backtest":
            return cmd_backtest(cfg)
        return cmd_report(cfg)
    except (ConfigError, PanelError, SimulationError, TqiInputError) as exc:
        print(f"crisisews: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SwarchError, PredictorError, BacktestError, RuntimeError, ValueError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"crisisews: model failure: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
