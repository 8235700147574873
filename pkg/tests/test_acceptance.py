"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the slowest checks
(two-peak dominance and the default end-to-end run) take several minutes.
"""

import filecmp
import itertools
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml
from scipy import optimize

from crisisews._stats import rank_auc
from crisisews.backtest import (
    PortfolioTrack,
    portfolio_weights,
    reality_check_differential,
    run_backtest,
    sharpe_and_cer,
)
from crisisews.classify import (
    CutoffPolicy,
    bootstrap_misspecification,
    filtered_high_vol,
    fit_swarch,
    swarch_label,
)
from crisisews.classify.swarch import log_likelihood
from crisisews.cli import main, read_table
from crisisews.evaluate import calibration, qps
from crisisews.frame import FactorPanel
from crisisews.predict import ForecastSeries, attn_lstm, fit_predictor, mlp
from crisisews.simulate import SwarchSpec, simulate_panel, simulate_swarch


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def _panel(X, names=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = names or [f"x{i}" for i in range(X.shape[1])]
    dates = pd.date_range("2000-01-31", periods=X.shape[0], freq="ME")
    return FactorPanel.from_dict(dates, {n: X[:, i] for i, n in enumerate(names)}, "monthly")


def _config(path: Path, tree: dict) -> Path:
    path.write_text(yaml.safe_dump(tree, sort_keys=False))
    return path


# 1 -----------------------------------------------------------------------


def test_swarch_recovery(verdict):
    spec = SwarchSpec.two_regime(ratio=10.0, persistence=0.98)
    y, states = simulate_swarch(spec, 2000, seed=7)
    t0 = time.perf_counter()
    model = fit_swarch(y, K=2, p=1, q=1, seed=7)
    wall = time.perf_counter() - t0
    acc = float(np.mean((filtered_high_vol(model) >= 0.5) == (states == spec.high_regime)))
    ratio = model.scales[1] / model.scales[0]
    ok = acc >= 0.90 and abs(ratio - 10.0) <= 2.5 and wall < 60
    verdict(1, ok, f"accuracy {acc:.3f}, gamma ratio {ratio:.2f}, fit {wall:.1f}s")


# 2 -----------------------------------------------------------------------


def _plain_arch_nll(params, y):
    u, theta, a0, a1 = params
    eps = np.zeros(y.size)
    eps[1:] = y[1:] - u - theta * y[:-1]
    nll = 0.0
    for t in range(2, y.size):
        h = a0 + a1 * eps[t - 1] ** 2
        if h <= 0:
            return np.inf
        nll += 0.5 * (math.log(2 * math.pi) + math.log(h) + eps[t] ** 2 / h)
    return nll


def test_hamilton_filter_sanity(verdict):
    worst = 0.0
    for K, p, q, seed in [(1, 1, 1, 0), (2, 1, 1, 1), (2, 0, 2, 2), (3, 1, 1, 3), (2, 2, 0, 4)]:
        y, _ = simulate_swarch(SwarchSpec.two_regime(), 500, seed=seed)
        model = fit_swarch(y, K=K, p=p, q=q, seed=seed, n_starts=3)
        worst = max(worst, float(np.max(np.abs(model.filtered.sum(axis=1) - 1.0))))
    spec = SwarchSpec(np.eye(1), np.ones(1), arch=np.array([0.8, 0.3]), intercept=0.1, ar=np.array([0.2]))
    y, _ = simulate_swarch(spec, 600, seed=11)
    model = fit_swarch(y, K=1, p=1, q=1, seed=0)
    x0 = np.array([y.mean(), 0.0, y.var() * 0.8, 0.1])
    res = optimize.minimize(_plain_arch_nll, x0, args=(y,), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 40000})
    per_obs = abs(model.log_likelihood + res.fun) / (y.size - 2)
    at_oracle = log_likelihood(y, res.x[0], [res.x[1]], res.x[2:], [1.0], np.eye(1))
    ok = worst <= 1e-10 and per_obs < 1e-4 and abs(at_oracle + res.fun) < 1e-8
    verdict(2, ok, f"max row-sum error {worst:.1e}, K=1 loglik gap {per_obs:.1e} per observation")


# 3 -----------------------------------------------------------------------


class _WindowFits:
    """SWARCH refit per window, shared by both cutoff policies."""

    def __init__(self, returns, seed, n_starts):
        self.returns, self.seed, self.n_starts = returns, seed, n_starts
        self.cache = {}

    def fph(self, panel):
        key = (panel.dates[0], len(panel))
        if key not in self.cache:
            y = panel.column("ret")
            self.cache[key] = filtered_high_vol(fit_swarch(y, 2, 1, 1, seed=self.seed, n_starts=self.n_starts))
        return self.cache[key]

    def classifier(self, policy):
        return lambda panel: swarch_label(self.fph(panel), policy)


def test_two_peak_dominance(verdict):
    runs, B, T, piece = 20, 200, 1000, 250
    t0 = time.perf_counter()
    wins, pairs = 0, []
    for r in range(runs):
        panel, _ = simulate_panel(SwarchSpec.two_regime(10.0, 0.98), T, seed=r)
        fits = _WindowFits(panel.column("ret"), r, n_starts=3)
        full_fph = filtered_high_vol(fit_swarch(panel.column("ret"), 2, 1, 1, seed=r))
        rates = []
        for policy in (CutoffPolicy.two_peak(), CutoffPolicy.fixed(0.5)):
            full = swarch_label(full_fph, policy)
            rates.append(bootstrap_misspecification(fits.classifier(policy), panel, piece, B, r, full).rate)
        pairs.append(rates)
        wins += rates[0] <= rates[1]
    wall = time.perf_counter() - t0
    mean = np.mean(pairs, axis=0)
    ok = wins >= 15 and wall < 600
    verdict(3, ok, f"two-peak <= fixed in {wins}/{runs} runs (mean rates {mean[0]:.4f} vs "
                   f"{mean[1]:.4f}), {wall:.0f}s")


# 4 -----------------------------------------------------------------------


def _fd_error(f, theta, eps=1e-5):
    # central-difference step near the cube root of machine epsilon; smaller steps
    # let round-off swamp components around 1e-7
    _, g = f(theta)
    num = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        num[i] = (f(theta + e)[0] - f(theta - e)[0]) / (2 * eps)
    return float(np.max(np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-8)))


def _mlp_objective(X, y, n, h):
    def f(t):
        loss, g = mlp.loss_and_grad(mlp.MlpParams.unflat(t, n, h), X, y, 0.01)
        return loss, g.flat()
    return f


def _lstm_objective(Xw, y, n, h):
    def f(t):
        loss, g = attn_lstm.loss_and_grad(attn_lstm.LstmParams.unflat(t, n, h), Xw, y, 0.01)
        return loss, g.flat()
    return f


def test_gradient_checks(verdict):
    worst_mlp = worst_lstm = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        # vary inputs, hidden width and window length across the ten toys
        n, h = 2 + seed % 4, (2, 4, 8)[seed % 3]
        X = rng.standard_normal((9, n))
        y = (rng.random(9) < 0.5).astype(float)
        th = rng.normal(0, 0.5, mlp.MlpParams.zeros(n, h).flat().size)
        worst_mlp = max(worst_mlp, _fd_error(_mlp_objective(X, y, n, h), th))
        T_steps, hl = 2 + seed % 4, 2 + seed % 3
        Xw = rng.standard_normal((7, T_steps, n))
        th = rng.normal(0, 0.5, attn_lstm.LstmParams.zeros(n, hl).flat().size)
        worst_lstm = max(worst_lstm, _fd_error(_lstm_objective(Xw, y[:7], n, hl), th))
    ok = worst_mlp < 1e-4 and worst_lstm < 1e-4
    verdict(4, ok, f"max relative error MLP {worst_mlp:.1e}, attention LSTM {worst_lstm:.1e}")


# 5 -----------------------------------------------------------------------


def test_klr_oracle(verdict):
    rng = np.random.default_rng(5)
    checked = mismatches = 0
    for n, k in itertools.product(range(4, 13), range(1, 4)):
        for trial in range(12):
            X = rng.standard_normal((n, k)) if trial % 2 else rng.integers(0, 3, (n, k)).astype(float)
            y = rng.integers(0, 2, n)
            y[0], y[-1] = 1, 0
            m = fit_predictor("klr", _panel(X), y)
            for j, v in enumerate(m.state["variables"]):
                for rec in v["scan"]:
                    c = np.percentile(X[:, j], rec["percentile"])
                    A = B = C = D = 0
                    for t in range(n):
                        s = X[t, j] > c
                        A += s and y[t] == 1
                        B += s and y[t] == 0
                        C += (not s) and y[t] == 1
                        D += (not s) and y[t] == 0
                    ref = math.inf if A == 0 else (B / (B + D) if B + D else 0.0) / (A / (A + C))
                    checked += 1
                    same = rec["counts"] == [A, B, C, D] and (
                        rec["nsr"] == ref or abs(rec["nsr"] - ref) <= 1e-12 * abs(ref))
                    mismatches += not same
    verdict(5, mismatches == 0, f"{checked} grid cutoffs compared, {mismatches} mismatches")


# 6 -----------------------------------------------------------------------


def _separable(n, seed, noise=8):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2 + noise))
    return X, (X[:, 0] + X[:, 1] > 0).astype(int)


def test_predictor_power_floor(verdict):
    X, y = _separable(300, 0)
    Xh, yh = _separable(300, 1)
    rng = np.random.default_rng(6)
    yp, yhp = rng.permutation(y), rng.permutation(yh)
    out = {}
    for kind in ("random_forest", "gradient_boost"):
        real = rank_auc(yh, fit_predictor(kind, _panel(X), y, seed=0).predict_proba(_panel(Xh)))
        twin = rank_auc(yhp, fit_predictor(kind, _panel(X), yp, seed=0).predict_proba(_panel(Xh)))
        out[kind] = (real, twin)
    ok = all(r >= 0.95 and 0.4 <= t <= 0.6 for r, t in out.values())
    detail = ", ".join(f"{k} AUC {r:.3f} (permuted {t:.3f})" for k, (r, t) in out.items())
    verdict(6, ok, detail)


# 7 -----------------------------------------------------------------------


def test_metric_identities(verdict):
    y = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    perfect = calibration(y, ForecastSeries(y.astype(float)))
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(500):
        yy = rng.integers(0, 2, 30)
        yy[:2] = [0, 1]
        c = calibration(yy, ForecastSeries(rng.random(30)))
        worst = max(worst, abs(c.sar - (c.accuracy + c.auc + 1 - c.rmse) / 3))
    signed = qps([1, 1, 1], [0.0, 0.0, 0.0])
    ok = (perfect.qps == 0 and perfect.youden_j == 1 and perfect.sar == 1 and worst <= 1e-12
          and signed == -2)
    verdict(7, ok, f"perfect QPS {perfect.qps}, J {perfect.youden_j}, SAR {perfect.sar}; "
                   f"SAR identity error {worst:.1e}; signed QPS {signed}")


# 8 -----------------------------------------------------------------------


def test_backtest_formula_fidelity(verdict, tmp_path):
    rng = np.random.default_rng(8)
    w = portfolio_weights(rng.random(5000), rng.normal(0, 5, 5000), rng.uniform(0.01, 3, 5000), 2)
    bounded = bool(np.all((w >= -0.5) & (w <= 1.5)))
    hand_weights = [portfolio_weights([a], [b], [1.0], g)[0] for a, g, b in [(0, 1, 1.0), (0, 1, 10.0), (1, 2, -3.0)]]
    err = max(abs(u - v) for u, v in zip(hand_weights, [1.0, 1.5, -0.5]))
    cols = {"a": [1.0, 3.0, 2.0, 4.0], "b": [-1.0, 1.0, 0.5, -0.5]}
    fc = {"a": np.array([0.0, 0.5, 1.0, 0.2])}
    dates = pd.date_range("2000-01-31", periods=4, freq="ME")
    track = run_backtest(FactorPanel.from_dict(dates, cols, "monthly"), fc, gamma=3, vol_window=2)
    R = np.zeros(4)
    for name, r in cols.items():
        yh = fc.get(name, np.zeros(4))
        for t in range(1, 4):
            sd = statistics.stdev(r[t - 1:t + 1])
            R[t] += min(max(r[t] / sd / (3 + yh[t]), -0.5), 1.5) * r[t]
    err = max(err, float(np.max(np.abs(track.returns - R))))
    s2 = math.sqrt(2)
    sharpe, cer = sharpe_and_cer(PortfolioTrack(np.zeros((2, 1)), [1 - s2, 1 + s2], 1, "t", ("a",)))
    err = max(err, abs(sharpe - 0.5), abs(cer))
    mean, sd = float(np.mean(track.returns)), float(np.std(track.returns, ddof=1))
    _, cer3 = sharpe_and_cer(track)
    err = max(err, abs(cer3 - (mean - 1.5 * sd)))

    cfg = _config(tmp_path / "c.yaml", {
        "run": {"out": "out"}, "simulate": {"T": 240},
        "classify": {"classifiers": ["CMAX"], "horizon": "short_term"}})
    codes = [main([c, "--config", str(cfg)]) for c in ("simulate", "backtest")]
    _, rows = read_table(tmp_path / "out" / "backtest" / "performance.csv")
    bench_only = codes == [0, 0] and {r[0] for r in rows} == {"buy_and_hold", "classifier-CMAX"} \
        and not (tmp_path / "out" / "train_eval").exists()
    ok = bounded and err <= 1e-12 and bench_only
    verdict(8, ok, f"weights bounded {bounded}, max hand-arithmetic error {err:.1e}, "
                   f"classifier-only benchmark run {bench_only}")


# 9 -----------------------------------------------------------------------


def test_reality_check_calibration(verdict):
    t0 = time.perf_counter()
    rejections = 0
    for trial in range(200):
        f = np.random.default_rng([trial, 9]).normal(size=300)
        rejections += reality_check_differential(f, B=500, p=0.1, seed=trial).p_value <= 0.1
    size = rejections / 200
    f = -0.5 + np.random.default_rng(99).normal(size=500)
    power_p = reality_check_differential(f, B=1000, p=0.1, seed=0).p_value
    wall = time.perf_counter() - t0
    ok = 0.05 <= size <= 0.15 and power_p < 0.01 and wall < 900
    verdict(9, ok, f"size {size:.3f} at level 0.1, power p-value {power_p:.4f}, {wall:.1f}s")


# 10 ----------------------------------------------------------------------

COMMANDS = ("simulate", "classify", "train-eval", "backtest", "report")


def _tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_determinism(verdict, tmp_path):
    cfg = _config(tmp_path / "c.yaml", {
        "run": {"out": "a"}, "simulate": {"T": 240},
        "classify": {"classifiers": ["SWARCH", "SWARCH_opt", "CMAX"], "swarch": {"n_starts": 3},
                     "bootstrap": {"B": 10, "n_starts": 1}},
        "predict": {"hyperparams": {"mlp": {"epochs": 20}, "random_forest": {"M_max": 30},
                                    "gradient_boost": {"M": 20}, "attn_lstm": {"epochs": 5}}},
        "backtest": {"B": 100}})
    for out in ("a", "b"):
        for c in COMMANDS:
            assert main([c, "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    files = _tree(tmp_path / "a")
    same = files == _tree(tmp_path / "b") and all(
        filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in files)
    verdict(10, same, f"{len(files)} output files compared across two runs of every command")


# 11 ----------------------------------------------------------------------


def test_end_to_end_desk_run(verdict, tmp_path):
    cfg = _config(tmp_path / "c.yaml", {"run": {"out": "out"}})
    t0 = time.perf_counter()
    codes = {c: main([c, "--config", str(cfg)]) for c in COMMANDS}
    wall = time.perf_counter() - t0
    out = tmp_path / "out"
    preds = ("stepwise_logit", "klr", "mlp", "random_forest", "gradient_boost", "attn_lstm")
    expected = ["simulate/panel.csv", "simulate/regimes.csv", "classify/misspecification.csv",
                "classify/swarch_model.txt", "classify/swarch_filtered.csv",
                "classify/targets_SWARCH_opt_long_term.csv", "train_eval/report.csv",
                "train_eval/report.txt", "backtest/performance.csv", "backtest/reality_check.csv",
                "report.txt"]
    for p in preds:
        name = f"SWARCH_opt_{p}_long_term"
        expected += [f"train_eval/forecasts/{name}.csv", f"train_eval/importance/{name}.csv",
                     f"train_eval/models/{name}.json"]
        expected += [f"backtest/tracks/SWARCH_opt-{p}_g{g}.csv" for g in (1, 2, 3)]
    missing = [e for e in expected if not (out / e).is_file()]
    header, rows = read_table(out / "backtest" / "performance.csv") if not missing else ([], [])
    gammas = [h for h in header if h.startswith("gamma_")]
    ok = all(v == 0 for v in codes.values()) and not missing and gammas == ["gamma_1", "gamma_2",
                                                                             "gamma_3"] and wall < 1800
    verdict(11, ok, f"exit codes {list(codes.values())}, {len(expected) - len(missing)}/{len(expected)} "
                    f"report files, {wall:.0f}s")
