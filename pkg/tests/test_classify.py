import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from crisisews.classify import (
    CrisisLabels,
    CutoffPolicy,
    LAMBDA_GRID,
    bootstrap_misspecification,
    compute_cmax,
    compute_epi,
    compute_fpi,
    filtered_high_vol,
    fit_swarch,
    long_term_transform,
    misspecification_rate,
    perfect_signal,
    rcm,
    rcm_from_probabilities,
    swarch_label,
    tqi_label,
    two_peak_cutoff,
)
from crisisews.classify.cutoff import valley_from_counts
from crisisews.classify.misspec import window_starts
from crisisews.classify.swarch import SwarchError, log_likelihood, RegimeModel
from crisisews.classify.tqi import TqiIndex, TqiInputError
from crisisews.frame import FactorPanel
from crisisews.simulate import SwarchSpec, simulate_swarch


# --- TQI ---------------------------------------------------------------


def _std(x):
    return np.std(x, ddof=1)


def test_fpi_one_sd_move_gives_one_third():
    # e has mean 0 and sd 1 with e_0 one sd above; r_0 and i_0 sit at their means
    e = np.array([1.0, 0.0, -1.0])
    r = np.array([0.0, 1.0, -1.0])
    i = np.array([0.0, -1.0, 1.0])
    assert compute_fpi(e, r, i).values[0] == pytest.approx(1 / 3, abs=1e-15)


def test_fpi_three_point_hand_oracle():
    e = np.array([1.0, 2.0, 6.0])      # mean 3, sd sqrt(7)
    r = np.array([0.0, 1.0, 2.0])      # mean 1, sd 1
    i = np.array([-1.0, 1.0, 0.0])     # mean 0, sd 1
    expected = [
        ((1 - 3) / math.sqrt(7) - (0 - 1) / 1 + (-1 - 0) / 1) / 3,
        ((2 - 3) / math.sqrt(7) - (1 - 1) / 1 + (1 - 0) / 1) / 3,
        ((6 - 3) / math.sqrt(7) - (2 - 1) / 1 + (0 - 0) / 1) / 3,
    ]
    np.testing.assert_allclose(compute_fpi(e, r, i).values, expected, atol=1e-15)


def test_fpi_zero_sd_error():
    with pytest.raises(TqiInputError, match="zero standard deviation"):
        compute_fpi([1, 2, 3], [1, 1, 1], [0, 1, 0])


def test_epi_examples():
    e = np.array([0.0, 0.02, -0.01])
    r = np.array([0.0, 0.05, 0.01])
    i = np.array([0.0, -0.5, 0.25])
    for kind in ("ERW", "KLR"):
        assert compute_epi(kind, e, r, i).values[0] == 0.0
    # KLR with reserve change and rate change zero at t -> EPI_t = de/e
    r2 = np.array([0.03, 0.0, -0.02])
    i2 = np.array([0.1, 0.0, 0.4])
    assert compute_epi("KLR", e, r2, i2).values[1] == pytest.approx(0.02, abs=1e-15)


def test_epi_three_point_hand_oracle():
    e = np.array([0.01, 0.03, -0.01])   # sd 0.02
    r = np.array([0.1, 0.0, -0.1])      # sd 0.1
    i = np.array([0.5, -0.5, 0.0])      # sd 0.5
    klr = [0.01 - 0.2 * 0.1 + 0.04 * 0.5, 0.03 - 0 + 0.04 * -0.5, -0.01 - 0.2 * -0.1 + 0]
    erw = [0.01 / 0.02 - 0.1 / 0.1 + 0.5 / 0.5, 0.03 / 0.02 - 0 + -0.5 / 0.5,
           -0.01 / 0.02 + 0.1 / 0.1 + 0]
    np.testing.assert_allclose(compute_epi("KLR", e, r, i).values, klr, atol=1e-12)
    np.testing.assert_allclose(compute_epi("EPI_ERW", e, r, i).values, erw, atol=1e-12)
    ref = np.array([0.1, 0.0, -0.1])
    with pytest.raises(TqiInputError):
        compute_epi("ERW", e, r, i, ref_reserves_pct=ref)  # differential is constant zero


def test_cmax_examples():
    np.testing.assert_array_equal(compute_cmax([1, 2, 3, 4, 5], 2).values, 1.0)
    np.testing.assert_allclose(compute_cmax([10, 12, 9, 8], 2).values, [1, 1, 0.75, 8 / 12])
    assert compute_cmax([4, 8, 4], 2).values[-1] == 0.5
    with pytest.raises(TqiInputError):
        compute_cmax([1, 0, 2], 1)
    with pytest.raises(TqiInputError):
        compute_cmax([1, 2], 2)


def test_cmax_brute_force():
    rng = np.random.default_rng(3)
    p = np.exp(np.cumsum(rng.normal(0, 0.05, 80)))
    m = 12
    expected = [p[t] / max(p[max(0, t - m):t + 1]) for t in range(p.size)]
    np.testing.assert_allclose(compute_cmax(p, m).values, expected, rtol=1e-15)


def test_tqi_label_examples():
    idx = TqiIndex("FPI", [0.0, 0.0, 0.0, 10.0])
    np.testing.assert_array_equal(tqi_label(idx, 1.0).labels, [0, 0, 0, 1])
    const = TqiIndex("CMAX", np.full(10, 0.8))
    for lam in LAMBDA_GRID:
        assert tqi_label(const, lam).count == 0
    assert LAMBDA_GRID == (1.0, 1.5, 2.0, 2.5, 3.0)
    cm = TqiIndex("CMAX", [1.0, 1.0, 1.0, 0.2])
    np.testing.assert_array_equal(tqi_label(cm, 1.0).labels, [0, 0, 0, 1])


@settings(max_examples=60)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=40),
       st.floats(0.1, 3.0), st.floats(0.0, 3.0), st.sampled_from(["FPI", "CMAX"]))
def test_tqi_label_monotone_in_lambda(values, lam, extra, kind):
    idx = TqiIndex(kind, values)
    a = tqi_label(idx, lam).labels
    b = tqi_label(idx, lam + extra).labels
    assert np.all(b <= a)


# --- perfect signal ----------------------------------------------------


def _perfect_signal_oracle(c, h):
    n = len(c)
    return [int(any(c[t + k] for k in range(h + 1) if t + k < n)) for t in range(n)]


def test_perfect_signal_examples():
    zero = CrisisLabels(np.zeros(30, dtype=int))
    assert perfect_signal(zero, 12).count == 0
    c = np.zeros(40, dtype=int)
    c[20] = 1
    y = perfect_signal(CrisisLabels(c), 12).labels
    assert set(np.flatnonzero(y)) == set(range(8, 21))
    c = [0, 1, 0, 0, 1, 0]
    y = perfect_signal(CrisisLabels(np.array(c)), 2).labels
    np.testing.assert_array_equal(y, _perfect_signal_oracle(c, 2))
    np.testing.assert_array_equal(y, [1, 1, 1, 1, 1, 0])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=50), st.integers(0, 15))
def test_perfect_signal_properties(c, h):
    base = CrisisLabels(np.array(c))
    y = perfect_signal(base, h)
    assert y.horizon_kind == "long_term"
    np.testing.assert_array_equal(y.labels, _perfect_signal_oracle(c, h))
    assert np.all(y.labels >= base.labels)
    if h == 0:
        np.testing.assert_array_equal(y.labels, base.labels)


# --- RCM / filtered probabilities --------------------------------------


def test_rcm_examples():
    assert rcm_from_probabilities(np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.0
    assert rcm_from_probabilities(np.full((5, 2), 0.5)) == pytest.approx(100.0)
    probs = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
    expected = 400 * (0.09 + 0.25 + 0.16) / 3
    assert rcm_from_probabilities(probs) == pytest.approx(expected, rel=1e-14)
    three = np.array([[0.2, 0.3, 0.5]])
    assert rcm_from_probabilities(three) == pytest.approx(900 * 0.03, rel=1e-14)


@pytest.mark.parametrize("probs, expected", [
    ([[1.0, 0.0, 0.0]], 0.0),
    ([[0.0, 0.5, 0.5]], 75.0),  # 100 (1 - 1.5 (1/9 + 2/36))
    ([[1 / 3, 1 / 3, 1 / 3]], 100.0),
    ([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]], 400 * (0.09 + 0.25 + 0.16) / 3),
])
def test_rcm_dispersion_examples(probs, expected):
    assert rcm_from_probabilities(np.array(probs), "dispersion") == pytest.approx(expected, rel=1e-14)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_rcm_forms_agree_for_two_regimes(p):
    probs = np.column_stack([p, 1 - np.array(p)])
    a = rcm_from_probabilities(probs, "product")
    b = rcm_from_probabilities(probs, "dispersion")
    assert a == pytest.approx(b, abs=1e-9)


def test_filtered_high_vol_column():
    model = RegimeModel(2, 0, 0, 0.0, np.zeros(0), np.array([1.0]), np.array([1.0, 2.0]),
                        np.eye(2), 0.0, np.array([[0.2, 0.8]]), 1)
    assert filtered_high_vol(model)[0] == 0.8


def _ar_arch_oracle_nll(params, y, p, q):
    """Plain AR(p)-ARCH(q) negative conditional log likelihood, direct loop."""
    u = params[0]
    theta = params[1:1 + p]
    alpha = params[1 + p:]
    t0 = p + q
    nll = 0.0
    eps = np.zeros(y.size)
    for t in range(p, y.size):
        eps[t] = y[t] - u - sum(theta[i] * y[t - 1 - i] for i in range(p))
    for t in range(t0, y.size):
        h = alpha[0] + sum(alpha[j] * eps[t - j] ** 2 for j in range(1, q + 1))
        nll += 0.5 * (math.log(2 * math.pi) + math.log(h) + eps[t] ** 2 / h)
    return nll


@pytest.fixture(scope="module")
def arch_series():
    spec = SwarchSpec(np.eye(1), np.ones(1), arch=np.array([0.8, 0.3]), intercept=0.1,
                      ar=np.array([0.2]))
    y, states = simulate_swarch(spec, 600, seed=11)
    assert np.all(states == 0)
    return y


def test_k1_matches_plain_arch_mle(arch_series):
    y = arch_series
    model = fit_swarch(y, K=1, p=1, q=1, seed=0)
    np.testing.assert_array_equal(model.filtered, 1.0)
    np.testing.assert_array_equal(filtered_high_vol(model), 1.0)
    # independent optimiser on the direct parameterisation with box constraints
    x0 = np.array([y.mean(), 0.0, y.var() * 0.8, 0.1])
    res = optimize.minimize(_ar_arch_oracle_nll, x0, args=(y, 1, 1), method="L-BFGS-B",
                            bounds=[(None, None), (-0.99, 0.99), (1e-6, None), (0.0, 5.0)])
    res = optimize.minimize(_ar_arch_oracle_nll, res.x, args=(y, 1, 1), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    n = y.size - 2
    assert abs(model.log_likelihood - (-res.fun)) / n < 1e-4
    # the SWARCH filter evaluated at the oracle optimum reproduces its likelihood
    u, th, a0, a1 = res.x
    ll = log_likelihood(y, u, [th], [a0, a1], [1.0], np.eye(1))
    assert ll == pytest.approx(-res.fun, abs=1e-9)


def test_k1_filter_equals_direct_loop(arch_series):
    y = arch_series[:100]
    params = np.array([0.05, 0.1, 0.7, 0.2])
    ll = log_likelihood(y, 0.05, [0.1], [0.7, 0.2], [1.0], np.eye(1))
    assert ll == pytest.approx(-_ar_arch_oracle_nll(params, y, 1, 1), abs=1e-10)


def _brute_force_loglik(y, u, theta, alpha, gamma, P):
    """Sum over every regime path (tiny T only) of the path likelihood."""
    import itertools

    K, p, q = len(gamma), len(theta), len(alpha) - 1
    t0 = p + q
    eps = np.zeros(len(y))
    for t in range(p, len(y)):
        eps[t] = y[t] - u - sum(theta[i] * y[t - 1 - i] for i in range(p))
    # ergodic start
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    pi = pi / pi.sum()
    total = 0.0
    n_states = len(y) - t0 + q  # regimes s_{t0-q} .. s_{T-1}
    for path in itertools.product(range(K), repeat=n_states):
        pr = pi[path[0]]
        for a, b in zip(path[:-1], path[1:]):
            pr *= P[a, b]
        dens = 1.0
        for t in range(t0, len(y)):
            k = t - t0 + q
            h = alpha[0] + sum(alpha[j] * eps[t - j] ** 2 / gamma[path[k - j]] for j in range(1, q + 1))
            h *= gamma[path[k]]
            dens *= math.exp(-0.5 * eps[t] ** 2 / h) / math.sqrt(2 * math.pi * h)
        total += pr * dens
    return math.log(total)


@pytest.mark.parametrize("K, p, q", [(2, 1, 1), (2, 0, 2), (3, 1, 1), (2, 2, 0)])
def test_filter_matches_path_enumeration(K, p, q):
    rng = np.random.default_rng(K * 10 + q)
    y = rng.standard_normal(8) * 2
    gamma = np.concatenate([[1.0], np.cumsum(rng.uniform(0.5, 3, K - 1)) + 1])
    P = rng.dirichlet(np.ones(K) * 2, size=K)
    theta = rng.uniform(-0.3, 0.3, p)
    alpha = np.concatenate([[0.7], rng.uniform(0.05, 0.4, q)])
    ll = log_likelihood(y, 0.1, theta, alpha, gamma, P)
    assert ll == pytest.approx(_brute_force_loglik(y, 0.1, theta, alpha, gamma, P), abs=1e-10)


@pytest.fixture(scope="module")
def two_regime():
    spec = SwarchSpec.two_regime(ratio=10.0, persistence=0.98)
    y, states = simulate_swarch(spec, 2000, seed=7)
    model = fit_swarch(y, K=2, p=1, q=1, seed=7)
    return y, states, model


def test_swarch_recovers_simulation(two_regime):
    y, states, model = two_regime
    assert model.converged
    assert abs(model.scales[1] / model.scales[0] - 10.0) <= 2.5
    fph = filtered_high_vol(model)
    assert np.mean((fph >= 0.5) == (states == 1)) >= 0.90
    assert fph[states == 1].mean() > fph[states == 0].mean()


def test_swarch_invariants(two_regime):
    y, _, model = two_regime
    np.testing.assert_allclose(model.filtered.sum(axis=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(model.transition.sum(axis=1), 1.0, atol=1e-10)
    assert model.scales[0] == 1.0 and np.all(np.diff(model.scales) > 0)
    assert model.arch[0] > 0 and np.all(model.arch >= 0)
    assert 0.0 <= rcm(model) <= 100.0


def test_swarch_beats_random_feasible_draws(two_regime):
    y, _, model = two_regime
    rng = np.random.default_rng(2024)
    for _ in range(20):
        stay = rng.uniform(0.5, 0.999, 2)
        P = np.array([[stay[0], 1 - stay[0]], [1 - stay[1], stay[1]]])
        ll = log_likelihood(y, rng.normal(0, 0.5), rng.uniform(-0.5, 0.5, 1),
                            [rng.uniform(0.05, 5.0), rng.uniform(0.0, 0.9)],
                            [1.0, 1.0 + rng.uniform(0.1, 30.0)], P)
        assert model.log_likelihood >= ll


def test_swarch_deterministic(two_regime):
    y, _, model = two_regime
    again = fit_swarch(y, K=2, p=1, q=1, seed=7)
    assert again.log_likelihood == model.log_likelihood
    np.testing.assert_array_equal(again.filtered, model.filtered)


@pytest.mark.slow
def test_rcm_prefers_two_regimes(two_regime):
    from crisisews.classify import select_regimes

    y, _, _ = two_regime
    best, scores = select_regimes(y, (1, 2, 3), seed=7, n_starts=5)
    assert best == 2
    assert scores[2] < scores[1] and scores[2] < scores[3]


def test_swarch_errors():
    with pytest.raises(SwarchError, match="degenerate"):
        fit_swarch(np.ones(100), K=2)
    with pytest.raises(SwarchError, match="at least"):
        fit_swarch(np.random.default_rng(0).standard_normal(50), K=2)
    with pytest.raises(SwarchError):
        fit_swarch(np.random.default_rng(0).standard_normal(500), K=5)


def test_regime_model_serialisation(tmp_path, two_regime):
    _, _, model = two_regime
    model.write(tmp_path / "report.txt", tmp_path / "filtered.csv")
    text = (tmp_path / "report.txt").read_text()
    assert "gamma_2" in text and "log likelihood" in text
    back = np.loadtxt(tmp_path / "filtered.csv", delimiter=",", skiprows=1)[:, 1:]
    np.testing.assert_array_equal(back, model.filtered)


# --- two-peak cutoff ---------------------------------------------------


def test_two_peak_identical_values_unimodal():
    res = two_peak_cutoff(np.full(100, 0.3))
    assert res.unimodal and res.cutoff == 0.5


def test_two_peak_hand_counts():
    res = valley_from_counts(np.array([9, 1, 7]), smooth=1)
    assert not res.unimodal and res.cutoff == pytest.approx(0.5)
    # with the default smoothing the three-bin histogram has one mode; fallback is 0.5 too
    assert valley_from_counts(np.array([9, 1, 7])).cutoff == pytest.approx(0.5)


def _brute_force_valley(x, bins):
    counts = np.histogram(x, bins=bins, range=(0, 1))[0]
    lo, hi = np.argmax(counts[: bins // 2]), bins // 2 + np.argmax(counts[bins // 2:])
    inner = np.arange(lo + 1, hi)
    return inner[counts[inner] == counts[inner].min()]


def test_two_peak_bimodal_mixture():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(0.1, 0.03, 300), rng.normal(0.9, 0.03, 300)]).clip(0, 1)
    res = two_peak_cutoff(x)
    assert 0.3 <= res.cutoff <= 0.7
    valley_bins = _brute_force_valley(x, 50)
    assert np.floor(res.cutoff * 50) in valley_bins


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.3), st.floats(0.7, 0.95))
def test_two_peak_mirror(seed, a, b):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.beta(2, 30, 200) + a - 0.06, b - rng.beta(2, 30, 150)]).clip(0, 1)
    c = two_peak_cutoff(x).cutoff
    m = two_peak_cutoff(1.0 - x).cutoff
    assert abs((1.0 - m) - c) <= 1.0 / 50 + 1e-12


def test_two_peak_prefers_prominent_mode_over_flank_bump():
    counts = np.zeros(50)
    counts[0], counts[1], counts[2], counts[3] = 100, 20, 30, 5
    counts[45:50] = [3, 8, 12, 20, 40]
    res = valley_from_counts(counts, smooth=1)
    assert res.peaks == (0, 49)
    assert 0.06 < res.cutoff < 0.9


# --- SWARCH labels -----------------------------------------------------


def test_swarch_label_examples():
    lab = swarch_label([0.2, 0.7], CutoffPolicy.fixed(0.5))
    np.testing.assert_array_equal(lab.labels, [0, 1])
    assert long_term_transform(0.056) == pytest.approx(1 - 0.944 ** 12)
    assert long_term_transform(0.056) < 0.5 < long_term_transform(0.06)
    assert long_term_transform(0.06) == pytest.approx(0.524, abs=1e-3)
    lt = swarch_label([0.056, 0.06], CutoffPolicy.fixed(0.5), "long_term")
    np.testing.assert_array_equal(lt.labels, [0, 1])
    zeros = np.zeros(200)
    for policy in (CutoffPolicy.fixed(0.3), CutoffPolicy.two_peak()):
        for kind in ("short_term", "long_term"):
            assert swarch_label(zeros, policy, kind).count == 0


def test_swarch_label_two_peak_history():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.beta(1, 20, 150), 1 - rng.beta(1, 20, 50)])
    rng.shuffle(x)
    lab = swarch_label(x, CutoffPolicy.two_peak(window=100))
    hist = lab.provenance["cutoff_history"]
    assert hist[0][0] == 99 and len(hist) == 101
    assert all(b[0] > a[0] for a, b in zip(hist, hist[1:]))
    assert all(0 < c < 1 for _, c in hist)
    np.testing.assert_array_equal(lab.cutoffs[:99], hist[0][1])
    for i, c in hist[::10]:
        assert lab.cutoffs[i] == c == two_peak_cutoff(x[: i + 1]).cutoff
    np.testing.assert_array_equal(lab.labels, (x >= lab.cutoffs).astype(int))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 0.9), st.floats(0, 0.09))
def test_long_term_monotone_in_cutoff(fph, c, extra):
    a = swarch_label(fph, CutoffPolicy.fixed(c), "long_term").labels
    b = swarch_label(fph, CutoffPolicy.fixed(c + extra), "long_term").labels
    assert np.all(b <= a)


# --- misspecification --------------------------------------------------


def test_misspecification_examples():
    a = np.array([0, 1, 1, 0])
    assert misspecification_rate(a, a) == 0
    assert misspecification_rate(a, 1 - a) == 1
    full = np.zeros(1896, dtype=int)
    test = full.copy()
    test[:15] = 1
    assert 100 * misspecification_rate(full, test) == pytest.approx(0.791, abs=5e-4)
    with pytest.raises(ValueError):
        misspecification_rate(a, a[:3])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_misspecification_symmetric(pairs):
    a, b = map(np.array, zip(*pairs))
    assert misspecification_rate(a, b) == misspecification_rate(b, a)


def _panel(n):
    dates = pd.date_range("2000-01-31", periods=n, freq="ME")
    return FactorPanel.from_dict(dates, {"x": np.arange(n, dtype=float)}, "monthly")


def test_bootstrap_consistent_classifier_is_zero():
    panel = _panel(120)

    def clf(p):
        return CrisisLabels((p.column("x") % 7 == 0).astype(int))

    res = bootstrap_misspecification(clf, panel, 30, B=50, seed=3)
    assert res.rate == 0 and res.excluded == 0


def test_bootstrap_matches_loop_oracle():
    panel = _panel(200)

    def clf(p):
        x = p.column("x")
        # position-relative rule: disagrees with the full-sample labels off the origin
        return CrisisLabels(((x - x[0]) % 5 == 0).astype(int))

    res = bootstrap_misspecification(clf, panel, 40, B=100, seed=9)
    full = clf(panel).labels
    rates = []
    for s in window_starts(200, 40, 100, 9):
        win = clf(panel.slice(s, s + 40)).labels
        rates.append(np.mean(win != full[s:s + 40]))
    assert res.rate == float(np.mean(rates))
    one = bootstrap_misspecification(clf, panel, 40, B=1, seed=9)
    s = int(window_starts(200, 40, 1, 9)[0])
    assert one.rate == misspecification_rate(full[s:s + 40], clf(panel.slice(s, s + 40)))


def test_bootstrap_excludes_failures():
    panel = _panel(100)

    def clf(p):
        if len(p) < 100 and p.column("x")[0] % 2 == 1:
            raise RuntimeError("boom")
        return CrisisLabels(np.zeros(len(p), dtype=int))

    res = bootstrap_misspecification(clf, panel, 20, B=40, seed=1)
    starts = window_starts(100, 20, 40, 1)
    assert res.excluded == int(np.sum(starts % 2 == 1))
    assert res.rate == 0.0
