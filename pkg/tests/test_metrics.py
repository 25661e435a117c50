import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from curemark.metrics import (
    StepFunction,
    MetricWarning,
    auc_lat_t,
    brier_lat_t,
    c_index,
    default_grid,
    evaluate,
    incidence_weights,
    km_censoring,
    time_weights,
    weighted_auc_inc,
    weighted_brier_inc,
)


# -- oracles ---------------------------------------------------------------------


def km_by_hand(times, delta, t):
    """Product over censoring times c <= t of (1 - censored at c / at risk at c)."""
    s = 1.0
    for c in sorted(set(times[i] for i in range(len(times)) if delta[i] == 0)):
        if c <= t:
            n_c = sum(1 for i in range(len(times)) if times[i] == c and delta[i] == 0)
            r = sum(1 for x in times if x >= c)
            s *= 1 - n_c / r
    return s


def km_left_by_hand(times, delta, t):
    eps = 1e-12
    return km_by_hand(times, delta, t - eps)


def pair_sum(score, a, b):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(score)), 2):
        den += a[i] * b[j]
        num += a[i] * b[j] * (score[i] > score[j])
    return num, den


# -- Kaplan-Meier of censoring ---------------------------------------------------


def test_km_trivial_cases():
    G = km_censoring([1.0, 2.0, 3.0], [1, 1, 1])
    np.testing.assert_array_equal(G([0.0, 1.5, 10.0]), 1.0)
    G = km_censoring([2.0], [0])
    assert G(1.99) == 1.0 and G(2.0) == 0.0 and G.left(2.0) == 1.0


def test_km_six_subjects_by_hand():
    t = np.array([1.0, 2.0, 2.0, 3.0, 4.0, 5.0])
    d = np.array([1, 0, 1, 0, 1, 0])
    G = km_censoring(t, d)
    grid = [0.5, 1.0, 2.0, 2.5, 3.0, 4.5, 5.0, 6.0]
    np.testing.assert_allclose(G(grid), [1, 1, 0.8, 0.8, 0.8 * 2 / 3, 0.8 * 2 / 3, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(G(grid), [km_by_hand(t, d, s) for s in grid], atol=1e-15)


# -- incidence metrics -----------------------------------------------------------


def test_auc_inc_examples():
    assert weighted_auc_inc([3.0, 2.0, 1.0, 0.0], [1, 1, 0, 0]) == 1.0
    with pytest.warns(MetricWarning, match="constant"):
        assert weighted_auc_inc([1.0, 1.0, 1.0], [1.0, 0.2, 0.0]) == 0.0
    with pytest.warns(MetricWarning):
        assert np.isnan(weighted_auc_inc([1.0, 2.0], [1.0, 1.0]))


def test_auc_inc_four_subject_enumeration():
    eta = np.array([0.3, -1.2, 0.3, 2.0])
    q = np.array([0.9, 0.4, 1.0, 0.15])
    num, den = pair_sum(eta, q, 1 - q)
    assert weighted_auc_inc(eta, q) == pytest.approx(num / den, abs=1e-14)


def test_brier_inc_examples():
    t = np.array([1.0, 2.0, 3.0])
    assert weighted_brier_inc([1.0, 1.0, 1.0], [1, 1, 1], t) == 0.0
    assert weighted_brier_inc([0.5, 0.5, 0.5], [1, 1, 1], t) == 0.25


def test_brier_inc_mixed_censoring_by_hand():
    t = np.array([1.0, 2.0, 2.5, 3.0, 4.0, 6.0, 7.0])
    d = np.array([1, 0, 1, 0, 1, 0, 0])
    p = np.array([0.9, 0.6, 0.7, 0.4, 0.8, 0.3, 0.1])
    # determined: events (G~ = 1) and censorings after the last event at 4 (G~ = 0)
    u = {0: 1 / km_left_by_hand(t, d, 1.0), 2: 1 / km_left_by_hand(t, d, 2.5),
         4: 1 / km_left_by_hand(t, d, 4.0), 5: 1 / km_left_by_hand(t, d, 6.0),
         6: 1 / km_left_by_hand(t, d, 7.0)}
    label = {0: 1, 2: 1, 4: 1, 5: 0, 6: 0}
    expected = sum(u[i] * (p[i] - label[i]) ** 2 for i in u) / len(t)
    assert weighted_brier_inc(p, d, t) == pytest.approx(expected, abs=1e-12)
    g, cw = incidence_weights(t, d)
    np.testing.assert_array_equal(g, [1, 0, 1, 0, 1, 0, 0])
    assert cw.weights[1] == 0 and cw.weights[3] == 0


def test_brier_inc_without_events_is_undefined():
    t = np.array([1.0, 2.0, 3.0])
    assert np.all(incidence_weights(t, [0, 0, 0])[1].weights == 0)
    with pytest.warns(MetricWarning, match="determined"):
        assert np.isnan(weighted_brier_inc([0.2, 0.5, 0.9], [0, 0, 0], t))


# -- latency metrics -------------------------------------------------------------


def _eight():
    t = np.array([0.5, 0.9, 1.2, 1.4, 1.5, 1.8, 2.2, 3.0])
    d = np.array([1, 0, 1, 0, 1, 1, 0, 1])
    eta = np.array([1.1, 0.2, 0.7, -0.3, 1.1, 0.1, -0.8, 0.4])
    return t, d, eta


def test_auc_t_eight_subjects_enumeration():
    t, d, eta = _eight()
    s = 1.5
    case = [(t[i] <= s and d[i] == 1) / km_left_by_hand(t, d, t[i]) for i in range(8)]
    ctrl = [(t[j] > s) / km_by_hand(t, d, s) for j in range(8)]
    num, den = pair_sum(eta, case, ctrl)
    assert auc_lat_t(eta, t, d, s) == pytest.approx(num / den, abs=1e-14)


def test_auc_t_perfect_and_reversed():
    t = np.arange(1.0, 9.0)
    d = np.ones(8, dtype=int)
    assert auc_lat_t(-t, t, d, 4.0) == 1.0
    assert auc_lat_t(t, t, d, 4.0) == 0.0
    with pytest.warns(MetricWarning):
        assert np.isnan(auc_lat_t(t, t, d, 0.5))


def test_brier_t_examples_and_hand_value():
    t = np.arange(1.0, 7.0)
    d = np.ones(6, dtype=int)
    assert brier_lat_t((t > 3.5).astype(float), t, d, 3.5) == 0.0
    assert brier_lat_t(np.full(6, 0.5), t, d, 3.5) == 0.25
    t, d, eta = _eight()
    S = np.array([0.2, 0.9, 0.5, 0.6, 0.3, 0.7, 0.95, 0.4])
    s = 1.5
    total = 0.0
    for i in range(8):
        if t[i] <= s and d[i] == 1:
            total += S[i] ** 2 / km_left_by_hand(t, d, t[i])
        elif t[i] > s:
            total += (1 - S[i]) ** 2 / km_by_hand(t, d, s)
    assert brier_lat_t(S, t, d, s) == pytest.approx(total / 8, abs=1e-14)


def test_zero_censoring_survival_is_excluded_and_flagged():
    # an externally supplied censoring curve that reaches zero before the horizon
    G = StepFunction(np.array([0.5]), np.array([0.0]))
    t = np.array([1.0, 3.0, 5.0])
    d = np.array([1, 1, 0])
    cw = time_weights(t, d, 4.0, G)
    assert cw.excluded_zero_g == 3 and np.all(cw.weights == 0)
    with pytest.warns(MetricWarning) as rec:
        assert np.isnan(brier_lat_t([0.5, 0.5, 0.5], t, d, 4.0, G=G))
    assert any("censoring survival is zero" in str(w.message) for w in rec)


def test_c_index_examples():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    d = np.ones(4, dtype=int)
    assert c_index(-t, t, d) == 1.0
    # ties in time: (t=2, delta=1) against (t=2, delta=0) is comparable, the reverse is not
    t = np.array([2.0, 2.0, 3.0])
    d = np.array([1, 0, 1])
    eta = np.array([0.5, 0.1, 0.9])
    D = [(i, j) for i, j in itertools.permutations(range(3), 2)
         if d[i] == 1 and (t[i] < t[j] or (t[i] == t[j] and d[j] == 0))]
    assert D == [(0, 1), (0, 2)]
    assert c_index(eta, t, d) == pytest.approx(1 / 2)
    with pytest.warns(MetricWarning):
        assert np.isnan(c_index([1.0, 2.0], [1.0, 2.0], [0, 0]))


def test_c_index_null_is_one_half():
    rng = np.random.default_rng(0)
    n = 3000
    t = rng.exponential(1.0, n)
    vals = [c_index(rng.standard_normal(n), t, np.ones(n, dtype=int)) for _ in range(5)]
    assert abs(np.mean(vals) - 0.5) <= 0.02


def test_no_censoring_reduces_to_unweighted():
    rng = np.random.default_rng(5)
    n = 40
    t = rng.exponential(1.0, n)
    d = np.ones(n, dtype=int)
    eta = rng.standard_normal(n)
    S = rng.uniform(size=n)
    s = float(np.median(t))
    case, ctrl = (t <= s), (t > s)
    num = sum(eta[i] > eta[j] for i in np.flatnonzero(case) for j in np.flatnonzero(ctrl))
    assert auc_lat_t(eta, t, d, s) == pytest.approx(num / (case.sum() * ctrl.sum()), abs=1e-14)
    assert brier_lat_t(S, t, d, s) == pytest.approx(np.mean((ctrl - S) ** 2), abs=1e-14)
    assert np.all(time_weights(t, d, s).weights == 1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(6, 30))
def test_metric_invariances(seed, n):
    rng = np.random.default_rng(seed)
    t = np.round(rng.exponential(1.0, n), 1) + 0.1
    d = (rng.random(n) < 0.7).astype(int)
    if d.sum() == 0:
        d[0] = 1
    eta = rng.standard_normal(n)
    q = np.where(d == 1, 1.0, rng.uniform(size=n))
    S = rng.uniform(size=n)
    s = float(np.median(t))
    f = lambda x: np.exp(2 * x) + 3  # strictly increasing

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        base = [weighted_auc_inc(eta, q), auc_lat_t(eta, t, d, s), c_index(eta, t, d)]
        moved = [weighted_auc_inc(f(eta), q), auc_lat_t(f(eta), t, d, s), c_index(f(eta), t, d)]
        np.testing.assert_allclose(moved, base, atol=1e-14, equal_nan=True)
        perm = rng.permutation(n)
        again = [weighted_auc_inc(eta[perm], q[perm]), auc_lat_t(eta[perm], t[perm], d[perm], s),
                 c_index(eta[perm], t[perm], d[perm]), brier_lat_t(S[perm], t[perm], d[perm], s),
                 weighted_brier_inc(q[perm], d[perm], t[perm])]
        ref = base + [brier_lat_t(S, t, d, s), weighted_brier_inc(q, d, t)]
        np.testing.assert_allclose(again, ref, atol=1e-12, equal_nan=True)
    for v in base:
        assert np.isnan(v) or 0.0 <= v <= 1.0


def test_default_grid_and_evaluate():
    t = np.array([0.5, 1.0, 2.0, 3.0, 4.0, 10.0, 10.0])
    d = np.array([1, 1, 1, 1, 1, 0, 0])
    g = default_grid(t, d, n=4)
    np.testing.assert_allclose(g, np.linspace(0, np.quantile([0.5, 1, 2, 3, 4], 0.9), 5)[1:])
    S = np.tile(np.linspace(0.9, 0.2, 4), (7, 1))
    rep = evaluate(t, d, np.arange(7.0), None, np.full(7, 0.6), -t, S, g)
    assert np.isnan(rep.auc_inc) and any("posterior" in w for w in rep.warnings)
    assert rep.c_index == 1.0
    rows = rep.rows(time_offset=3.0)
    assert rows[0][0] == "auc_inc" and len(rows) == 3 + 2 * len(g)
    assert rows[3][1] == pytest.approx(g[0] + 3.0)
