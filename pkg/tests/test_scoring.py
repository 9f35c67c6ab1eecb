import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nabqr.data_model import QuantileForecastMatrix, QuantileLevels, hourly_timestamps
from nabqr.errors import ArityError, ConfigurationError
from nabqr.scoring import (
    ScoreConfig,
    ScoreReport,
    calculate_scores,
    crps_ensemble,
    mae,
    pinball,
    quantile_score,
    reliability,
    variogram_score,
)
from oracles import gaussian_crps, naive_crps, naive_mae, naive_quantile_score, naive_variogram


def qf(values, taus):
    values = np.asarray(values, float)
    if values.ndim == 1:
        values = values[:, None]
    return QuantileForecastMatrix(values, QuantileLevels(tuple(taus)), hourly_timestamps(values.shape[0]))


def test_pinball_examples():
    assert pinball(0.3, 0.3, 0.2) == 0.0
    assert pinball(1.0, 0.0, 0.5) == 0.5
    assert pinball(0.0, 1.0, 0.9) == pytest.approx(0.1)


def test_pinball_rejects_bad_tau():
    with pytest.raises(ValueError):
        pinball(1.0, 0.0, 1.0)


def test_quantile_score_examples(rng):
    y = rng.normal(size=20)
    assert quantile_score(y, qf(np.column_stack([y, y]), (0.2, 0.8))) == 0.0
    m = 0.3
    assert quantile_score(y, qf(np.full(20, m), (0.5,))) == pytest.approx(0.5 * np.mean(np.abs(y - m)))
    with pytest.raises(ArityError):
        quantile_score(y[:5], qf(np.zeros(6), (0.5,)))


def test_mae_examples():
    assert mae([0.0, 2.0], qf([1.0, 1.0], (0.5,))) == 1.0
    assert mae([0.0, 2.0], qf([0.0, 2.0], (0.5,))) == 0.0
    with pytest.raises(ConfigurationError):
        mae([0.0, 2.0], qf([1.0, 1.0], (0.4,)))


def test_crps_examples(rng):
    y = rng.normal(size=8)
    x = rng.normal(size=(8, 1))
    assert crps_ensemble(y, x) == pytest.approx(np.mean(np.abs(x[:, 0] - y)))
    assert crps_ensemble(y, np.repeat(y[:, None], 5, axis=1)) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ArityError):
        crps_ensemble(y, np.zeros((8, 0)))


def test_crps_gaussian_limit():
    members = np.random.default_rng(3).standard_normal(10_000)
    got = crps_ensemble([0.0], members[None, :])
    ref = gaussian_crps(0.0, 1.0, 0.0)
    assert ref == pytest.approx(0.2337, abs=1e-4)
    assert abs(got - ref) / ref < 0.02


def test_variogram_examples(rng):
    y = rng.normal(size=10)
    assert variogram_score(y, np.repeat(y[:, None], 3, axis=1)) == 0.0
    assert variogram_score([0.0, 1.0], [[0.0], [0.0]], p=1.0, max_lag=1) == 1.0
    with pytest.raises(ArityError):
        variogram_score(y, y[:, None], max_lag=10)


def test_reliability_examples(rng):
    y = rng.normal(size=30)
    assert reliability(y, qf(np.full(30, y.max() + 1), (0.95,)))[0] == 1.0
    np.testing.assert_array_equal(reliability(y, qf(np.column_stack([y, y, y]), (0.1, 0.5, 0.9))), 1.0)
    with pytest.raises(ArityError):
        reliability([], qf(np.zeros((0, 1)), (0.5,)))


@pytest.mark.parametrize("seed", range(15))
def test_naive_oracles(seed):
    rng = np.random.default_rng(seed)
    T, M = int(rng.integers(2, 51)), int(rng.integers(1, 21))
    y = rng.normal(size=T)
    x = y[:, None] + rng.normal(size=(T, M))
    taus = (0.1, 0.5, 0.9)
    Q = np.sort(y[:, None] + rng.normal(size=(T, 3)), axis=1)
    q = qf(Q, taus)
    assert quantile_score(y, q) == pytest.approx(naive_quantile_score(y, Q, taus), rel=1e-12)
    assert mae(y, q) == pytest.approx(naive_mae(y, Q[:, 1]), rel=1e-12)
    assert crps_ensemble(y, x) == pytest.approx(naive_crps(y, x), rel=1e-12)
    if M > 1:
        assert crps_ensemble(y, x, fair=True) == pytest.approx(naive_crps(y, x, fair=True), rel=1e-12)
    lag = min(24, T - 1)
    for p in (0.5, 1.0):
        assert variogram_score(y, x, p=p) == pytest.approx(naive_variogram(y, x, p, lag), rel=1e-12)


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
def test_quantile_score_minimized_at_empirical_quantile(rng, tau):
    y = rng.normal(size=101)
    grid = np.linspace(y.min() - 0.5, y.max() + 0.5, 2001)
    scores = [quantile_score(y, qf(np.full(y.size, c), (tau,))) for c in grid]
    best = quantile_score(y, qf(np.full(y.size, np.quantile(y, tau, method="inverted_cdf")), (tau,)))
    assert best <= min(scores) + 1e-12


arrays = st.integers(2, 12).flatmap(lambda T: st.tuples(
    st.lists(st.floats(-5, 5), min_size=T, max_size=T),
    st.lists(st.lists(st.floats(-5, 5), min_size=3, max_size=3), min_size=T, max_size=T)))


@settings(max_examples=60, deadline=None)
@given(arrays, st.randoms())
def test_crps_permutation_invariant(data, r):
    y, x = np.array(data[0]), np.array(data[1])
    perm = list(range(3))
    r.shuffle(perm)
    assert crps_ensemble(y, x[:, perm]) == pytest.approx(crps_ensemble(y, x), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays, st.floats(-100, 100))
def test_variogram_translation_invariant(data, shift):
    y, x = np.array(data[0]), np.array(data[1])
    a = variogram_score(y, x)
    assert variogram_score(y + shift, x + shift) == pytest.approx(a, rel=1e-6, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays)
def test_scores_non_negative(data):
    y, x = np.array(data[0]), np.array(data[1])
    q = qf(np.sort(x, axis=1), (0.1, 0.5, 0.9))
    assert quantile_score(y, q) >= 0
    assert mae(y, q) >= 0
    assert crps_ensemble(y, x) >= -1e-12
    assert variogram_score(y, x) >= 0
    cov = reliability(y, q)
    assert np.all((cov >= 0) & (cov <= 1))


def test_calculate_scores_perfect():
    y = np.linspace(0, 1, 30)
    q = qf(np.column_stack([y, y, y]), (0.1, 0.5, 0.9))
    rep = calculate_scores(y, q, np.column_stack([y, y]))
    assert rep.mae == rep.qs == rep.crps == rep.vars == 0.0
    assert list(rep.coverage.values()) == [1.0, 1.0, 1.0]
    assert rep.n_effective == 30


def test_calculate_scores_composition(rng):
    y = rng.normal(size=40)
    x = rng.normal(size=(40, 6))
    q = qf(np.sort(rng.normal(size=(40, 3)), axis=1), (0.2, 0.5, 0.8))
    cfg = ScoreConfig(variogram_p=1.0, variogram_max_lag=5, fair_crps=True)
    rep = calculate_scores(y, q, x, cfg)
    assert rep.mae == mae(y, q)
    assert rep.qs == quantile_score(y, q)
    assert rep.crps == crps_ensemble(y, x, fair=True)
    assert rep.vars == variogram_score(y, x, 1.0, 5)
    np.testing.assert_array_equal(list(rep.coverage.values()), reliability(y, q))


def test_calculate_scores_propagates_missing_median(rng):
    y = rng.normal(size=10)
    with pytest.raises(ConfigurationError):
        calculate_scores(y, qf(np.zeros((10, 1)), (0.3,)), rng.normal(size=(10, 2)))


def test_report_json_key_order(tmp_path):
    rep = ScoreReport(0.1, 0.2, 0.3, 0.4, {0.05: 0.06, 0.5: 0.5}, 12)
    p = rep.write_json(tmp_path / "s.json", extra={"baseline": {}})
    doc = json.loads(p.read_text())
    assert list(doc) == ["mae", "qs", "crps", "vars", "coverage", "n_effective", "baseline"]
    assert ScoreReport.from_dict(doc) == rep
