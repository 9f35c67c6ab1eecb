import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nabqr import taqr
from nabqr.data_model import QuantileLevels
from nabqr.errors import ArityError, SingularDesignError, UnderdeterminedError
from nabqr.taqr import (
    TaqrState,
    check_optimality_bounds,
    init_state,
    one_step_quantile_prediction,
    pinball_sum,
    predict,
    read_beta_history,
    run_taqr,
    solve_qr_batch,
    update,
    write_beta_history,
)
from oracles import brute_force_qr, highs_qr, rolling_batch_predictions

ones = lambda n: np.ones((n, 1))


def design(rng, n, K):
    return np.column_stack([np.ones(n), rng.normal(size=(n, K - 1))])


def assert_solution_invariants(X, y, sol):
    h = list(sol.basis_h)
    assert len(h) == X.shape[1] == len(set(h))
    lhs = X[h] @ sol.beta
    assert np.max(np.abs(lhs - y[h])) <= 1e-10 * max(1.0, np.max(np.abs(y[h])))
    recomputed = sum(r * (sol.tau - (r < 0)) for r in y - X @ sol.beta)
    assert abs(recomputed - sol.objective) <= 1e-8 * max(1.0, recomputed)


# ------------------------------------------------------------------ batch

def test_median_of_odd_sample():
    y = np.array([1.0, 2, 3, 4, 5])
    sol = solve_qr_batch(ones(5), y, 0.5)
    assert sol.beta[0] == pytest.approx(3.0)
    assert sol.basis_h == (2,)


def test_lower_quartile_matches_brute_force():
    y = np.array([1.0, 2, 3, 4])
    sol = solve_qr_batch(ones(4), y, 0.25)
    bounded, best = brute_force_qr(ones(4), y, 0.25)
    assert sol.objective == pytest.approx(bounded, abs=1e-12)
    assert bounded == pytest.approx(best)
    assert 1.0 <= sol.beta[0] <= 2.0


def test_exact_fit(rng):
    X = design(rng, 15, 3)
    b = np.array([0.5, -2.0, 3.0])
    sol = solve_qr_batch(X, X @ b, 0.3)
    np.testing.assert_allclose(sol.beta, b, atol=1e-10)
    assert sol.objective == pytest.approx(0.0, abs=1e-10)


def test_underdetermined():
    with pytest.raises(UnderdeterminedError):
        solve_qr_batch(np.eye(3), np.ones(3), 0.5)


def test_rank_deficient(rng):
    x = rng.normal(size=10)
    with pytest.raises(SingularDesignError):
        solve_qr_batch(np.column_stack([x, 2 * x]), rng.normal(size=10), 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(4, 12), st.sampled_from([0.1, 0.25, 0.5, 0.9]))
def test_brute_force_equivalence(seed, K, n, tau):
    rng = np.random.default_rng(seed)
    if n <= K:
        return
    X = design(rng, n, K)
    y = rng.normal(size=n)
    sol = solve_qr_batch(X, y, tau)
    bounded, best = brute_force_qr(X, y, tau)
    assert sol.objective == pytest.approx(bounded, abs=1e-10)
    assert sol.objective == pytest.approx(best, abs=1e-10)
    assert check_optimality_bounds(X, y, sol)
    assert_solution_invariants(X, y, sol)


@pytest.mark.parametrize("seed", range(12))
def test_matches_highs(seed):
    rng = np.random.default_rng(seed)
    n, K = int(rng.integers(20, 150)), int(rng.integers(1, 6))
    X = design(rng, n, K)
    y = X @ rng.normal(size=K) + rng.standard_t(3, size=n)
    tau = float(rng.choice([0.05, 0.3, 0.5, 0.8, 0.95]))
    sol = solve_qr_batch(X, y, tau)
    ref, _ = highs_qr(X, y, tau)
    assert sol.objective == pytest.approx(ref, rel=1e-9)
    assert check_optimality_bounds(X, y, sol)
    assert_solution_invariants(X, y, sol)


def test_ties_and_degenerate_data():
    # repeated values and integer-valued regressors produce degenerate vertices
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(40), rng.integers(0, 3, 40)])
    y = rng.integers(0, 4, 40).astype(float)
    for tau in (0.1, 0.5, 0.75):
        sol = solve_qr_batch(X, y, tau)
        ref, _ = highs_qr(X, y, tau)
        assert sol.objective == pytest.approx(ref, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
def test_intercept_minimizes_pinball_over_sample_quantiles(rng, tau):
    y = rng.gamma(2.0, size=37)
    sol = solve_qr_batch(ones(y.size), y, tau)
    mine = pinball_sum(y - sol.beta[0], tau)
    for c in np.quantile(y, np.linspace(0, 1, 201)):
        assert mine <= pinball_sum(y - c, tau) + 1e-12


# --------------------------------------------------------------- adaptive

def test_init_state_matches_batch(rng):
    X, y = design(rng, 20, 3), rng.normal(size=20)
    state = init_state(X, y, 0.4, 20)
    assert len(state.solution.basis_h) == 3
    assert state.solution.objective == pytest.approx(solve_qr_batch(X, y, 0.4).objective, rel=1e-12)


def test_init_state_underdetermined(rng):
    with pytest.raises(UnderdeterminedError):
        init_state(design(rng, 3, 3), rng.normal(size=3), 0.5, 3)


def test_init_state_window_shorter_than_block(rng):
    with pytest.raises(ArityError):
        init_state(design(rng, 20, 2), rng.normal(size=20), 0.5, 10)


def test_constant_target():
    state = init_state(ones(12), np.full(12, 2.5), 0.5, 12)
    assert state.beta[0] == pytest.approx(2.5)


def test_predict_dot_product():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [3.0, -1.0]])
    state = init_state(X, X[:, 0].copy(), 0.5, 5)
    np.testing.assert_allclose(state.beta, [1.0, 0.0], atol=1e-12)
    assert predict(state, [5, 7]) == pytest.approx(5.0)
    assert predict(state, [0, 0]) == 0.0
    with pytest.raises(ArityError):
        predict(state, [1, 2, 3])


def test_predict_matches_independent_dot(rng):
    X, y = design(rng, 31, 3), rng.normal(size=31)
    state = init_state(X[:30], y[:30], 0.7, 30)
    expected = sum(a * b for a, b in zip(X[30], state.beta))
    before = state.beta.copy()
    assert predict(state, X[30]) == pytest.approx(expected, rel=1e-14)
    np.testing.assert_array_equal(state.beta, before)


def test_update_without_pivots_keeps_beta():
    state = init_state(ones(5), np.array([1.0, 2, 3, 4, 5]), 0.5, None)
    update(state, [1.0], 10.0)
    assert state.last_pivots == 0
    assert state.beta[0] == pytest.approx(3.0)
    # sliding: drop a below-median row and add another below-median row
    state = init_state(ones(5), np.array([1.0, 2, 3, 4, 5]), 0.5, 5)
    update(state, [1.0], 0.5)
    assert state.last_pivots == 0
    assert state.beta[0] == pytest.approx(3.0)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("tau", [0.1, 0.5, 0.85])
def test_updates_match_cold_solves(seed, tau):
    rng = np.random.default_rng(seed)
    T, K, W = 120, 3, 31
    X = design(rng, T, K)
    y = X @ np.array([1.0, 0.5, -0.3]) + rng.standard_t(4, size=T)
    state = init_state(X[:W], y[:W], tau, W)
    for t in range(W, T):
        update(state, X[t], y[t])
        np.testing.assert_array_equal(state.window_y, y[t - W + 1:t + 1])
        cold = solve_qr_batch(state.window_X, state.window_y, tau)
        assert state.solution.objective == pytest.approx(cold.objective, rel=1e-8, abs=1e-12)
        assert_solution_invariants(state.window_X, state.window_y, state.solution)
        if t % 20 == 0:
            ref, _ = highs_qr(state.window_X, state.window_y, tau)
            assert state.solution.objective == pytest.approx(ref, rel=1e-8)
    assert state.n_fallbacks == 0


def test_expanding_window(rng):
    X, y = design(rng, 80, 2), rng.normal(size=80)
    state = init_state(X[:20], y[:20], 0.3, None)
    for t in range(20, 80):
        update(state, X[t], y[t])
    assert state.window_y.size == 80
    assert state.solution.objective == pytest.approx(solve_qr_batch(X, y, 0.3).objective, rel=1e-10)


def test_window_of_identical_rows_is_singular():
    X = np.column_stack([np.ones(8), np.arange(8.0)])
    y = np.arange(8.0) * 0.5
    state = init_state(X, y, 0.5, 8)
    with pytest.raises(SingularDesignError):
        for _ in range(10):
            update(state, [1.0, 3.0], 1.0)


def test_fallback_to_batch_on_pivot_limit(rng, monkeypatch):
    real = taqr._simplex

    def limited(X, y, tau, h, signs, max_pivots):
        if max_pivots < 1000:
            raise taqr._PivotLimit(max_pivots)
        return real(X, y, tau, h, signs, max_pivots)

    X, y = design(rng, 40, 2), rng.normal(size=40)
    state = init_state(X[:20], y[:20], 0.5, 20)
    monkeypatch.setattr(taqr, "_simplex", limited)
    update(state, X[20], y[20])
    assert state.n_fallbacks == 1
    monkeypatch.setattr(taqr, "_simplex", real)
    assert state.solution.objective == pytest.approx(solve_qr_batch(X[1:21], y[1:21], 0.5).objective)


# ------------------------------------------------------------- rolling runs

def test_single_prediction(rng):
    X, y = design(rng, 30, 2), rng.normal(size=30)
    q, hist = one_step_quantile_prediction(X, y, 0.5, 20, 21)
    assert q.shape == (1,) and len(hist) == 1 and hist[0][0] == 20


def test_rolling_predictions_match_batch_oracle():
    rng = np.random.default_rng(11)
    T, W = 140, 41
    z = rng.uniform(0, 1, T)
    X = np.column_stack([np.ones(T), z])
    y = 0.3 + 1.5 * z + 0.2 * rng.normal(size=T)
    q, _ = one_step_quantile_prediction(X, y, 0.5, W, T)
    ref = rolling_batch_predictions(X, y, 0.5, W, T)
    np.testing.assert_allclose(q, ref, atol=1e-8, rtol=0)


def test_zero_target(rng):
    X = design(rng, 50, 3)
    q, _ = one_step_quantile_prediction(X, np.zeros(50), 0.3, 20, 50)
    np.testing.assert_allclose(q, 0.0, atol=1e-12)


def test_bad_bounds(rng):
    X, y = design(rng, 30, 2), rng.normal(size=30)
    with pytest.raises(ArityError):
        one_step_quantile_prediction(X, y, 0.5, 20, 20)
    with pytest.raises(ArityError):
        one_step_quantile_prediction(X, y, 0.5, 2, 10)
    with pytest.raises(ArityError):
        one_step_quantile_prediction(X, y, 0.5, 20, 31)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(25, 45))
def test_no_leakage(seed, cut):
    rng = np.random.default_rng(seed)
    T, n_init = 50, 20
    X, y = design(rng, T, 2), rng.normal(size=T)
    q1, _ = one_step_quantile_prediction(X, y, 0.4, n_init, T)
    y2 = y.copy()
    y2[cut:] = rng.permutation(y2[cut:]) + rng.normal(size=T - cut)
    q2, _ = one_step_quantile_prediction(X, y2, 0.4, n_init, T)
    j = cut - n_init  # q index of row `cut`, the first row whose target changed
    np.testing.assert_array_equal(q1[: j + 1], q2[: j + 1])


def test_missing_rows_are_skipped(rng):
    X, y = design(rng, 40, 2), rng.normal(size=40)
    X[25, 1] = np.nan
    y[30] = np.nan
    q, hist = one_step_quantile_prediction(X, y, 0.5, 20, 40)
    assert np.isnan(q[5]) and np.isfinite(q[10])
    assert [t for t, _ in hist] == [t for t in range(20, 40) if t != 25]


def test_run_taqr_singleton_reduction(rng):
    X, y = design(rng, 60, 2), rng.normal(size=60)
    qf, y_test, betas = run_taqr(X, y, [0.5], 20, 60)
    q, hist = one_step_quantile_prediction(X, y, 0.5, 20, 60)
    np.testing.assert_array_equal(qf.values[:, 0], q)
    np.testing.assert_array_equal(y_test, y[20:60])
    assert list(betas) == [0.5]


def test_run_taqr_rows_non_decreasing(rng):
    X = design(rng, 150, 3)
    y = X @ np.array([0.2, 1.0, -1.0]) + rng.normal(size=150)
    qf, _, _ = run_taqr(X, y, QuantileLevels((0.05, 0.5, 0.95)), 25, 150)
    assert qf.crossing_count() == 0
    assert np.all(np.diff(qf.values, axis=1) >= 0)


def test_run_taqr_exact_fit(rng):
    X = design(rng, 60, 3)
    b = np.array([1.0, -0.5, 2.0])
    qf, _, _ = run_taqr(X, X @ b, QuantileLevels((0.1, 0.5, 0.9)), 20, 60)
    for j in range(3):
        np.testing.assert_allclose(qf.values[:, j], X[20:] @ b, atol=1e-9)


def test_run_taqr_names_failing_tau():
    X = np.column_stack([np.ones(30), np.ones(30)])
    with pytest.raises(SingularDesignError, match="tau=0.1"):
        run_taqr(X, np.arange(30.0), [0.1, 0.5], 10, 30)


def test_beta_history_csv(tmp_path, rng):
    X, y = design(rng, 40, 3), rng.normal(size=40)
    _, _, betas = run_taqr(X, y, [0.25, 0.75], 20, 40)
    p = write_beta_history(tmp_path / "b.csv", betas)
    assert p.read_text().splitlines()[0] == "t,tau,beta_0,beta_1,beta_2"
    back = read_beta_history(p)
    for tau in (0.25, 0.75):
        assert [t for t, _ in back[tau]] == [t for t, _ in betas[tau]]
        for (_, a), (_, b) in zip(back[tau], betas[tau]):
            np.testing.assert_array_equal(a, b)


def test_state_type():
    state = init_state(ones(6), np.arange(6.0), 0.5, 6)
    assert isinstance(state, TaqrState)
    assert state.t_current == 5
    update(state, [1.0], 3.0)
    assert state.t_current == 6 and state.n_updates == 1
