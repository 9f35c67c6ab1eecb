"""Time-adaptive quantile regression on a sliding window.

Quantile regression is the linear program

    min  sum_i tau * u_i + (1 - tau) * v_i   s.t.  y = X beta + u - v,  u, v >= 0.

Every vertex of that LP interpolates exactly K observations (the basis
``h``), so the solver works on ``h`` directly instead of a full tableau:
``beta = X[h]^{-1} y[h]`` and every other row contributes either its ``u``
or its ``v`` slack. Any such vertex is primal feasible, so only the
optimality phase is needed, which is what makes warm-started updates cheap
when a row is appended to (or dropped from) the window.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .data_model import QuantileForecastMatrix, QuantileLevels, hourly_timestamps
from .errors import ArityError, NabqrError, SingularDesignError, UnderdeterminedError

log = logging.getLogger(__name__)

REDUCED_COST_TOL = 1e-10
ZERO_RESID_RTOL = 1e-9
PIVOT_TOL = 1e-11
RANK_RTOL = 1e-10


def pinball_sum(residuals, tau: float) -> float:
    r = np.asarray(residuals, dtype=np.float64)
    return float(np.sum(np.where(r >= 0, tau * r, (tau - 1.0) * r)))


@dataclass
class QrSolution:
    beta: np.ndarray
    basis_h: tuple
    objective: float
    tau: float
    pivots: int = 0


class _PivotLimit(Exception):
    pass


def _zero_mask(r, y):
    return np.abs(r) <= ZERO_RESID_RTOL * (1.0 + np.abs(y))


def _simplex(X, y, tau, h, signs, max_pivots):
    """Pivot from basis ``h`` to an optimal vertex.

    ``signs[i]`` says which slack is basic for a non-basis row (+1: u, -1: v);
    it only matters for rows sitting at a zero residual. Steps follow the
    ray until the directional derivative turns non-negative, crossing
    several breakpoints at once. If a (basis, degenerate-sign) configuration
    repeats, the remaining pivots use strict Bland's rule, which cannot cycle.
    """
    n, K = X.shape
    h = list(h)
    signs = signs.copy()
    seen = set()
    bland = False
    pivots = 0
    in_h = np.zeros(n, dtype=bool)
    while True:
        in_h[:] = False
        in_h[h] = True
        Xh = X[h]
        try:
            lu = linalg.lu_factor(Xh, check_finite=False)
        except (ValueError, linalg.LinAlgError) as exc:  # pragma: no cover - guarded by pivot tolerance
            raise SingularDesignError(f"basis matrix singular: {exc}") from exc
        beta = linalg.lu_solve(lu, y[h], check_finite=False)
        r = y - X @ beta
        r[in_h] = 0.0
        zero = _zero_mask(r, y) | in_h
        r[zero] = 0.0
        signs[~zero] = np.where(r[~zero] > 0, 1, -1)

        # C[i, k] = x_i' X_h^{-1} e_k
        C = linalg.lu_solve(lu, X.T, trans=1, check_finite=False).T
        nb = ~in_h
        psi = np.where(signs > 0, tau, tau - 1.0)
        a = psi[nb] @ C[nb]
        cost = np.stack([(1.0 - tau) - a, tau + a], axis=1)  # columns: s=+1, s=-1

        neg = cost < -REDUCED_COST_TOL
        if not neg.any():
            return h, signs, beta, r, pivots
        if pivots >= max_pivots:
            raise _PivotLimit(pivots)

        key = (tuple(sorted(h)), tuple(np.flatnonzero(zero & nb & (signs > 0))))
        if key in seen:
            bland = True
        seen.add(key)

        if bland:
            cands = [(h[k], col, k) for k, col in zip(*np.nonzero(neg))]
            _, col, k = min(cands)
        else:
            k, col = np.unravel_index(np.argmin(cost), cost.shape)
        s = 1.0 if col == 0 else -1.0
        slope = cost[k, col]

        d = -s * C[:, k]
        dmax = np.max(np.abs(d[nb])) if nb.any() else 0.0
        cand = nb & (signs * d < 0) & (np.abs(d) > PIVOT_TOL * max(dmax, 1.0))
        idx = np.flatnonzero(cand)
        if idx.size == 0:
            raise SingularDesignError("quantile regression LP unbounded; design is numerically rank-deficient")
        t = np.maximum(-r[idx] / d[idx], 0.0)
        order = np.lexsort((idx, t))
        idx, t = idx[order], t[order]
        if bland:
            j = 0
        else:
            after = slope + np.cumsum(np.abs(d[idx]))
            hit = np.flatnonzero(after >= -REDUCED_COST_TOL)
            if hit.size == 0:
                raise SingularDesignError("quantile regression LP unbounded; design is numerically rank-deficient")
            j = int(hit[0])
        entering = int(idx[j])
        crossed = idx[:j]
        signs[crossed] = -signs[crossed]
        signs[h[k]] = -1 if s > 0 else 1
        h[k] = entering
        pivots += 1


def _initial_basis(X):
    n, K = X.shape
    _, R, P = linalg.qr(X.T, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(R))
    if diag.size < K or diag[K - 1] <= RANK_RTOL * max(diag[0], 1e-300) * max(n, K):
        raise SingularDesignError(f"design matrix has rank < {K}")
    return [int(i) for i in P[:K]]


def _validate(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ArityError(f"X {X.shape} and y {y.shape} are not aligned")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ArityError("X and y must be finite")
    return X, y


def solve_qr_batch(X, y, tau: float, max_pivots: int | None = None) -> QrSolution:
    """Exact LP minimizer of sum_i rho_tau(y_i - x_i' beta).

    Raises UnderdeterminedError when T <= K and SingularDesignError when X
    lacks full column rank.
    """
    X, y = _validate(X, y)
    n, K = X.shape
    if not 0.0 < tau < 1.0:
        raise ArityError(f"tau={tau} outside (0, 1)")
    if n <= K:
        raise UnderdeterminedError(f"need more rows than columns, got {n} x {K}")
    h = _initial_basis(X)
    signs = np.ones(n, dtype=np.int8)
    limit = max_pivots if max_pivots is not None else 50 * n + 100
    try:
        h, signs, beta, r, pivots = _simplex(X, y, tau, h, signs, limit)
    except _PivotLimit:
        raise NabqrError(f"simplex did not converge within {limit} pivots") from None
    return QrSolution(beta, tuple(h), pinball_sum(r, tau), tau, pivots)


def check_optimality_bounds(X, y, sol: QrSolution) -> bool:
    """Sign-count conditions a QR optimum satisfies when X has an intercept.

    N- <= n*tau <= n - N+  (and equivalently for the upper tail); zero
    residuals are counted in neither group.
    """
    X, y = _validate(X, y)
    r = y - X @ sol.beta
    zero = _zero_mask(r, y)
    n = y.size
    n_neg = int(np.sum((r < 0) & ~zero))
    n_pos = int(np.sum((r > 0) & ~zero))
    eps = 1e-9
    return n_neg <= n * sol.tau + eps and n * sol.tau <= n - n_pos + eps


# ------------------------------------------------------------------ adaptive

@dataclass
class TaqrState:
    window_X: np.ndarray
    window_y: np.ndarray
    solution: QrSolution
    tau: float
    t_current: int
    window: int | None
    signs: np.ndarray = field(repr=False)
    beta_history: list = field(default_factory=list)
    last_pivots: int = 0
    n_updates: int = 0
    n_fallbacks: int = 0

    @property
    def beta(self) -> np.ndarray:
        return self.solution.beta


def init_state(X_init, y_init, tau: float, window: int | None = None, t_offset: int | None = None) -> TaqrState:
    """Solve the warm-up block and wrap it as adaptive state.

    ``window=None`` selects expanding-window mode; otherwise ``window`` must
    be at least the warm-up length.
    """
    X_init, y_init = _validate(X_init, y_init)
    n, K = X_init.shape
    if n <= K:
        raise UnderdeterminedError(f"warm-up block has {n} rows for {K} columns")
    if window is not None and window < n:
        raise ArityError(f"window {window} shorter than warm-up length {n}")
    sol = solve_qr_batch(X_init, y_init, tau)
    r = y_init - X_init @ sol.beta
    signs = np.where(r >= 0, 1, -1).astype(np.int8)
    t_cur = n - 1 if t_offset is None else t_offset
    return TaqrState(X_init.copy(), y_init.copy(), sol, tau, t_cur, window, signs)


def predict(state: TaqrState, x_next) -> float:
    x = np.asarray(x_next, dtype=np.float64).ravel()
    if x.shape != state.solution.beta.shape:
        raise ArityError(f"x has length {x.size}, model has {state.solution.beta.size} coefficients")
    return float(x @ state.solution.beta)


def update(state: TaqrState, x_new, y_new: float) -> TaqrState:
    """Assimilate one observation, dropping the oldest row once the window is full.

    Mutates and returns ``state``. Falls back to a cold batch solve (and
    counts it in ``n_fallbacks``) when the warm-started pivots exceed
    2 * window.
    """
    x = np.asarray(x_new, dtype=np.float64).ravel()
    K = state.solution.beta.size
    if x.size != K:
        raise ArityError(f"x has length {x.size}, expected {K}")
    if not (np.all(np.isfinite(x)) and np.isfinite(y_new)):
        raise ArityError("update requires a finite row and target")

    X = np.vstack([state.window_X, x])
    y = np.append(state.window_y, float(y_new))
    h = list(state.solution.basis_h)
    r_new = float(y_new) - float(x @ state.solution.beta)
    signs = np.append(state.signs, np.int8(1 if r_new >= 0 else -1))

    if state.window is not None and y.size > state.window:
        if 0 in h:
            # swap the outgoing basis row for the row that keeps X[h] best conditioned
            k = h.index(0)
            C = linalg.solve(X[h].T, X.T, check_finite=False).T
            score = np.abs(C[:, k])
            score[h] = 0.0
            score[0] = 0.0
            j = int(np.argmax(score))
            if score[j] <= 1e-9 * max(1.0, np.max(np.abs(C))):
                raise SingularDesignError("sliding window lost full column rank")
            h[k] = j
        X, y, signs = X[1:], y[1:], signs[1:]
        h = [i - 1 for i in h]

    limit = 2 * (state.window if state.window is not None else y.size)
    try:
        h, signs, beta, r, pivots = _simplex(X, y, state.tau, h, signs, limit)
        sol = QrSolution(beta, tuple(h), pinball_sum(r, state.tau), state.tau, pivots)
    except _PivotLimit:
        log.warning("tau=%g t=%d: pivot limit hit, falling back to batch solve", state.tau, state.t_current + 1)
        sol = solve_qr_batch(X, y, state.tau)
        r = y - X @ sol.beta
        signs = np.where(r >= 0, 1, -1).astype(np.int8)
        pivots = limit
        state.n_fallbacks += 1

    state.window_X, state.window_y, state.signs = X, y, signs
    state.solution = sol
    state.last_pivots = pivots
    state.t_current += 1
    state.n_updates += 1
    return state


def one_step_quantile_prediction(X, y, tau: float, n_init: int, n_full: int, window: int | None = -1):
    """Roll TAQR from ``n_init`` to ``n_full`` for one quantile level.

    Row t is predicted with the coefficients fitted on rows < t, then
    assimilated. Rows with a non-finite design produce NaN and are skipped;
    rows with a missing target are predicted but not assimilated.
    ``window=-1`` (default) uses a sliding window of ``n_init`` rows,
    ``window=None`` an expanding window.

    Returns ``(q_hat, beta_history)`` with ``beta_history`` a list of
    ``(t, beta)`` pairs, beta being the coefficients used to predict row t.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    T, K = X.shape
    if y.shape != (T,):
        raise ArityError(f"X has {T} rows, y has {y.size}")
    if not K < n_init < n_full <= T:
        raise ArityError(f"need K < n_init < n_full <= T, got K={K}, n_init={n_init}, n_full={n_full}, T={T}")
    if window == -1:
        window = n_init

    state = init_state(X[:n_init], y[:n_init], tau, window)
    q_hat = np.full(n_full - n_init, np.nan)
    history = []
    for t in range(n_init, n_full):
        xt = X[t]
        if not np.all(np.isfinite(xt)):
            continue
        q_hat[t - n_init] = predict(state, xt)
        history.append((t, state.solution.beta.copy()))
        if np.isfinite(y[t]):
            update(state, xt, y[t])
    state.beta_history = history
    return q_hat, history


def run_taqr(X, y, q_list, n_init: int, n_full: int, timestamps=None, window: int | None = -1):
    """TAQR for every quantile level, rows sorted across levels afterwards.

    Returns ``(q_hat, y_test, betas)`` where ``q_hat`` is a
    QuantileForecastMatrix over rows ``n_init:n_full`` and ``betas`` maps each
    tau to its beta history.
    """
    taus = q_list if isinstance(q_list, QuantileLevels) else QuantileLevels(tuple(q_list))
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cols, betas = [], {}
    for tau in taus:
        try:
            q, hist = one_step_quantile_prediction(X, y, tau, n_init, n_full, window)
        except NabqrError as exc:
            try:
                wrapped = type(exc)(f"tau={tau}: {exc}")
            except TypeError:
                raise exc
            raise wrapped from exc
        cols.append(q)
        betas[tau] = hist
    values = np.sort(np.column_stack(cols), axis=1)
    if timestamps is None:
        timestamps = hourly_timestamps(X.shape[0])
    ts = np.asarray(timestamps)[n_init:n_full]
    return QuantileForecastMatrix(values, taus, ts), y[n_init:n_full].copy(), betas


def write_beta_history(path, betas: dict) -> Path:
    """CSV with header ``t,tau,beta_0,...``; accepts ``{tau: [(t, beta), ...]}``."""
    path = Path(path)
    K = max((len(b) for hist in betas.values() for _, b in hist), default=0)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "tau", *(f"beta_{k}" for k in range(K))])
        for tau, hist in betas.items():
            for t, b in hist:
                w.writerow([int(t), repr(float(tau)), *(repr(float(v)) for v in b)])
    return path


def read_beta_history(path) -> dict:
    out: dict = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                out.setdefault(float(row[1]), []).append((int(row[0]), np.array([float(v) for v in row[2:]])))
    return out
