"""Proper scores and reliability for ensemble and quantile forecasts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import EnsembleMatrix, QuantileForecastMatrix
from .errors import ArityError, ConfigurationError, ValidationError


def pinball(y, q, tau):
    """Pinball loss rho_tau(y - q); broadcasts over arrays."""
    if not (0.0 < np.min(tau) and np.max(tau) < 1.0):
        raise ValidationError(f"tau={tau} outside (0, 1)")
    u = np.asarray(y, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    out = np.where(u >= 0, tau * u, (tau - 1.0) * u)
    return float(out) if out.ndim == 0 else out


def _values(q_hat):
    return q_hat.values if isinstance(q_hat, QuantileForecastMatrix) else np.asarray(q_hat, dtype=np.float64)


def _aligned(y, values):
    y = np.asarray(y, dtype=np.float64).ravel()
    if values.ndim != 2 or values.shape[0] != y.size:
        raise ArityError(f"y has {y.size} rows, forecast has shape {values.shape}")
    if y.size == 0:
        raise ArityError("nothing to score")
    return y


def quantile_score(y, q_hat: QuantileForecastMatrix) -> float:
    """Mean pinball loss over every (time, tau) pair."""
    vals = _values(q_hat)
    y = _aligned(y, vals)
    return float(np.mean(pinball(y[:, None], vals, q_hat.taus.array[None, :])))


def mae(y, q_hat: QuantileForecastMatrix) -> float:
    try:
        med = q_hat.column(0.5)
    except ConfigurationError:
        raise ConfigurationError("MAE needs a 0.5 quantile column") from None
    y = _aligned(y, q_hat.values)
    return float(np.mean(np.abs(y - med)))


def crps_ensemble(y, ens, fair: bool = False) -> float:
    """Mean ensemble CRPS.

    Per row: mean|x_j - y| - sum_{j,k}|x_j - x_k| / (2 M^2), or with
    ``fair=True`` the second term divided by 2 M (M - 1) instead.
    Pairwise sums use the sorted-member identity, O(M log M) per row.
    """
    x = ens.values if isinstance(ens, EnsembleMatrix) else np.asarray(ens, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ArityError("ensemble must be a non-empty T x M matrix")
    y = _aligned(y, x)
    M = x.shape[1]
    term1 = np.mean(np.abs(x - y[:, None]), axis=1)
    xs = np.sort(x, axis=1)
    # sum_{j,k} |x_j - x_k| = 2 * sum_i (2i - M + 1) x_(i)
    w = 2.0 * np.arange(M) - M + 1.0
    pair_sum = 2.0 * (xs @ w)
    if fair:
        term2 = pair_sum / (2.0 * M * (M - 1)) if M > 1 else 0.0
    else:
        term2 = pair_sum / (2.0 * M * M)
    return float(np.mean(term1 - term2))


def default_max_lag(T: int) -> int:
    return min(24, T - 1)


def variogram_score(y, ens, p: float = 0.5, max_lag: int | None = None) -> float:
    """Temporal variogram score with unit weights over lags 1..max_lag."""
    x = ens.values if isinstance(ens, EnsembleMatrix) else np.asarray(ens, dtype=np.float64)
    if x.ndim != 2:
        raise ArityError("ensemble must be a T x M matrix")
    y = _aligned(y, x)
    T = y.size
    if max_lag is None:
        max_lag = default_max_lag(T)
    if p <= 0:
        raise ValidationError(f"variogram exponent must be positive, got {p}")
    if not 0 <= max_lag < T:
        raise ArityError(f"max_lag={max_lag} must be below T={T}")
    total = 0.0
    for lag in range(1, max_lag + 1):
        obs = np.abs(y[lag:] - y[:-lag]) ** p
        # residual taken inside the mean so identical members give exactly 0
        gap = np.mean(np.abs(x[lag:] - x[:-lag]) ** p - obs[:, None], axis=1)
        total += float(np.sum(gap**2))
    return total


def reliability(y, q_hat: QuantileForecastMatrix) -> np.ndarray:
    """Fraction of rows with y <= q for each tau (ties count as covered)."""
    vals = _values(q_hat)
    y = _aligned(y, vals)
    return np.mean(y[:, None] <= vals, axis=0)


@dataclass
class ScoreConfig:
    variogram_p: float = 0.5
    variogram_max_lag: int | None = None
    fair_crps: bool = False


@dataclass
class ScoreReport:
    mae: float
    qs: float
    crps: float
    vars: float
    coverage: dict = field(default_factory=dict)
    n_effective: int = 0

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "qs": self.qs,
            "crps": self.crps,
            "vars": self.vars,
            "coverage": {f"{tau:g}": c for tau, c in self.coverage.items()},
            "n_effective": self.n_effective,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        cov = {float(k): float(v) for k, v in d["coverage"].items()}
        return cls(d["mae"], d["qs"], d["crps"], d["vars"], cov, int(d["n_effective"]))

    def write_json(self, path, extra: dict | None = None) -> Path:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        path = Path(path)
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path


def calculate_scores(y, q_hat: QuantileForecastMatrix, ens, config: ScoreConfig | None = None) -> ScoreReport:
    """Score a quantile forecast (MAE, QS, coverage) and an ensemble (CRPS, VarS)."""
    cfg = config or ScoreConfig()
    y = np.asarray(y, dtype=np.float64).ravel()
    m = mae(y, q_hat)
    cov = reliability(y, q_hat)
    return ScoreReport(
        mae=m,
        qs=quantile_score(y, q_hat),
        crps=crps_ensemble(y, ens, fair=cfg.fair_crps),
        vars=variogram_score(y, ens, cfg.variogram_p, cfg.variogram_max_lag),
        coverage={tau: float(c) for tau, c in zip(q_hat.taus, cov)},
        n_effective=int(y.size),
    )
