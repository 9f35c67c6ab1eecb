"""Synthetic normalized wind power: a bounded jump-diffusion plus ensembles.

Discretization (Euler-Maruyama, step ``dt`` hours)::

    x[t+1] = clip(x[t] + theta(x) (mu - x) dt + sigma[t] g(x) sqrt(dt) Z[t] + J[t], 0, 1)
    g(x)        = sqrt(x (1 - x))
    theta(x)    = theta_base (1 + repel_strength * max(0, x - (1 - repel_zone)) / repel_zone)
    sigma[t]^2  = omega + alpha eps[t-1]^2 + beta sigma[t-1]^2,   eps = sigma Z
    J[t]        = sum of N[t] ~ Poisson(lambda dt) draws from Normal(jump_mean, jump_sd^2)

Random numbers: PCG64 bit streams spawned from ``SeedSequence(seed)``,
stream 0 for the observed path and stream m for ensemble member m. Uniform
doubles are turned into Gaussians with Box-Muller and into Poisson counts by
CDF inversion, so the whole construction depends only on documented
algorithms.

Ensemble members re-run the SDE from the same ``x0`` with their own stream.
Each member reverts to ``mu * b_m`` with ``b_m ~ Normal(1, ensemble_bias_sd^2)``
drawn once, and its Gaussian shocks are ``rho Z_obs + sqrt(1 - rho^2) Z_own``
with ``rho = ensemble_corr``; members also receive the observed path's jumps.
That keeps them informative about the truth while miscalibrated.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data_model import DEFAULT_START, EnsembleMatrix, ObservationSeries, hourly_timestamps
from .errors import ParameterError, StationarityError


@dataclass(frozen=True)
class SdeParams:
    theta_base: float = 0.1
    mu_level: float = 0.5
    garch_omega: float = 1e-4
    garch_alpha: float = 0.1
    garch_beta: float = 0.85
    jump_intensity: float = 0.02
    jump_mean: float = 0.0
    jump_sd: float = 0.15
    repel_strength: float = 4.0
    repel_zone: float = 0.1
    dt: float = 1.0
    x0: float = 0.4
    ensemble_bias_sd: float = 0.05
    ensemble_corr: float = 0.8

    def __post_init__(self):
        checks = [
            (self.garch_omega > 0, "garch_omega > 0"),
            (self.garch_alpha >= 0 and self.garch_beta >= 0, "garch_alpha, garch_beta >= 0"),
            (self.garch_alpha + self.garch_beta < 1, "garch_alpha + garch_beta < 1"),
            (self.jump_intensity >= 0, "jump_intensity >= 0"),
            (self.jump_sd >= 0, "jump_sd >= 0"),
            (self.dt > 0, "dt > 0"),
            (0.0 <= self.x0 <= 1.0, "x0 in [0, 1]"),
            (0.0 < self.mu_level < 1.0, "mu_level in (0, 1)"),
            (self.theta_base >= 0, "theta_base >= 0"),
            (self.repel_strength >= 0, "repel_strength >= 0"),
            (0.0 < self.repel_zone <= 1.0, "repel_zone in (0, 1]"),
            (self.ensemble_bias_sd >= 0, "ensemble_bias_sd >= 0"),
            (0.0 <= self.ensemble_corr <= 1.0, "ensemble_corr in [0, 1]"),
        ]
        for ok, what in checks:
            if not (ok and all(math.isfinite(getattr(self, f.name)) for f in fields(self))):
                raise ParameterError(f"invalid SDE parameters: requires {what}")

    @property
    def long_run_variance(self) -> float:
        return self.garch_omega / (1.0 - self.garch_alpha - self.garch_beta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SdeParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown simulator parameter(s): {sorted(unknown)}")
        return cls(**d)


def _streams(seed: int, n: int):
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def box_muller(u1, u2):
    """Two independent standard normals from two U[0,1) arrays."""
    rad = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
    ang = 2.0 * np.pi * u2
    return rad * np.cos(ang), rad * np.sin(ang)


def poisson_inverse(u, lam: float):
    """Poisson(lam) counts by sequential CDF inversion of uniforms ``u``."""
    u = np.asarray(u, dtype=np.float64)
    k = np.zeros(u.shape, dtype=np.int64)
    if lam <= 0:
        return k
    p = np.full(u.shape, math.exp(-lam))
    cdf = p.copy()
    active = u > cdf
    while active.any():
        k[active] += 1
        p[active] *= lam / k[active]
        cdf[active] += p[active]
        active = (u > cdf) & (p > 0)
    return k


@dataclass
class SimulationTrace:
    """Full state of a simulation; column 0 is the observed path."""

    paths: np.ndarray  # T x (M + 1)
    variance: np.ndarray  # T x (M + 1), GARCH sigma^2 used at each step
    shocks: np.ndarray  # T x (M + 1), unit Gaussian innovations Z
    jump_counts: np.ndarray  # T, observed-path Poisson counts
    biases: np.ndarray  # M member mean-level multipliers
    timestamps: np.ndarray


def simulate_trace(params: SdeParams, horizon: int, n_ensembles: int, seed: int, start: int = DEFAULT_START) -> SimulationTrace:
    T, M = int(horizon), int(n_ensembles)
    if T < 2:
        raise ParameterError(f"horizon must be at least 2, got {T}")
    if M < 0:
        raise ParameterError("n_ensembles must be non-negative")
    p = params
    rngs = _streams(seed, M + 1)

    biases = np.ones(M + 1)
    draws = np.empty((M + 1, T, 3))
    for m, rng in enumerate(rngs):
        if m > 0:
            z, _ = box_muller(*rng.random(2))
            biases[m] = 1.0 + p.ensemble_bias_sd * z
        draws[m] = rng.random((T, 3))

    z_own, z_jump = box_muller(draws[:, :, 0], draws[:, :, 1])  # (M+1) x T
    counts = poisson_inverse(draws[0, :, 2], p.jump_intensity * p.dt)
    jumps = counts * p.jump_mean + np.sqrt(counts) * p.jump_sd * z_jump[0]

    rho = p.ensemble_corr
    shocks = z_own.copy()
    shocks[1:] = rho * z_own[0] + math.sqrt(1.0 - rho * rho) * z_own[1:]

    mu = p.mu_level * biases
    band = 1.0 - p.repel_zone
    sqdt = math.sqrt(p.dt)
    x = np.full(M + 1, float(p.x0))
    h = np.full(M + 1, p.long_run_variance)
    eps_prev = np.zeros(M + 1)
    paths = np.empty((T, M + 1))
    variance = np.empty((T, M + 1))
    paths[0] = x
    for t in range(T):
        if t > 0:
            h = p.garch_omega + p.garch_alpha * eps_prev**2 + p.garch_beta * h
        variance[t] = h
        sigma = np.sqrt(h)
        eps = sigma * shocks[:, t]
        if t + 1 < T:
            theta = p.theta_base * (1.0 + p.repel_strength * np.maximum(0.0, x - band) / p.repel_zone)
            g = np.sqrt(np.maximum(x * (1.0 - x), 0.0))
            x = x + theta * (mu - x) * p.dt + eps * g * sqdt + jumps[t]
            x = np.clip(x, 0.0, 1.0)
            paths[t + 1] = x
        eps_prev = eps

    return SimulationTrace(paths, variance, shocks.T.copy(), counts, biases[1:], hourly_timestamps(T, start))


def simulate_wind_power_sde(params: SdeParams | None = None, horizon: int = 250, n_ensembles: int = 20, seed: int = 42):
    """Simulated (ensembles, observations), every value in [0, 1]."""
    params = params or SdeParams()
    if n_ensembles < 2:
        raise ParameterError(f"need at least 2 ensemble members, got {n_ensembles}")
    tr = simulate_trace(params, horizon, n_ensembles, seed)
    ens = EnsembleMatrix(tr.paths[:, 1:], tr.timestamps)
    obs = ObservationSeries(tr.timestamps, tr.paths[:, 0], regular=True)
    return ens, obs


def simulate_correlated_ar1(n_series: int, n_steps: int, phi: float, cross_corr: float, seed: int) -> np.ndarray:
    """T x M matrix of AR(1) columns with equicorrelated innovations.

    Innovation e[t, m] = sqrt(c) * common[t] + sqrt(1 - c) * own[t, m] has
    unit variance and pairwise correlation c; each column starts from its
    stationary distribution.
    """
    if not abs(phi) < 1:
        raise StationarityError(f"AR coefficient |phi| must be < 1, got {phi}")
    if not 0.0 <= cross_corr < 1.0:
        raise ParameterError(f"cross_corr must lie in [0, 1), got {cross_corr}")
    M, T = int(n_series), int(n_steps)
    if M < 1 or T < 1:
        raise ParameterError("n_series and n_steps must be positive")
    rng = _streams(seed, 1)[0]
    n = (M + 1) * T
    u = rng.random((2, (n + 1) // 2))
    z = np.concatenate(box_muller(u[0], u[1]))[:n].reshape(T, M + 1)
    innov = math.sqrt(cross_corr) * z[:, :1] + math.sqrt(1.0 - cross_corr) * z[:, 1:]
    out = np.empty((T, M))
    out[0] = innov[0] / math.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        out[t] = phi * out[t - 1] + innov[t]
    return out
