"""End-to-end run: data -> corrector -> TAQR -> scores -> files."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corrector as corr
from .config import PipelineConfig
from .data_model import (
    EnsembleMatrix,
    ObservationSeries,
    QuantileForecastMatrix,
    clean_nans,
    load_dataset,
    save_dataset,
    write_quantile_csv,
)
from .errors import StageError
from .plotting import emit_fan_chart
from .scoring import ScoreReport, calculate_scores
from .simulator import simulate_wind_power_sde
from .taqr import run_taqr, write_beta_history

log = logging.getLogger(__name__)

STAGES = ("load_data", "train_corrector", "correct_ensembles", "run_taqr", "clean_nans", "score", "write_outputs")
FAILED_MARKER = ".failed"


@dataclass
class PipelineResult:
    scores: ScoreReport
    baseline: ScoreReport
    corrected: EnsembleMatrix
    q_hat: QuantileForecastMatrix
    y_test: ObservationSeries
    beta: dict
    stage_log: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)


def raw_quantiles(ens: EnsembleMatrix, taus) -> QuantileForecastMatrix:
    """Empirical member quantiles (linear interpolation) as a quantile forecast."""
    vals = np.quantile(ens.values, taus.array, axis=1).T
    return QuantileForecastMatrix(vals, taus, ens.timestamps)


def default_n_init(n_region: int) -> int:
    return min(200, int(0.25 * n_region))


def _ratio(a, b):
    return a / b if b > 0 else math.nan


def run_nabqr_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run every stage in order; on failure leave a ``.failed`` marker and raise StageError."""
    cfg = config.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / FAILED_MARKER
    if marker.exists():
        marker.unlink()
    stage_log: list = []
    artifacts: list = []
    ctx: dict = {}

    def stage(name, fn):
        try:
            info = fn() or {}
        except Exception as exc:
            marker.write_text(json.dumps({"stage": name, "error": f"{type(exc).__name__}: {exc}"}) + "\n")
            (out / "stage_log.json").write_text(json.dumps(stage_log, indent=2) + "\n")
            raise StageError(name, exc) from exc
        stage_log.append({"stage": name, **info})
        log.info("stage %s done %s", name, info)

    def load_data():
        if cfg.data_source == "simulate":
            sim = cfg.simulator
            ens, obs = simulate_wind_power_sde(sim.params, sim.horizon, sim.n_ensembles, cfg.seed)
            source = "simulate"
        else:
            ens, obs = load_dataset(cfg.data_source)
            source = str(cfg.data_source)
        ctx.update(ens=ens, obs=obs)
        return {"source": source, "rows": len(obs), "members": ens.n_members}

    def train():
        ens, obs = ctx["ens"], ctx["obs"]
        # ensemble holes make the whole row unusable
        yv = np.where(obs.missing_mask | ens.missing_mask, np.nan, obs.values)
        obs_masked = ObservationSeries(obs.timestamps, yv)
        ws = corr.build_training_windows(ens, obs_masked, cfg.timesteps, cfg.train_frac)
        model = corr.train_corrector(ws, cfg.taus, replace(cfg.corrector, seed=cfg.seed))
        ctx.update(windows=ws, model=model, y_masked=yv)
        last = int(ws.target_index[ws.split_index - 1]) if ws.split_index else -1
        return {"train_rows": [int(ws.target_index[0]) - cfg.timesteps + 1, last],
                "train_windows": int(ws.split_index), "epochs": len(model.loss_history) - 1,
                "initial_loss": model.loss_history[0], "best_loss": min(model.loss_history)}

    def correct():
        corrected = corr.correct_ensembles(ctx["model"], ctx["ens"])
        ctx["corrected"] = corrected
        violations = int(np.sum(np.diff(corrected.values, axis=1) < 0))
        return {"rows": len(corrected), "columns": corrected.n_members, "crossings": violations}

    def taqr():
        ws, corrected = ctx["windows"], ctx["corrected"]
        s = ws.split_index
        region = slice(s, len(ws))
        X = np.column_stack([np.ones(len(ws) - s), corrected.values[region]])
        y = ctx["y_masked"][ws.target_index[region]]
        n_region = y.size
        n_init = cfg.n_init if cfg.n_init is not None else default_n_init(n_region)
        n_full = cfg.n_full if cfg.n_full is not None else n_region
        window = n_init if cfg.window == "sliding" else None
        q_hat, y_test, betas = run_taqr(X, y, cfg.taus, n_init, n_full, corrected.timestamps[region], window)
        ctx.update(q_hat=q_hat, y_test=y_test, betas=betas,
                   eval_rows=ws.target_index[region][n_init:n_full])
        first = int(ws.target_index[s])
        return {"region_start_row": first, "init_rows": [first, first + n_init - 1],
                "eval_rows": [first + n_init, first + n_full - 1], "n_init": n_init,
                "window": window if window is not None else "expanding", "crossings": q_hat.crossing_count()}

    def clean():
        q_hat = ctx["q_hat"]
        obs = ObservationSeries(q_hat.timestamps, ctx["y_test"])
        obs_c, q_c, dropped = clean_nans(obs, q_hat)
        keep = np.isin(q_hat.timestamps, q_c.timestamps)
        ctx.update(obs_c=obs_c, q_c=q_c, raw_rows=ctx["eval_rows"][keep])
        return {"dropped": dropped, "remaining": len(obs_c)}

    def score():
        obs_c, q_c = ctx["obs_c"], ctx["q_c"]
        y = obs_c.values
        as_ens = EnsembleMatrix(q_c.values, q_c.timestamps)
        report = calculate_scores(y, q_c, as_ens, cfg.scoring)
        raw = ctx["ens"].take(ctx["raw_rows"])
        baseline = calculate_scores(y, raw_quantiles(raw, cfg.taus), raw, cfg.scoring)
        ctx.update(report=report, baseline=baseline)
        return {"mae": report.mae, "qs": report.qs, "baseline_mae": baseline.mae, "baseline_qs": baseline.qs}

    def write():
        prec = cfg.tau_precision
        corrected = ctx["corrected"]
        y_corr = ObservationSeries(corrected.timestamps, ctx["obs"].values[cfg.timesteps:])
        artifacts.append(save_dataset(out / "corrected_ensembles.csv", corrected, y_corr))
        artifacts.append(write_quantile_csv(out / "q_hat.csv", ctx["q_hat"], prec))
        for tau, hist in ctx["betas"].items():
            artifacts.append(write_beta_history(out / f"beta_tau_{tau:.{prec}f}.csv", {tau: hist}))
        report, baseline = ctx["report"], ctx["baseline"]
        extra = {
            "baseline": baseline.to_dict(),
            "ratio": {"mae": _ratio(report.mae, baseline.mae), "qs": _ratio(report.qs, baseline.qs)},
        }
        artifacts.append(report.write_json(out / "scores.json", extra))
        chart = emit_fan_chart(ctx["obs_c"], ctx["q_c"], out / "fan_chart.svg")
        artifacts.extend([chart, chart.with_suffix(".csv")])
        return {"files": len(artifacts)}

    for name, fn in zip(STAGES, (load_data, train, correct, taqr, clean, score, write)):
        stage(name, fn)

    log_path = out / "stage_log.json"
    log_path.write_text(json.dumps(stage_log, indent=2) + "\n")
    artifacts.append(log_path)

    return PipelineResult(
        scores=ctx["report"],
        baseline=ctx["baseline"],
        corrected=ctx["corrected"],
        q_hat=ctx["q_hat"],
        y_test=ObservationSeries(ctx["q_hat"].timestamps, ctx["y_test"]),
        beta=ctx["betas"],
        stage_log=stage_log,
        artifacts=[Path(p) for p in artifacts],
    )

