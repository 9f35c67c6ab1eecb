"""Command line interface.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corrector as corr
from .config import load_config
from .data_model import (
    EnsembleMatrix,
    ObservationSeries,
    QuantileLevels,
    clean_nans,
    load_dataset,
    read_quantile_csv,
    save_dataset,
    write_quantile_csv,
)
from .errors import ArityError, ConfigurationError, NabqrError, StageError, ValidationError
from .plotting import emit_fan_chart
from .scoring import ScoreConfig, calculate_scores
from .simulator import SdeParams, simulate_wind_power_sde
from .taqr import run_taqr, write_beta_history

log = logging.getLogger("nabqr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _taus(text: str) -> QuantileLevels:
    try:
        return QuantileLevels(tuple(float(t) for t in text.split(",") if t.strip()))
    except ValueError as exc:
        raise ConfigurationError(f"bad --taus value {text!r}: {exc}") from None


def _key_values(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigurationError(f"expected KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ConfigurationError(f"parameter {key} needs a number, got {val!r}") from None
    return out


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim = cfg.simulator
    params = sim.params
    overrides = _key_values(args.param)
    if overrides:
        params = SdeParams.from_dict({**params.to_dict(), **overrides})
    horizon = args.horizon if args.horizon is not None else sim.horizon
    n_ens = args.n_ensembles if args.n_ensembles is not None else sim.n_ensembles
    ens, obs = simulate_wind_power_sde(params, horizon, n_ens, args.seed)
    save_dataset(args.out, ens, obs)
    print(f"wrote {horizon} rows x {n_ens} members to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    taus = _taus(args.taus) if args.taus else cfg.taus
    timesteps = args.timesteps or cfg.timesteps
    train_frac = args.train_frac or cfg.train_frac
    ens, obs = load_dataset(args.data)
    yv = np.where(obs.missing_mask | ens.missing_mask, np.nan, obs.values)
    ws = corr.build_training_windows(ens, ObservationSeries(obs.timestamps, yv), timesteps, train_frac)
    c = cfg.corrector
    config = corr.CorrectorConfig(
        hidden=args.hidden or c.hidden,
        epochs=args.epochs if args.epochs is not None else c.epochs,
        learning_rate=args.learning_rate or c.learning_rate,
        batch_size=c.batch_size,
        seed=args.seed if args.seed is not None else cfg.seed,
        smoothing=c.smoothing,
    )
    model = corr.train_corrector(ws, taus, config)
    model.save(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_name(Path(args.out).stem + "_loss.csv")
    corr.write_loss_csv(loss_csv, model.loss_history)
    if args.corrected:
        corrected = corr.correct_ensembles(model, ens)
        save_dataset(args.corrected, corrected, ObservationSeries(corrected.timestamps, obs.values[timesteps:]))
    print(f"trained on {ws.split_index} windows; loss {model.loss_history[0]:.6g} -> {min(model.loss_history):.6g}")
    return 0


def cmd_taqr(args) -> int:
    ens, obs = load_dataset(args.data)
    taus = _taus(args.taus) if args.taus else load_config(None).taus
    X = ens.values
    if not args.no_intercept:
        X = np.column_stack([np.ones(len(ens)), X])
    X = np.where(ens.missing_mask[:, None], np.nan, X)
    y = np.where(obs.missing_mask, np.nan, obs.values)
    n_full = args.n_full if args.n_full is not None else len(obs)
    if args.window == "sliding":
        window = args.n_init
    elif args.window == "expanding":
        window = None
    else:
        try:
            window = int(args.window)
        except ValueError:
            raise ConfigurationError(f"--window must be sliding, expanding or an integer, got {args.window!r}") from None
    q_hat, _, betas = run_taqr(X, y, taus, args.n_init, n_full, obs.timestamps, window)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_quantile_csv(out / "q_hat.csv", q_hat, args.precision)
    for tau, hist in betas.items():
        write_beta_history(out / f"beta_tau_{tau:.{args.precision}f}.csv", {tau: hist})
    print(f"wrote {len(q_hat)} forecasts for {len(taus)} quantile levels to {out}")
    return 0


def _aligned_inputs(data_path, qhat_path):
    ens, obs = load_dataset(data_path)
    q_hat = read_quantile_csv(qhat_path)
    pos = np.searchsorted(obs.timestamps, q_hat.timestamps)
    if np.any(pos >= len(obs)) or not np.array_equal(obs.timestamps[np.minimum(pos, len(obs) - 1)], q_hat.timestamps):
        raise ArityError("q_hat timestamps are not all present in the data file")
    return ens.take(pos), obs.take(pos), q_hat


def cmd_score(args) -> int:
    ens, obs, q_hat = _aligned_inputs(args.data, args.q_hat)
    obs_c, q_c, dropped = clean_nans(obs, q_hat)
    if args.qhat_ensemble:
        ens_c = EnsembleMatrix(q_c.values, q_c.timestamps)
    else:
        ens_c = ens.take(np.isin(ens.timestamps, q_c.timestamps))
        if ens_c.missing_mask.any():
            raise ValidationError("ensemble has missing rows inside the scored period")
    cfg = load_config(args.config).scoring if args.config else ScoreConfig()
    report = calculate_scores(obs_c.values, q_c, ens_c, cfg)
    if args.out:
        report.write_json(args.out)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import run_nabqr_pipeline

    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    result = run_nabqr_pipeline(cfg)
    s, b = result.scores, result.baseline
    print(f"MAE {s.mae:.6g} (raw {b.mae:.6g})  QS {s.qs:.6g} (raw {b.qs:.6g})  CRPS {s.crps:.6g}  VarS {s.vars:.6g}")
    print(f"artifacts in {cfg.output_dir}")
    return 0


def cmd_plot(args) -> int:
    _, obs, q_hat = _aligned_inputs(args.data, args.q_hat)
    path = emit_fan_chart(obs, q_hat, args.out, title=args.title)
    print(f"wrote {path} and {path.with_suffix('.csv')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nabqr", description="Ensemble correction and time-adaptive quantile regression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate observations and ensembles to CSV")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--n-ensembles", type=int)
    s.add_argument("--config")
    s.add_argument("--param", action="append", metavar="KEY=VALUE", help="override an SDE parameter")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the ensemble corrector")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="model JSON path")
    s.add_argument("--loss-csv")
    s.add_argument("--corrected", help="also write corrected ensembles to this CSV")
    s.add_argument("--config")
    s.add_argument("--taus")
    s.add_argument("--timesteps", type=int)
    s.add_argument("--train-frac", type=float)
    s.add_argument("--hidden", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("taqr", help="run TAQR with the ensemble columns as regressors")
    s.add_argument("--data", required=True)
    s.add_argument("--n-init", type=int, required=True)
    s.add_argument("--n-full", type=int)
    s.add_argument("--taus")
    s.add_argument("--window", default="sliding")
    s.add_argument("--no-intercept", action="store_true")
    s.add_argument("--precision", type=int, default=2)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_taqr)

    s = sub.add_parser("score", help="score a q_hat CSV against a data CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--q-hat", required=True)
    s.add_argument("--out")
    s.add_argument("--config")
    s.add_argument("--qhat-ensemble", action="store_true", help="score the quantiles as the ensemble for CRPS/VarS")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("pipeline", help="run the full pipeline")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("plot", help="fan chart SVG from a data CSV and q_hat CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--q-hat", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--title")
    s.set_defaults(func=cmd_plot)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, ValidationError) else 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NabqrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(cli_main(argv))


if __name__ == "__main__":
    main()
