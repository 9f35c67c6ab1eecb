"""Pipeline configuration: TOML (JSON accepted too) merged over packaged defaults."""
from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .corrector import CorrectorConfig
from .data_model import QuantileLevels
from .errors import ConfigurationError, ParameterError
from .scoring import ScoreConfig
from .simulator import SdeParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_DIR_ENV = "NABQR_OUTPUT_DIR"


@dataclass
class SimulatorConfig:
    horizon: int = 3000
    n_ensembles: int = 20
    params: SdeParams = field(default_factory=SdeParams)


@dataclass
class PipelineConfig:
    data_source: str = "simulate"
    output_dir: str = "nabqr_output"
    seed: int = 42
    train_frac: float = 0.7
    timesteps: int = 24
    taus: QuantileLevels = field(default_factory=QuantileLevels.grid)
    tau_precision: int = 2
    n_init: int | None = None
    n_full: int | None = None
    window: str = "sliding"
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    corrector: CorrectorConfig = field(default_factory=CorrectorConfig)
    scoring: ScoreConfig = field(default_factory=ScoreConfig)

    def validate(self) -> "PipelineConfig":
        if not isinstance(self.taus, QuantileLevels):
            self.taus = QuantileLevels(tuple(self.taus))
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigurationError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.timesteps < 1:
            raise ConfigurationError("timesteps must be positive")
        if self.n_init is not None and self.n_full is not None and self.n_init >= self.n_full:
            raise ConfigurationError(f"n_init ({self.n_init}) must be below n_full ({self.n_full})")
        if self.window not in ("sliding", "expanding"):
            raise ConfigurationError(f"window must be 'sliding' or 'expanding', got {self.window!r}")
        self.taus.index_of(0.5)  # MAE is scored on the median column
        self.taus.labels(self.tau_precision)
        if self.simulator.horizon < 2 or self.simulator.n_ensembles < 2:
            raise ConfigurationError("simulator needs horizon >= 2 and n_ensembles >= 2")
        return self


def _read(path: Path) -> dict:
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            raise ConfigurationError(f"{path}: not valid TOML ({exc})") from None


def default_config_text() -> str:
    return resources.files("nabqr").joinpath("default.toml").read_text()


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(f"[{name}] unknown key(s): {sorted(unknown)}")
    return cls(**section)


def config_from_dict(doc: dict) -> PipelineConfig:
    doc = dict(doc)
    sim = dict(doc.pop("simulator", {}))
    corr = doc.pop("corrector", {})
    score = doc.pop("scoring", {})
    horizon = sim.pop("horizon", SimulatorConfig.horizon)
    n_ens = sim.pop("n_ensembles", SimulatorConfig.n_ensembles)
    try:
        params = SdeParams.from_dict(sim)
    except (ParameterError, TypeError) as exc:
        raise ConfigurationError(f"[simulator] {exc}") from exc
    if "taus" in doc:
        doc["taus"] = QuantileLevels(tuple(doc["taus"]))
    cfg = _build(PipelineConfig, doc, "top level")
    cfg.simulator = SimulatorConfig(int(horizon), int(n_ens), params)
    cfg.corrector = _build(CorrectorConfig, corr, "corrector")
    cfg.scoring = _build(ScoreConfig, score, "scoring")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, seed: int | None = None, output_dir: str | None = None, env=None) -> PipelineConfig:
    """Packaged defaults, then the file at ``path``, then env and flag overrides."""
    env = os.environ if env is None else env
    doc = tomllib.loads(default_config_text())
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        doc = _merge(doc, _read(path))
    cfg = config_from_dict(doc)
    if env.get(OUTPUT_DIR_ENV):
        cfg.output_dir = env[OUTPUT_DIR_ENV]
    if output_dir is not None:
        cfg.output_dir = output_dir
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, **kw).validate()
