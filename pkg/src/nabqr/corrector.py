"""Recurrent ensemble corrector trained on a joint multi-quantile loss.

A single LSTM layer reads the last ``timesteps`` rows of sorted ensemble
members and a linear head emits one value per quantile level. All quantiles
share the network and are fitted together. Forward and backward passes are
written out by hand in numpy.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import EnsembleMatrix, ObservationSeries, QuantileLevels
from .errors import ArityError, SchemaError, TrainingError, ValidationError
from .scoring import pinball

log = logging.getLogger(__name__)

PARAM_NAMES = ("W", "b", "V", "c")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -------------------------------------------------------------------- losses

def multiquantile_pinball_loss(pred, y, taus) -> float:
    """Exact pinball loss averaged over all (sample, quantile) pairs."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    taus = np.asarray(taus.taus if isinstance(taus, QuantileLevels) else taus, dtype=np.float64)
    if pred.ndim != 2 or pred.shape != (y.size, taus.size):
        raise ArityError(f"pred shape {pred.shape} does not match N={y.size}, Q={taus.size}")
    return float(np.mean(pinball(y[:, None], pred, taus[None, :])))


def smoothed_pinball(pred, y, taus, delta: float = 1e-3):
    """Huberized multi-quantile pinball: (mean loss, d loss / d pred).

    Quadratic on |u| <= delta, linear beyond, with the pinball asymmetry
    weights; it matches the exact loss up to delta / 2 everywhere.
    """
    u = y[:, None] - pred
    a = np.abs(u)
    w = np.where(u >= 0, taus[None, :], 1.0 - taus[None, :])
    inner = a <= delta
    hub = np.where(inner, u * u / (2.0 * delta), a - 0.5 * delta)
    dhub = np.where(inner, u / delta, np.sign(u))
    n = u.size
    return float(np.sum(w * hub) / n), -(w * dhub) / n


# ------------------------------------------------------------------- windows

@dataclass
class TrainingWindowSet:
    inputs: np.ndarray  # N x L x F
    targets: np.ndarray  # N
    target_index: np.ndarray  # row of the source series each window predicts
    split_index: int
    timestamps: np.ndarray
    valid: np.ndarray  # finite inputs and target

    def __len__(self):
        return self.targets.size

    @property
    def train(self):
        return slice(0, self.split_index)


def _lagged(values: np.ndarray, L: int) -> np.ndarray:
    """N x L x F windows, window j covering rows j+1 .. j+L (target row j+L)."""
    T = values.shape[0]
    idx = np.arange(1, T - L + 1)[:, None] + np.arange(L)[None, :]
    return values[idx]


def build_training_windows(X: EnsembleMatrix, y: ObservationSeries | None, timesteps: int, train_frac: float = 0.7) -> TrainingWindowSet:
    """Contiguous lag windows with a chronological train/test boundary.

    Window j targets row t = j + L and uses ensemble rows t-L+1 .. t, i.e.
    only forecasts valid at or before t; observations never enter inputs.
    The first ``floor(train_frac * N)`` windows form the training region.
    """
    L = int(timesteps)
    T = len(X)
    if L < 1 or T <= L:
        raise ArityError(f"need more rows ({T}) than timesteps ({L})")
    if not 0.0 < train_frac < 1.0:
        raise ValidationError(f"train_frac must lie in (0, 1), got {train_frac}")
    if y is not None and len(y) != T:
        raise ArityError("ensemble and observation lengths differ")
    feats = np.sort(X.values, axis=1)
    inputs = _lagged(feats, L)
    target_index = np.arange(L, T)
    targets = y.values[target_index] if y is not None else np.full(target_index.size, np.nan)
    valid = np.all(np.isfinite(inputs), axis=(1, 2)) & np.isfinite(targets)
    split = int(math.floor(train_frac * target_index.size))
    return TrainingWindowSet(inputs, targets, target_index, split, X.timestamps[target_index], valid)


# --------------------------------------------------------------------- model

@dataclass
class CorrectorModel:
    params: dict
    taus: QuantileLevels
    timesteps: int
    input_width: int
    hidden: int
    x_shift: float = 0.0
    x_scale: float = 1.0
    loss_history: list = field(default_factory=list)

    @property
    def n_outputs(self) -> int:
        return len(self.taus)

    def copy(self) -> "CorrectorModel":
        return CorrectorModel({k: v.copy() for k, v in self.params.items()}, self.taus, self.timesteps,
                              self.input_width, self.hidden, self.x_shift, self.x_scale, list(self.loss_history))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def set_flat(self, vec) -> None:
        i = 0
        for k in PARAM_NAMES:
            n = self.params[k].size
            self.params[k] = np.asarray(vec[i:i + n], dtype=np.float64).reshape(self.params[k].shape).copy()
            i += n

    def to_json(self) -> dict:
        return {
            "format": "nabqr-corrector/1",
            "taus": list(self.taus.taus),
            "timesteps": self.timesteps,
            "input_width": self.input_width,
            "hidden": self.hidden,
            "x_shift": self.x_shift,
            "x_scale": self.x_scale,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
            "loss_history": self.loss_history,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CorrectorModel":
        if doc.get("format") != "nabqr-corrector/1":
            raise SchemaError("not a corrector model document")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        return cls(params, QuantileLevels(tuple(doc["taus"])), int(doc["timesteps"]), int(doc["input_width"]),
                   int(doc["hidden"]), float(doc["x_shift"]), float(doc["x_scale"]), list(doc.get("loss_history", [])))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path) -> "CorrectorModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_model(input_width: int, taus, timesteps: int, hidden: int = 32, seed: int = 0,
               x_shift: float = 0.0, x_scale: float = 1.0, head_bias=None) -> CorrectorModel:
    taus = taus if isinstance(taus, QuantileLevels) else QuantileLevels(tuple(taus))
    F, H, Q = int(input_width), int(hidden), len(taus)
    rng = np.random.default_rng(seed)
    W = rng.uniform(-1.0, 1.0, size=(F + H, 4 * H)) * math.sqrt(6.0 / (F + 5 * H))
    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0  # forget gate
    V = rng.normal(scale=1.0 / math.sqrt(H), size=(H, Q)) * 0.1
    c = np.zeros(Q) if head_bias is None else np.asarray(head_bias, dtype=np.float64).copy()
    return CorrectorModel({"W": W, "b": b, "V": V, "c": c}, taus, int(timesteps), F, H, x_shift, x_scale)


def _forward(params, x):
    """x: N x L x F (already scaled). Returns output and cache for backprop."""
    W, b, V, c = params["W"], params["b"], params["V"], params["c"]
    N, L, _ = x.shape
    H = V.shape[0]
    h = np.zeros((N, H))
    cell = np.zeros((N, H))
    cache = []
    for s in range(L):
        z = np.concatenate([x[:, s, :], h], axis=1)
        a = z @ W + b
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        o = sigmoid(a[:, 2 * H:3 * H])
        g = np.tanh(a[:, 3 * H:])
        c_prev = cell
        cell = f * c_prev + i * g
        tc = np.tanh(cell)
        h = o * tc
        cache.append((z, i, f, o, g, c_prev, tc))
    return h @ V + c, (cache, h)


def _backward(params, cache, dout):
    W, V = params["W"], params["V"]
    steps, h_last = cache
    H = V.shape[0]
    F = W.shape[0] - H
    grads = {"V": h_last.T @ dout, "c": dout.sum(axis=0), "W": np.zeros_like(W), "b": np.zeros_like(params["b"])}
    dh = dout @ V.T
    dc = np.zeros_like(dh)
    for z, i, f, o, g, c_prev, tc in reversed(steps):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
        grads["W"] += z.T @ da
        grads["b"] += da.sum(axis=0)
        dz = da @ W.T
        dh = dz[:, F:]
        dc = dc * f
    return grads


def _scaled(model: CorrectorModel, inputs):
    return (np.asarray(inputs, dtype=np.float64) - model.x_shift) / model.x_scale


def forward(model: CorrectorModel, inputs) -> np.ndarray:
    """Raw (unsorted) head outputs for N x L x F windows."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[1:] != (model.timesteps, model.input_width):
        raise ArityError(f"expected N x {model.timesteps} x {model.input_width} windows, got {inputs.shape}")
    out, _ = _forward(model.params, _scaled(model, inputs))
    return out


def loss_and_grad(model: CorrectorModel, inputs, targets, delta: float = 1e-3):
    """Smoothed multi-quantile loss and its gradient for every parameter."""
    out, cache = _forward(model.params, _scaled(model, inputs))
    loss, dout = smoothed_pinball(out, np.asarray(targets, dtype=np.float64), model.taus.array, delta)
    return loss, _backward(model.params, cache, dout)


@dataclass
class CorrectorConfig:
    hidden: int = 32
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    smoothing: float = 1e-3


def train_corrector(data: TrainingWindowSet, taus, config: CorrectorConfig | None = None) -> CorrectorModel:
    """Adam on the smoothed loss over the training region.

    The returned parameters are those with the lowest exact training loss
    seen, initialization included, so training never ends worse than it
    started. ``loss_history`` holds that exact loss after each epoch.
    """
    cfg = config or CorrectorConfig()
    taus = taus if isinstance(taus, QuantileLevels) else QuantileLevels(tuple(taus))
    sel = np.flatnonzero(data.valid[: data.split_index])
    if sel.size == 0:
        raise TrainingError("training region holds no complete windows", epoch=0)
    xs, ys = data.inputs[sel], data.targets[sel]
    shift = float(np.mean(xs))
    scale = float(np.std(xs)) or 1.0
    model = init_model(xs.shape[2], taus, xs.shape[1], cfg.hidden, cfg.seed, shift, scale,
                       head_bias=np.quantile(ys, taus.array))
    rng = np.random.default_rng(cfg.seed + 1)

    def exact_loss(m):
        return multiquantile_pinball_loss(forward(m, xs), ys, taus)

    best_loss = exact_loss(model)
    best = model.copy()
    history = [best_loss]
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = sel.size
    for epoch in range(1, cfg.epochs + 1):
        order = np.arange(n) if n <= cfg.batch_size else rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(model, xs[batch], ys[batch], cfg.smoothing)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            step += 1
            for k, g in grads.items():
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mhat = m1[k] / (1 - b1**step)
                vhat = m2[k] / (1 - b2**step)
                model.params[k] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingError(f"non-finite parameters after epoch {epoch}", epoch=epoch)
        loss = exact_loss(model)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
        history.append(loss)
        log.debug("epoch %d loss %.6g", epoch, loss)
        if loss < best_loss:
            best_loss, best = loss, model.copy()
    best.loss_history = history
    return best


def correct_ensembles(model: CorrectorModel, X: EnsembleMatrix) -> EnsembleMatrix:
    """Corrected pseudo-ensemble, one column per quantile level, rows sorted.

    Row j corresponds to source row j + timesteps. Windows touching a
    missing ensemble row yield a missing (NaN) output row.
    """
    L = model.timesteps
    if len(X) <= L:
        raise ArityError(f"need more than {L} rows to correct, got {len(X)}")
    if X.n_members != model.input_width:
        raise ArityError(f"model expects {model.input_width} members, got {X.n_members}")
    windows = _lagged(np.sort(X.values, axis=1), L)
    ok = np.all(np.isfinite(windows), axis=(1, 2))
    out = np.full((windows.shape[0], model.n_outputs), np.nan)
    if ok.any():
        out[ok] = np.sort(forward(model, windows[ok]), axis=1)
    labels = tuple(f"corr_{t:g}" for t in model.taus)
    return EnsembleMatrix(out, X.timestamps[L:], labels)


def write_loss_csv(path, history) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])
    return path
