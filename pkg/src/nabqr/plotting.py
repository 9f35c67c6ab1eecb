"""Static fan charts.

Figures are built on a bare ``matplotlib.figure.Figure`` (no pyplot state)
and saved as SVG with a fixed hash salt and no date stamp, so identical
inputs give identical files.
"""
from __future__ import annotations

import csv
from datetime import datetime, timezone
from pathlib import Path

import matplotlib as mpl
import matplotlib.dates as mdates
import numpy as np
from matplotlib.figure import Figure

from .data_model import ObservationSeries, QuantileForecastMatrix, format_timestamp
from .errors import ArityError, NabqrError

BAND_CMAP = "Blues"
STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "nabqr",
    "svg.fonttype": "path",
}


def interval_pairs(taus, tol=1e-9):
    """(lower, upper) column index pairs with tau_u = 1 - tau_l, outermost first."""
    taus = list(taus)
    pairs = []
    for i, t in enumerate(taus):
        if t >= 0.5 - tol:
            break
        for j in range(len(taus) - 1, i, -1):
            if abs(taus[j] - (1.0 - t)) < tol:
                pairs.append((i, j))
                break
    return pairs


def _dates(ts):
    return [datetime.fromtimestamp(int(t), tz=timezone.utc).replace(tzinfo=None) for t in ts]


def emit_fan_chart(y: ObservationSeries, q_hat: QuantileForecastMatrix, path, companion=True,
                   title: str | None = None, timestamp: bool = False) -> Path:
    """Nested (tau, 1 - tau) bands, median line and observation dots as SVG.

    Also writes ``<path>.csv`` holding exactly the plotted values unless
    ``companion`` is false. The SVG date field is left out unless
    ``timestamp`` is set.
    """
    if len(y) != len(q_hat) or not np.array_equal(y.timestamps, q_hat.timestamps):
        raise ArityError("observations and quantile forecasts are not aligned")
    path = Path(path)
    taus = q_hat.taus.taus
    pairs = interval_pairs(taus)
    dates = _dates(q_hat.timestamps)
    vals = q_hat.values
    obs = np.where(y.missing_mask, np.nan, y.values)

    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(8, 3.2))
        ax = fig.add_subplot()
        cmap = mpl.colormaps[BAND_CMAP]
        for level, (lo, hi) in enumerate(pairs):
            shade = cmap(0.25 + 0.5 * (level + 1) / max(len(pairs), 1))
            ax.fill_between(dates, vals[:, lo], vals[:, hi], color=shade, linewidth=0, gid=f"band_{level}",
                            label=f"{taus[lo]:.0%}-{taus[hi]:.0%}" if level in (0, len(pairs) - 1) else None)
        try:
            med = q_hat.taus.index_of(0.5)
            ax.plot(dates, vals[:, med], color="navy", linewidth=1.0, label="median", gid="median")
        except NabqrError:
            med = None
        ax.plot(dates, obs, linestyle="none", marker=".", markersize=2.5, color="black", label="observed",
                gid="observed")
        locator = mdates.AutoDateLocator()
        ax.xaxis.set_major_locator(locator)
        ax.xaxis.set_major_formatter(mdates.ConciseDateFormatter(locator))
        ax.set_ylabel("value")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", fontsize=7, frameon=False, ncol=4)
        fig.tight_layout()
        meta = {"Date": datetime.now(timezone.utc).isoformat()} if timestamp else {"Date": None}
        try:
            fig.savefig(path, format="svg", metadata=meta)
        except OSError as exc:
            raise NabqrError(f"cannot write {path}: {exc}") from exc

    if companion:
        with path.with_suffix(".csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "y", *q_hat.taus.labels(max(2, _precision(taus)))])
            for t, yv, row in zip(q_hat.timestamps, obs, vals):
                w.writerow([format_timestamp(t), repr(float(yv)) if np.isfinite(yv) else "NaN",
                            *(repr(float(v)) for v in row)])
    return path


def _precision(taus):
    for p in range(2, 10):
        if len({f"{t:.{p}f}" for t in taus}) == len(taus) and all(abs(float(f"{t:.{p}f}") - t) < 1e-12 for t in taus):
            return p
    return 10
