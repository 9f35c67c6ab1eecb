"""Ensemble correction followed by time-adaptive quantile regression."""
from .data_model import (
    EnsembleMatrix,
    ObservationSeries,
    QuantileForecastMatrix,
    QuantileLevels,
    clean_nans,
    load_dataset,
    save_dataset,
)
from .scoring import ScoreReport, calculate_scores, crps_ensemble, mae, pinball, quantile_score, reliability, variogram_score
from .simulator import SdeParams, simulate_correlated_ar1, simulate_wind_power_sde
from .taqr import init_state, one_step_quantile_prediction, predict, run_taqr, solve_qr_batch, update

__version__ = "0.1.0"
