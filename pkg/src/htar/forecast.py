"""Rolling one-step-ahead forecast evaluation.

The model is fully fit on the initial training window, then warm-refit on
each expanding window before forecasting the next observation.  Error
totals are sums over all test entries (squared and absolute), so they grow
with both the test length and the tensor size.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from htar.als import FitConfig, fit_als
from htar.model import predict
from htar.tensor import DenseTensor, TensorSeries

__all__ = ["ForecastReport", "rolling_forecast"]


@dataclass
class ForecastReport:
    """Per-step forecasts and error totals over the test window."""

    split: int
    msfe: float
    mafe: float
    squared_errors: list = field(default_factory=list)
    absolute_errors: list = field(default_factory=list)
    predictions: np.ndarray | None = None


def rolling_forecast(
    series: TensorSeries,
    split: int,
    y_structure,
    x_structure,
    lag: int = 1,
    config: FitConfig | None = None,
    refit_sweeps: int = 5,
) -> ForecastReport:
    """Expanding-window one-step forecasts for test indices split..T-1.

    The first fit uses ``config`` as given; subsequent windows warm-start
    from the previous model with ``refit_sweeps`` sweeps.  MSFE and MAFE are
    sums of squared and absolute errors over every test entry.
    """
    config = config or FitConfig()
    if split < lag + 10:
        raise ValueError(
            f"split {split} leaves fewer than lag + 10 = {lag + 10} training points"
        )
    if split >= len(series):
        raise ValueError(f"split {split} leaves no test points in T = {len(series)}")

    train = TensorSeries(series.dims, series.values[:split])
    model, _ = fit_als(train, y_structure, x_structure, lag=lag, config=config)

    sq, ab = [], []
    preds = np.empty((len(series) - split, series.values.shape[1]))
    for step, t in enumerate(range(split, len(series))):
        history = [
            DenseTensor(series.values[t - l], series.dims) for l in range(1, lag + 1)
        ]
        forecast = predict(model, history)
        err = series.values[t] - forecast.data
        preds[step] = forecast.data
        sq.append(float(np.sum(err**2)))
        ab.append(float(np.sum(np.abs(err))))
        if t + 1 < len(series):
            window = TensorSeries(series.dims, series.values[: t + 1])
            warm_cfg = replace(
                config,
                init=model,
                restarts=1,
                max_sweeps=refit_sweeps,
                seed=config.seed + step + 1,
            )
            model, _ = fit_als(window, y_structure, x_structure, lag=lag, config=warm_cfg)
    return ForecastReport(
        split=split,
        msfe=float(sum(sq)),
        mafe=float(sum(ab)),
        squared_errors=sq,
        absolute_errors=ab,
        predictions=preds,
    )
