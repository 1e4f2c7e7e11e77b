"""Reference forecasters sharing the frame-based fit/predict interface."""

from __future__ import annotations

import itertools
import logging
import warnings

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .data import HOURS_PER_WEEK
from .forecaster import (CONTEXT, HORIZON, SCALES, FrameForecaster, LSTM_FEATURES,
                         WaveletCNN, frame_split)

logger = logging.getLogger(__name__)

ARIMA_GRID = {"p": (0, 1, 2), "d": (0, 1), "q": (0, 1, 2)}
ARIMA_DEFAULT_ORDER = (2, 1, 2)


class ArimaFitError(RuntimeError):
    pass


def seasonal_naive(history, t: int, season: int = HOURS_PER_WEEK, horizon: int = HORIZON) -> np.ndarray:
    """forecast[j] = history[t + j - season]."""
    x = np.asarray(getattr(history, "values", history), dtype=float)
    if t < season or t > len(x):
        raise ValueError(f"seasonal naive needs {season} h of history before origin {t}")
    if horizon > season:
        raise ValueError("horizon longer than the season would reuse forecasts")
    return x[t - season:t - season + horizon].copy()


class SeasonalNaiveForecaster(BaseEstimator):
    name = "seasonal_naive"

    def __init__(self, season=HOURS_PER_WEEK):
        self.season = season

    def fit(self, X, y=None):
        self.n_parameters_ = 0
        return self

    def predict(self, X: pd.DataFrame, origins) -> np.ndarray:
        x = X["total"].to_numpy(float)
        return np.stack([seasonal_naive(x, int(t), self.season) for t in np.atleast_1d(origins)])


# --------------------------------------------------------------------------- ARIMA


class _MeanModel:
    """Closed-form Gaussian MLE of an ARIMA(0, d, 0) model with drift/intercept."""

    def __init__(self, x, d):
        self.d = d
        self.mu = float(np.diff(x, n=d).mean()) if d else float(np.mean(x))
        self.params = np.array([self.mu])

    def forecast_from(self, history, horizon):
        if self.d == 0:
            return np.full(horizon, self.mu)
        last = float(history[-1])
        return last + self.mu * np.arange(1, horizon + 1)


def _fit_arima(x, order):
    from statsmodels.tsa.arima.model import ARIMA

    p, d, q = order
    if p == 0 and q == 0:
        return _MeanModel(x, d)
    trend = "c" if d == 0 else "t" if d == 1 else "n"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = ARIMA(x, order=order, trend=trend).fit()
    if not res.mle_retvals.get("converged", True):
        raise ArimaFitError(f"ARIMA{order} did not converge: {res.mle_retvals}")
    return res


def arima_order_search(x, grid=ARIMA_GRID) -> tuple[tuple, dict]:
    """Lowest-AIC order over the grid; returns (order, {order: aic})."""
    scores = {}
    for p, d, q in itertools.product(grid["p"], grid["d"], grid["q"]):
        if p == 0 and q == 0:
            continue
        try:
            scores[(p, d, q)] = float(_fit_arima(x, (p, d, q)).aic)
        except Exception as exc:  # noqa: BLE001 - any failed candidate is just skipped
            logger.info("ARIMA%s skipped: %s", (p, d, q), exc)
    if not scores:
        raise ArimaFitError("no ARIMA order in the grid could be fitted")
    best = min(scores, key=lambda o: (scores[o], o))
    logger.info("ARIMA AIC grid: %s -> %s", scores, best)
    return best, scores


def arima_forecast(history, t: int, order=(1, 0, 0), horizon: int = HORIZON,
                   train_end: int | None = None) -> np.ndarray:
    """Fit on ``history[:train_end]`` (default: up to t) and forecast t..t+horizon-1."""
    x = np.asarray(getattr(history, "values", history), dtype=float)
    train_end = t if train_end is None else train_end
    if train_end < 4 * HOURS_PER_WEEK and len(x) >= 4 * HOURS_PER_WEEK:
        raise ValueError("ARIMA needs at least 4 weeks of training history")
    model = _fit_arima(x[:train_end], tuple(order))
    return _arima_predict(model, x, [t], horizon)[0]


def _arima_predict(model, x, origins, horizon):
    if isinstance(model, _MeanModel):
        return np.stack([model.forecast_from(x[:t], horizon) for t in origins])
    full = model.apply(x[:max(origins)])
    out = []
    for t in origins:
        pred = full.predict(start=int(t), end=int(t) + horizon - 1, dynamic=True)
        out.append(np.asarray(pred, dtype=float))
    return np.stack(out)


class ArimaForecaster(BaseEstimator):
    """Non-seasonal ARIMA fitted by maximum likelihood on the training range.

    ``order='auto'`` picks the lowest-AIC order over p, q in {0, 1, 2} and
    d in {0, 1}; if the search fails the default (2, 1, 2) is tried.
    """

    name = "arima"

    def __init__(self, order="auto", max_train_hours=None):
        self.order = order
        self.max_train_hours = max_train_hours

    def fit(self, X: pd.DataFrame, y=None):
        train, _, _ = frame_split(X)
        x = X["total"].to_numpy(float)[train.start:train.stop]
        if len(x) < 4 * HOURS_PER_WEEK:
            raise ValueError("ARIMA needs at least 4 weeks of training history")
        if self.max_train_hours:
            x = x[-self.max_train_hours:]
        if self.order == "auto":
            try:
                self.order_, self.aic_scores_ = arima_order_search(x)
            except ArimaFitError:
                self.order_, self.aic_scores_ = ARIMA_DEFAULT_ORDER, {}
        else:
            self.order_, self.aic_scores_ = tuple(self.order), {}
        self.model_ = _fit_arima(x, self.order_)
        self.n_parameters_ = int(len(self.model_.params))
        return self

    def predict(self, X: pd.DataFrame, origins) -> np.ndarray:
        check_is_fitted(self, "model_")
        return _arima_predict(self.model_, X["total"].to_numpy(float),
                              [int(t) for t in np.atleast_1d(origins)], HORIZON)


# --------------------------------------------------------------------------- neural baselines


class LSTMNet(nn.Module):
    def __init__(self, n_features=len(LSTM_FEATURES), hidden=64, horizon=HORIZON):
        super().__init__()
        self.lstm = nn.LSTM(n_features, hidden, batch_first=True)
        self.out = nn.Linear(hidden, horizon)

    def forward(self, x):
        _, (h, _) = self.lstm(x)
        return self.out(h[-1])


class LSTMForecaster(FrameForecaster):
    """Single-layer LSTM over the time-domain features of the wavelet ablation."""

    name = "lstm"

    def __init__(self, hidden=64, lr=1e-3, batch_size=256, max_epochs=300, patience=15,
                 train_stride=1, val_fraction=0.10, random_state=0, deterministic=True, verbose=False):
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.train_stride = train_stride
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.deterministic = deterministic
        self.verbose = verbose

    wavelet = "gaus4"  # only used by the shared feature builder; LSTM inputs are time-domain

    def _build_net(self):
        return LSTMNet(len(LSTM_FEATURES), self.hidden, HORIZON)

    def _inputs(self, frame, origins):
        return [self.features_.time_domain(frame, origins)]


class WaveletCNNForecaster(FrameForecaster):
    """Single-branch scalogram CNN without cluster features or attention."""

    name = "wavelet_cnn"

    def __init__(self, wavelet="gaus4", conv_channels=(32, 64), ffn_dims=(1024, 512, 256), lr=1e-3,
                 batch_size=256, max_epochs=300, patience=15, train_stride=1, val_fraction=0.10,
                 random_state=0, deterministic=True, verbose=False):
        self.wavelet = wavelet
        self.conv_channels = conv_channels
        self.ffn_dims = ffn_dims
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.train_stride = train_stride
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.deterministic = deterministic
        self.verbose = verbose

    def _build_net(self):
        n_feat = self.features_.n_query + 4
        return WaveletCNN(n_feat, SCALES, CONTEXT, tuple(self.conv_channels), tuple(self.ffn_dims), HORIZON)

    def _inputs(self, frame, origins):
        return [self.features_.single_branch(frame, origins)]


BASELINES = {
    "seasonal_naive": SeasonalNaiveForecaster,
    "arima": ArimaForecaster,
    "lstm": LSTMForecaster,
    "wavelet_cnn": WaveletCNNForecaster,
}
