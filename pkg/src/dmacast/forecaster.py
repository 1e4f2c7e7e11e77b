"""Two-branch scalogram CNN with cross-attention for day-ahead DMA demand.

Inputs are built per forecast origin ``t`` (an hour position in a demand
frame, see :func:`dmacast.data.demand_frame`). The query branch sees the
total demand and calendar; the key/value branch sees per-cluster demand and
weather. Every feature is a 24-hour sequence turned into a 24x24 scalogram.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from statsmodels.tsa.seasonal import seasonal_decompose
from torch import nn

from ._torch import EarlyStopping, check_finite, count_parameters, seed_everything
from .data import HOURS_PER_WEEK, chronological_split, cluster_columns
from .wavelets import ScalogramStack, batched_scalograms, get_wavelet

logger = logging.getLogger(__name__)

HORIZON = 24
CONTEXT = 24
SCALES = 24
CWT_CONTEXT = 4 * SCALES  # extra history in front of each lag window
STD_FLOOR = 1e-6

QUERY_FEATURES = ("demand_lag24", "demand_lag168", "seasonal_lag24", "seasonal_lag168",
                  "holiday_target", "weekday_target")
EXOGENOUS_FEATURES = ("temp_max_target", "humidity_target", "dow_sin_target", "dow_cos_target")
LSTM_FEATURES = QUERY_FEATURES + EXOGENOUS_FEATURES
MIN_HISTORY = HOURS_PER_WEEK + CWT_CONTEXT
MODEL_FORMAT = "dmacast-forecaster"


@dataclass
class ForecastConfig:
    horizon: int = HORIZON
    context: int = CONTEXT
    scales: int = SCALES
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 15
    train_stride: int = 1
    val_fraction: float = 0.10
    seed: int = 0


def kv_feature_names(n_clusters: int) -> tuple:
    return tuple(f"cluster{c}_lag24" for c in range(n_clusters)) + EXOGENOUS_FEATURES


# --------------------------------------------------------------------------- split helpers


def frame_split(frame: pd.DataFrame, val_fraction: float = 0.10):
    """(train, val, test) ranges from ``frame.attrs['split']`` or a val-only split."""
    split = frame.attrs.get("split")
    if split is not None:
        return split
    return chronological_split(len(frame), 0, val_fraction)


def origins_in(r: range, stride: int = 1, horizon: int = HORIZON, min_history: int = MIN_HISTORY,
               aligned_hour: int | None = None, hours: np.ndarray | None = None) -> np.ndarray:
    """Origins t whose targets t..t+horizon-1 lie inside ``r`` and have enough history."""
    lo = max(r.start, min_history)
    hi = r.stop - horizon
    if hi < lo:
        return np.zeros(0, dtype=int)
    t = np.arange(lo, hi + 1)
    if aligned_hour is not None and hours is not None:
        t = t[hours[t] == aligned_hour]
    return t[::stride]


def _windows(x: np.ndarray, ends: np.ndarray, length: int) -> np.ndarray:
    """Rows ``x[e - length:e]`` for each end index e."""
    if len(ends) == 0:
        return np.zeros((0, length))
    idx = ends[:, None] + np.arange(-length, 0)[None, :]
    if idx.min() < 0 or idx.max() >= len(x):
        raise ValueError("insufficient history for the requested origins")
    return x[idx]


# --------------------------------------------------------------------------- features


class ScalogramFeatures(BaseEstimator):
    """Standardization, seasonal profile and scalogram construction for a frame.

    ``fit`` reads only the given training range. ``query``/``kv`` return
    channels-first arrays ``(n_origins, n_feat, s, h)``.
    """

    def __init__(self, wavelet="gaus4", scales=SCALES, context=CONTEXT, horizon=HORIZON):
        self.wavelet = wavelet
        self.scales = scales
        self.context = context
        self.horizon = horizon

    def fit(self, frame: pd.DataFrame, train: range | None = None):
        get_wavelet(self.wavelet)
        train = train if train is not None else range(len(frame))
        part = frame.iloc[train.start:train.stop]
        if len(part) < 2 * HOURS_PER_WEEK:
            raise ValueError("training range must cover at least two weeks")
        self.clusters_ = cluster_columns(frame)
        self.stats_ = {}
        for col in ["total", *self.clusters_, "temp_max", "humidity"]:
            v = part[col].to_numpy(float)
            self.stats_[col] = (float(v.mean()), max(float(v.std()), STD_FLOOR))
        z = self._z(part, "total")
        dec = seasonal_decompose(z, period=HOURS_PER_WEEK, model="additive", two_sided=True,
                                 extrapolate_trend=0)
        wh = part["week_hour"].to_numpy()
        seas = np.asarray(dec.seasonal)
        profile = np.zeros(HOURS_PER_WEEK)
        for h in range(HOURS_PER_WEEK):
            profile[h] = seas[wh == h].mean()
        self.seasonal_profile_ = profile
        return self

    def _z(self, frame, col):
        mu, sd = self.stats_[col]
        return (frame[col].to_numpy(float) - mu) / sd

    def standardize_target(self, values):
        mu, sd = self.stats_["total"]
        return (np.asarray(values, dtype=float) - mu) / sd

    def destandardize(self, z):
        mu, sd = self.stats_["total"]
        return np.asarray(z, dtype=float) * sd + mu

    @property
    def n_query(self) -> int:
        return len(QUERY_FEATURES)

    @property
    def n_kv(self) -> int:
        return len(self.clusters_) + len(EXOGENOUS_FEATURES)

    def _lag_window(self, series, origins, lag):
        # lag window ends at t - lag + context; CWT_CONTEXT extra hours in front
        return _windows(series, origins - lag + self.context, self.context + CWT_CONTEXT)

    def _target_window(self, series, origins):
        return _windows(series, origins + self.horizon, self.horizon)

    def _check_origins(self, frame, origins):
        origins = np.atleast_1d(np.asarray(origins, dtype=int))
        if origins.size and origins.min() < MIN_HISTORY:
            raise ValueError(f"origin {origins.min()} has less than {MIN_HISTORY} h of history")
        if origins.size and origins.max() + self.horizon > len(frame):
            raise ValueError("origin too close to the end of the frame for its target window")
        return origins

    def query_windows(self, frame, origins) -> dict:
        origins = self._check_origins(frame, origins)
        z = self._z(frame, "total")
        seas = self.seasonal_profile_[frame["week_hour"].to_numpy()]
        return {
            "demand_lag24": self._lag_window(z, origins, 24),
            "demand_lag168": self._lag_window(z, origins, 168),
            "seasonal_lag24": self._lag_window(seas, origins, 24),
            "seasonal_lag168": self._lag_window(seas, origins, 168),
            "holiday_target": self._target_window(frame["holiday"].to_numpy(float), origins),
            "weekday_target": self._target_window(frame["weekday"].to_numpy(float), origins),
        }

    def exogenous_windows(self, frame, origins) -> dict:
        origins = self._check_origins(frame, origins)
        angle = 2 * np.pi * frame["dow"].to_numpy(float) / 7.0
        return {
            "temp_max_target": self._target_window(self._z(frame, "temp_max"), origins),
            "humidity_target": self._target_window(self._z(frame, "humidity"), origins),
            "dow_sin_target": self._target_window(np.sin(angle), origins),
            "dow_cos_target": self._target_window(np.cos(angle), origins),
        }

    def kv_windows(self, frame, origins) -> dict:
        origins = self._check_origins(frame, origins)
        out = {f"cluster{i}_lag24": self._lag_window(self._z(frame, c), origins, 24)
               for i, c in enumerate(self.clusters_)}
        out.update(self.exogenous_windows(frame, origins))
        return out

    def _stack(self, windows: dict) -> np.ndarray:
        layers = [batched_scalograms(w, self.context, self.scales, self.wavelet) for w in windows.values()]
        return np.stack(layers, axis=1)

    def query(self, frame, origins) -> np.ndarray:
        check_is_fitted(self, "stats_")
        return self._stack(self.query_windows(frame, origins))

    def kv(self, frame, origins) -> np.ndarray:
        check_is_fitted(self, "stats_")
        return self._stack(self.kv_windows(frame, origins))

    def single_branch(self, frame, origins) -> np.ndarray:
        """Query features plus exogenous features, no cluster demand."""
        check_is_fitted(self, "stats_")
        w = self.query_windows(frame, origins)
        w.update(self.exogenous_windows(frame, origins))
        return self._stack(w)

    def time_domain(self, frame, origins) -> np.ndarray:
        """``(n, horizon, 10)`` sequences of the single-branch features (last 24 h of each)."""
        w = self.query_windows(frame, origins)
        w.update(self.exogenous_windows(frame, origins))
        return np.stack([v[:, -self.horizon:] for v in w.values()], axis=-1)

    def targets(self, frame, origins) -> np.ndarray:
        origins = self._check_origins(frame, origins)
        return self._target_window(self._z(frame, "total"), origins)


def _as_stack(arr: np.ndarray, names) -> ScalogramStack:
    return ScalogramStack(np.moveaxis(arr, 0, -1), tuple(names))


def build_query_stack(features: ScalogramFeatures, frame: pd.DataFrame, t: int) -> ScalogramStack:
    """``s x h x 6`` query scalogram stack at origin t."""
    return _as_stack(features.query(frame, [t])[0], QUERY_FEATURES)


def build_kv_stack(features: ScalogramFeatures, frame: pd.DataFrame, t: int) -> ScalogramStack:
    """``s x h x (n_clusters + 4)`` key/value scalogram stack at origin t."""
    return _as_stack(features.kv(frame, [t])[0], kv_feature_names(len(features.clusters_)))


# --------------------------------------------------------------------------- networks


class ConvBranch(nn.Module):
    """Two 3x3 convolutions (LeakyReLU, no pooling), then one token per scale row."""

    def __init__(self, in_channels, scales=SCALES, width=CONTEXT, channels=(32, 64), d_model=128):
        super().__init__()
        c1, c2 = channels
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, padding=1), nn.LeakyReLU(),
            nn.Conv2d(c1, c2, 3, padding=1), nn.LeakyReLU(),
        )
        self.token = nn.Linear(c2 * width, d_model)

    def forward(self, x):
        h = self.conv(x)  # B x C x s x h
        b, c, s, w = h.shape
        return self.token(h.permute(0, 2, 1, 3).reshape(b, s, c * w))


def feed_forward(in_dim, dims, out_dim) -> nn.Sequential:
    layers = []
    for i, d in enumerate(dims):
        layers += [nn.Linear(in_dim, d), nn.LeakyReLU() if i == len(dims) - 1 else nn.ReLU()]
        in_dim = d
    layers.append(nn.Linear(in_dim, out_dim))
    return nn.Sequential(*layers)


class CrossAttentionNet(nn.Module):
    def __init__(self, n_query, n_kv, scales=SCALES, width=CONTEXT, channels=(32, 64), d_model=128,
                 ffn_dims=(1024, 512, 256), horizon=HORIZON, residual=True, norm=True):
        super().__init__()
        self.d_model = d_model
        self.residual = residual
        self.norm = nn.LayerNorm(d_model) if norm else nn.Identity()
        self.query_branch = ConvBranch(n_query, scales, width, channels, d_model)
        self.kv_branch = ConvBranch(n_kv, scales, width, channels, d_model)
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.head = feed_forward(scales * d_model, ffn_dims, horizon)

    def attention(self, q_stack, kv_stack):
        """Returns (attended tokens, attention weights ``B x s_q x s_kv``)."""
        tokens = self.query_branch(q_stack)
        q = self.w_q(tokens)
        kv = self.kv_branch(kv_stack)
        k, v = self.w_k(kv), self.w_v(kv)
        weights = torch.softmax(q @ k.transpose(1, 2) / self.d_model ** 0.5, dim=-1)
        attended = weights @ v
        # skip connection carries the query stream (total demand) past the attention
        return self.norm(tokens + attended if self.residual else attended), weights

    def forward(self, q_stack, kv_stack):
        attended, _ = self.attention(q_stack, kv_stack)
        return self.head(attended.flatten(1))


class WaveletCNN(nn.Module):
    """Single-branch scalogram CNN: conv stack, flatten, feed-forward."""

    def __init__(self, n_feat, scales=SCALES, width=CONTEXT, channels=(32, 64),
                 ffn_dims=(1024, 512, 256), horizon=HORIZON):
        super().__init__()
        c1, c2 = channels
        self.conv = nn.Sequential(
            nn.Conv2d(n_feat, c1, 3, padding=1), nn.LeakyReLU(),
            nn.Conv2d(c1, c2, 3, padding=1), nn.LeakyReLU(),
        )
        self.head = feed_forward(c2 * scales * width, ffn_dims, horizon)

    def forward(self, x):
        return self.head(self.conv(x).flatten(1))


# --------------------------------------------------------------------------- training


def fit_network(net: nn.Module, train_inputs, y_train, val_inputs, y_val, lr=1e-3,
                batch_size=256, max_epochs=300, patience=15, seed=0, verbose=False) -> dict:
    """Adam + MSE with early stopping on validation MSE; restores the best weights."""
    gen = torch.Generator().manual_seed(seed)
    tx = [torch.as_tensor(a, dtype=torch.float32) for a in train_inputs]
    ty = torch.as_tensor(y_train, dtype=torch.float32)
    vx = [torch.as_tensor(a, dtype=torch.float32) for a in val_inputs]
    vy = torch.as_tensor(y_val, dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.MSELoss()
    stopper = EarlyStopping(patience)
    history = {"train_mse": [], "val_mse": []}
    n = len(ty)
    for epoch in range(max_epochs):
        net.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = perm[start:start + batch_size]
            loss = loss_fn(net(*[a[idx] for a in tx]), ty[idx])
            check_finite(loss, epoch, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        net.eval()
        with torch.no_grad():
            val = _batched_mse(net, vx, vy, batch_size) if len(vy) else total / n
        history["train_mse"].append(total / n)
        history["val_mse"].append(val)
        if verbose:
            logger.info("epoch %d train %.5f val %.5f", epoch, total / n, val)
        if stopper.step(val, epoch, net):
            break
    stopper.restore(net)
    net.eval()
    history["best_epoch"] = stopper.best_epoch
    history["best_val_mse"] = stopper.best
    return history


def _batched_mse(net, xs, y, batch_size):
    se = 0.0
    for start in range(0, len(y), batch_size):
        pred = net(*[a[start:start + batch_size] for a in xs])
        se += float(((pred - y[start:start + batch_size]) ** 2).sum())
    return se / y.numel()


def predict_network(net: nn.Module, inputs, batch_size=1024) -> np.ndarray:
    net.eval()
    xs = [torch.as_tensor(a, dtype=torch.float32) for a in inputs]
    out = []
    with torch.no_grad():
        for start in range(0, len(xs[0]), batch_size):
            out.append(net(*[a[start:start + batch_size] for a in xs]).numpy())
    return np.concatenate(out).astype(float) if out else np.zeros((0, HORIZON))


class FrameForecaster(BaseEstimator):
    """Shared fit/predict plumbing for forecasters that consume a demand frame.

    ``fit(frame)`` trains on origins whose targets fall in the training range
    and early-stops on the validation range, both from ``frame.attrs['split']``
    (or the last ``val_fraction`` of the frame). ``predict(frame, origins)``
    returns ``(n_origins, horizon)`` forecasts in m³/h.
    """

    name = "base"

    def _inputs(self, frame, origins):
        raise NotImplementedError

    def _build_net(self):
        raise NotImplementedError

    def fit(self, X: pd.DataFrame, y=None):
        frame = X
        train, val, _ = frame_split(frame, self.val_fraction)
        seed_everything(self.random_state, self.deterministic)
        self.features_ = ScalogramFeatures(getattr(self, "wavelet", "gaus4"), SCALES, CONTEXT, HORIZON).fit(frame, train)
        t_train = origins_in(train, self.train_stride)
        t_val = origins_in(val, self.train_stride)
        if len(t_train) == 0:
            raise ValueError("no training origins; the training range is too short")
        self.net_ = self._build_net()
        self.n_parameters_ = count_parameters(self.net_)
        logger.info("%s: %d parameters, %d train / %d val origins",
                    self.name, self.n_parameters_, len(t_train), len(t_val))
        self.history_ = fit_network(
            self.net_, self._inputs(frame, t_train), self.features_.targets(frame, t_train),
            self._inputs(frame, t_val), self.features_.targets(frame, t_val),
            self.lr, self.batch_size, self.max_epochs, self.patience, self.random_state, self.verbose)
        return self

    def predict(self, X: pd.DataFrame, origins=None) -> np.ndarray:
        check_is_fitted(self, "net_")
        if origins is None:
            raise ValueError("predict needs the forecast origins (hour positions in the frame)")
        origins = np.atleast_1d(np.asarray(origins, dtype=int))
        z = predict_network(self.net_, self._inputs(X, origins))
        return self.features_.destandardize(z)

    def config_hash(self) -> str:
        params = json.dumps(self.get_params(), sort_keys=True, default=str)
        return hashlib.sha256(f"{self.name}:{params}".encode()).hexdigest()[:12]

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        torch.save({"format": MODEL_FORMAT, "version": 1, "name": self.name,
                    "config_hash": self.config_hash(), "params": self.get_params(),
                    "features": self.features_, "state_dict": self.net_.state_dict(),
                    "history": self.history_, "n_parameters": self.n_parameters_}, Path(path))

    @classmethod
    def load(cls, path) -> "FrameForecaster":
        blob = torch.load(Path(path), weights_only=False)
        if blob.get("format") != MODEL_FORMAT or blob["name"] != cls.name:
            raise ValueError(f"{path} does not hold a {cls.name} model")
        model = cls(**blob["params"])
        model.features_ = blob["features"]
        model.net_ = model._build_net()
        model.net_.load_state_dict(blob["state_dict"])
        model.net_.eval()
        model.history_ = blob["history"]
        model.n_parameters_ = blob["n_parameters"]
        return model


class CrossAttentionForecaster(FrameForecaster):
    """Query = total demand and calendar scalograms; keys/values = cluster demand
    and weather scalograms.

    Parameters
    ----------
    wavelet : str
        Mother wavelet for every scalogram.
    d_model : int
        Token width of the single-head cross-attention.
    conv_channels : tuple of int
        Channels of the two convolutions in each branch.
    ffn_dims : tuple of int
        Hidden sizes of the feed-forward head.
    train_stride : int
        Hours between consecutive training origins.
    residual : bool
        Add the query tokens to the attention output before the head.
    """

    name = "cross_attention"

    def __init__(self, wavelet="gaus4", d_model=128, conv_channels=(32, 64),
                 ffn_dims=(1024, 512, 256), lr=1e-3, batch_size=256, max_epochs=300, patience=15,
                 train_stride=1, val_fraction=0.10, random_state=0, deterministic=True, verbose=False,
                 residual=True, norm=True):
        self.wavelet = wavelet
        self.d_model = d_model
        self.residual = residual
        self.norm = norm
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

    def fit(self, X, y=None):
        if not cluster_columns(X):
            raise ValueError("the cross-attention model needs cluster demand columns in the frame")
        return super().fit(X, y)

    def _build_net(self):
        f = self.features_
        return CrossAttentionNet(f.n_query, f.n_kv, SCALES, CONTEXT, tuple(self.conv_channels),
                                 self.d_model, tuple(self.ffn_dims), HORIZON, self.residual, self.norm)

    def _inputs(self, frame, origins):
        return [self.features_.query(frame, origins), self.features_.kv(frame, origins)]

    def attention_weights(self, frame, origins) -> np.ndarray:
        check_is_fitted(self, "net_")
        q, kv = (torch.as_tensor(a, dtype=torch.float32) for a in self._inputs(frame, origins))
        with torch.no_grad():
            return self.net_.attention(q, kv)[1].numpy()
