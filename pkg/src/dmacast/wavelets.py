"""Real mother wavelets, direct-sum CWT and scalogram stacks.

The transform is

    W(a, b) = a**-0.5 * sum_t x[t] * psi((t - b) / a)      (unit time step)

evaluated at integer shifts ``b`` over the original samples. The signal is
reflect-padded by the wavelet support at the largest scale before summing.
Because the map from signal to coefficients is linear, it is precomputed as
an operator and cached by (length, scales, wavelet, padding).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import hermite_e as H
from sklearn.base import BaseEstimator, TransformerMixin

logger = logging.getLogger(__name__)

DEFAULT_WAVELET = "gaus4"
DEFAULT_CANDIDATES = tuple(f"gaus{n}" for n in range(1, 9)) + ("mexican_hat", "morlet_real")
MORLET_W0 = 5.0


class UndefinedRatioError(ValueError):
    pass


@dataclass(frozen=True)
class MotherWavelet:
    name: str
    evaluator: Callable[[np.ndarray], np.ndarray]
    support: float  # |psi(t)| < 1e-10 * max|psi| outside [-support, support]

    def __call__(self, t):
        return self.evaluator(np.asarray(t, dtype=float))


def _gaus_norm(order: int) -> float:
    """Exact 1 / ||He_n(t) exp(-t^2/2)||_2 via Gauss-Hermite quadrature."""
    # integral He_n(t)^2 exp(-t^2) dt = sqrt(pi) * E[He_n(U / sqrt 2)^2], U ~ N(0, 1)
    nodes, weights = H.hermegauss(order + 1)
    coef = np.zeros(order + 1)
    coef[order] = 1.0
    vals = H.hermeval(nodes / np.sqrt(2.0), coef) ** 2
    energy = np.sqrt(np.pi) * np.dot(weights, vals) / np.sqrt(2 * np.pi)
    return 1.0 / math.sqrt(energy)


def _gaus(order: int) -> Callable:
    coef = np.zeros(order + 1)
    coef[order] = 1.0
    # d^n/dt^n exp(-t^2/2) = (-1)^n He_n(t) exp(-t^2/2)
    c = (-1) ** order * _gaus_norm(order)

    def psi(t):
        return c * H.hermeval(t, coef) * np.exp(-0.5 * t * t)

    return psi


def _mexican_hat() -> Callable:
    g2 = _gaus(2)
    return lambda t: -g2(t)


def _morlet_real(w0: float = MORLET_W0) -> Callable:
    # admissibility-corrected real Morlet: (cos(w0 t) - exp(-w0^2/2)) exp(-t^2/2)
    k = math.exp(-0.5 * w0 * w0)
    energy = math.sqrt(math.pi) * (0.5 * (1 + math.exp(-w0 * w0)) - 2 * k * math.exp(-w0 * w0 / 4) + k * k)
    c = 1.0 / math.sqrt(energy)
    return lambda t: c * (np.cos(w0 * t) - k) * np.exp(-0.5 * t * t)


def _support(f: Callable, rel: float = 1e-10) -> float:
    t = np.linspace(-20, 20, 40001)
    v = np.abs(f(t))
    big = t[v >= rel * v.max()]
    return float(np.ceil(max(-big.min(), big.max())))


def _registry() -> dict[str, MotherWavelet]:
    funcs = {f"gaus{n}": _gaus(n) for n in range(1, 9)}
    funcs["mexican_hat"] = _mexican_hat()
    funcs["morlet_real"] = _morlet_real()
    return {name: MotherWavelet(name, f, _support(f)) for name, f in funcs.items()}


WAVELETS: dict[str, MotherWavelet] = _registry()


def get_wavelet(wavelet: str | MotherWavelet) -> MotherWavelet:
    if isinstance(wavelet, MotherWavelet):
        return wavelet
    try:
        return WAVELETS[wavelet]
    except KeyError:
        raise ValueError(f"unknown wavelet {wavelet!r}; known: {sorted(WAVELETS)}") from None


def eval_wavelet(name: str, t):
    return get_wavelet(name)(t)


@dataclass(frozen=True, eq=False)
class Scalogram:
    scales: np.ndarray
    times: np.ndarray
    coeffs: np.ndarray  # (len(scales), len(times))


@dataclass(frozen=True, eq=False)
class ScalogramStack:
    tensor: np.ndarray  # (s, h, n_feat)
    feature_names: tuple

    @property
    def depth(self) -> int:
        return self.tensor.shape[2]


def pad_width(scales: Sequence[float], wavelet: MotherWavelet) -> int:
    return int(math.ceil(wavelet.support * max(scales)))


def _pad_indices(n: int, pad: int, mode: str) -> np.ndarray:
    if pad == 0 or mode == "none":
        return np.arange(n)
    if n == 1:
        return np.zeros(n + 2 * pad, dtype=int)
    return np.pad(np.arange(n), pad, mode="reflect" if mode == "reflect" else mode)


@lru_cache(maxsize=64)
def _operator(n: int, scales: tuple, name: str, pad: str) -> np.ndarray:
    w = get_wavelet(name)
    p = 0 if pad == "none" else pad_width(scales, w)
    idx = _pad_indices(n, p, pad)
    t = np.arange(-p, n + p, dtype=float) if pad != "none" else np.arange(n, dtype=float)
    b = np.arange(n, dtype=float)
    op = np.zeros((len(scales), n, n))
    for i, a in enumerate(scales):
        kern = w((t[None, :] - b[:, None]) / a) / math.sqrt(a)  # (n, len(t))
        # fold the padded positions back onto the source samples
        np.add.at(op[i].T, idx, kern.T)
    op.setflags(write=False)
    return op


def cwt_operator(n: int, scales: Sequence[float], wavelet="gaus4", pad: str = "reflect") -> np.ndarray:
    """Linear operator ``(len(scales), n, n)`` mapping a length-n signal to coefficients."""
    if pad not in ("reflect", "none"):
        raise ValueError("pad must be 'reflect' or 'none'")
    return _operator(int(n), tuple(float(a) for a in scales), get_wavelet(wavelet).name, pad)


def cwt(signal, scales: Sequence[float] = tuple(range(1, 25)), wavelet="gaus4",
        pad: str = "reflect") -> Scalogram:
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("cwt needs a non-empty one-dimensional signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")
    if min(scales) < 1:
        raise ValueError("scales must be >= 1")
    op = cwt_operator(len(x), scales, wavelet, pad)
    return Scalogram(np.asarray(scales, dtype=float), np.arange(len(x)), op @ x)


def cropped_operator(length: int, h: int, s: int = 24, wavelet="gaus4") -> np.ndarray:
    """Operator ``(s, h, length)`` giving the final h columns of the CWT at scales 1..s."""
    op = cwt_operator(length, range(1, s + 1), wavelet, "reflect")
    return op[:, length - h:, :]


def scalogram_stack(features, s: int = 24, wavelet="gaus4", h: int = 24,
                    feature_names: Sequence[str] | None = None) -> ScalogramStack:
    """Scalograms of each feature over scales 1..s, cropped to the last h columns.

    Features may be longer than h; the extra leading samples act as context.
    """
    feats = [np.asarray(f, dtype=float) for f in features]
    if not feats:
        raise ValueError("no features")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(len(feats)))
    if len(names) != len(feats):
        raise ValueError("feature_names length mismatch")
    layers = []
    for f in feats:
        if f.ndim != 1 or len(f) < h:
            raise ValueError(f"feature of length {len(f)} shorter than h={h}")
        layers.append(cwt(f, range(1, s + 1), wavelet).coeffs[:, -h:])
    return ScalogramStack(np.stack(layers, axis=-1), names)


def batched_scalograms(windows: np.ndarray, h: int = 24, s: int = 24, wavelet="gaus4") -> np.ndarray:
    """Vectorized scalogram_stack over many windows: ``(n, L) -> (n, s, h)``."""
    windows = np.asarray(windows, dtype=float)
    op = cropped_operator(windows.shape[1], h, s, wavelet)
    return np.einsum("sbl,nl->nsb", op, windows, optimize=True)


def entropy_energy_ratio(scal: Scalogram | np.ndarray) -> float:
    """Shannon entropy of the normalized coefficient energy divided by total energy."""
    c = np.asarray(scal.coeffs if isinstance(scal, Scalogram) else scal, dtype=float)
    e2 = c.ravel() ** 2
    energy = e2.sum()
    if not energy > 0:
        raise UndefinedRatioError("all-zero scalogram has no entropy-to-energy ratio")
    p = e2[e2 > 0] / energy
    entropy = float(-(p * np.log(p)).sum())
    return entropy / float(energy)


def wavelet_scores(candidates: Sequence[str], windows, scales=tuple(range(1, 25))) -> dict:
    scores = {}
    for name in candidates:
        vals = []
        for w in windows:
            try:
                vals.append(entropy_energy_ratio(cwt(w, scales, name)))
            except UndefinedRatioError:
                continue
        scores[name] = float(np.mean(vals)) if vals else float("nan")
    return scores


def select_wavelet(candidates: Sequence[str], windows, criterion: str = "min",
                   scales=tuple(range(1, 25))) -> str:
    """Candidate with the best mean entropy-to-energy ratio; ties keep list order."""
    if not candidates or not len(windows):
        raise ValueError("need at least one candidate and one window")
    if criterion not in ("min", "max"):
        raise ValueError("criterion must be 'min' or 'max'")
    scores = wavelet_scores(candidates, windows, scales)
    logger.info("wavelet scores (%s): %s", criterion, scores)
    valid = [(n, v) for n, v in scores.items() if np.isfinite(v)]
    if not valid:
        raise UndefinedRatioError("every window produced an all-zero scalogram")
    sign = 1.0 if criterion == "min" else -1.0
    best = valid[0]
    for n, v in valid[1:]:
        if sign * v < sign * best[1]:
            best = (n, v)
    return best[0]


class ScalogramTransformer(TransformerMixin, BaseEstimator):
    """Map windows ``(n_samples, L)`` to cropped scalograms ``(n_samples, s, h)``."""

    def __init__(self, wavelet="gaus4", s=24, h=24):
        self.wavelet = wavelet
        self.s = s
        self.h = h

    def fit(self, X, y=None):
        get_wavelet(self.wavelet)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] < self.h:
            raise ValueError(f"expected (n, L >= {self.h}) windows, got {X.shape}")
        return batched_scalograms(X, self.h, self.s, self.wavelet)
