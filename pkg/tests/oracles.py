"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import sympy as sp


@lru_cache(maxsize=None)
def gaussian_derivative(order: int):
    """Unit-L2-norm d^n/dt^n exp(-t^2/2), built symbolically."""
    t = sp.symbols("t", real=True)
    expr = sp.diff(sp.exp(-t ** 2 / 2), t, order)
    norm2 = sp.integrate(expr ** 2, (t, -sp.oo, sp.oo))
    f = sp.lambdify(t, expr / sp.sqrt(norm2), "numpy")
    return lambda x: np.asarray(f(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x, dtype=float)


def brute_cwt(x, scales, psi, pad: int = 0) -> np.ndarray:
    """W(a, b) = a^{-1/2} sum_t x[t] psi((t - b) / a), one (a, b) at a time.

    With ``pad > 0`` the signal is mirror-extended by ``pad`` samples on each
    side and t runs over the extended positions -pad .. n + pad - 1.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    xp = np.pad(x, pad, mode="reflect") if pad else x
    t = np.arange(-pad, n + pad, dtype=float)
    out = np.empty((len(scales), n))
    m = len(t)
    for i, a in enumerate(scales):
        # psi((t - b) / a) depends only on the integer offset t - b, so tabulate it once per scale
        offsets = np.arange(-pad - n + 1, n + pad, dtype=float)
        table = psi(offsets / a)
        for b in range(n):
            lo = (t[0] - b) - offsets[0]
            out[i, b] = np.dot(xp, table[int(lo):int(lo) + m]) / math.sqrt(a)
    return out


def silhouette_bruteforce(X, labels) -> float:
    X = np.asarray(X, dtype=float)
    labels = list(labels)
    n = len(X)
    total = 0.0
    for i in range(n):
        same = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not same:
            continue
        a = sum(math.dist(X[i], X[j]) for j in same) / len(same)
        b = math.inf
        for c in set(labels) - {labels[i]}:
            others = [j for j in range(n) if labels[j] == c]
            b = min(b, sum(math.dist(X[i], X[j]) for j in others) / len(others))
        total += (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return total / n


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g
