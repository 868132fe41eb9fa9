"""Small shared numerical helpers."""
from __future__ import annotations

import numpy as np


def convergence_slope(h_values, errors) -> float:
    """Least-squares slope of log(error) against log(h).

    Zero or negative errors are floored at 1e-300 so that an exactly
    reproduced solution registers as a huge slope rather than an error.
    """
    h = np.asarray(h_values, dtype=float)
    e = np.maximum(np.asarray(errors, dtype=float), 1e-300)
    if h.size < 2:
        raise ValueError("need at least two resolutions to fit a slope")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = 0.5 * h
    w[-1] = 0.5 * h
    return w


def running_trapezoid(values, dt: float) -> np.ndarray:
    """Cumulative trapezoid of a sampled time series, starting at 0."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    if v.size > 1:
        out[1:] = np.cumsum(0.5 * dt * (v[1:] + v[:-1]))
    return out
