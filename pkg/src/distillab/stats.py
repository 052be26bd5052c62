"""Shared statistics helpers: correlation, kernel density, Normal CDF, smoothing."""

from __future__ import annotations

import math

import numpy as np


def pearson(x, y) -> float:
    """Product-moment correlation of two equal-length series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError(f"pearson: need two equal-length 1-D series, got {x.shape} and {y.shape}")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("pearson: zero variance in an argument")
    r = float(xc @ yc) / math.sqrt(vx * vy)
    return min(1.0, max(-1.0, r))


def normal_cdf(x: float, mu: float = 0.0, sigma: float = 1.0) -> float:
    if sigma <= 0:
        raise ValueError(f"normal_cdf: sigma must be positive, got {sigma}")
    return 0.5 * (1.0 + math.erf((x - mu) / (sigma * math.sqrt(2.0))))


def silverman_bandwidth(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    sd = float(samples.std())
    if sd == 0.0:
        raise ValueError("silverman_bandwidth: zero variance")
    return 1.06 * sd * samples.size ** (-0.2)


def kde(samples, bandwidth: float | None = None, grid_size: int = 512):
    """Gaussian kernel density estimate on a grid spanning the data +- 3 bandwidths.

    Returns (grid, density). Bandwidth defaults to Silverman's rule.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise ValueError(f"kde: need at least 2 samples, got {samples.size}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(samples)
    if bandwidth <= 0:
        raise ValueError(f"kde: bandwidth must be positive, got {bandwidth}")
    lo = samples.min() - 3.0 * bandwidth
    hi = samples.max() + 3.0 * bandwidth
    grid = np.linspace(lo, hi, grid_size)
    z = (grid[:, None] - samples[None, :]) / bandwidth
    density = np.exp(-0.5 * z * z).sum(axis=1) / (samples.size * bandwidth * math.sqrt(2.0 * math.pi))
    return grid, density


def moving_average(values, window: int) -> np.ndarray:
    """Centered moving average with edge truncation; window must be odd."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"moving_average: window must be odd and >= 1, got {window}")
    if window > values.size:
        raise ValueError(f"moving_average: window {window} exceeds series length {values.size}")
    half = window // 2
    out = np.empty_like(values)
    n = values.size
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        out[i] = values[lo:hi].mean()
    return out
