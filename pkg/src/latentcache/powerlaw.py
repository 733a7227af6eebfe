"""Continuous power-law model for inter-arrival and incubation times."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trace import Cascade

ALPHA_MAX = 50.0
DEFAULT_RESOLUTION = 1.0


class FitError(ValueError):
    """Raised when there is not enough data to fit a power law."""


@dataclass(frozen=True)
class PowerLawParams:
    """Density ``(alpha - 1) / t_min * (t / t_min) ** -alpha`` on ``[t_min, inf)``."""

    alpha: float
    t_min: float
    n_samples: int = 0

    def __post_init__(self) -> None:
        if not self.alpha > 1:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")
        if not self.t_min > 0:
            raise ValueError(f"t_min must be positive, got {self.t_min}")

    def to_record(self) -> str:
        return f"alpha={self.alpha!r},t_min={self.t_min!r},n_samples={self.n_samples}"

    @classmethod
    def from_record(cls, text: str) -> "PowerLawParams":
        fields = dict(item.split("=", 1) for item in text.strip().split(","))
        return cls(float(fields["alpha"]), float(fields["t_min"]), int(fields.get("n_samples", 0)))


def pdf(p: PowerLawParams, t):
    """Power-law density, held at its ``t_min`` value for ``0 < t < t_min``.

    Accepts a scalar or an array; raises ``ValueError`` for ``t <= 0``.
    """
    arr = np.asarray(t, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("power-law density is undefined for t <= 0")
    out = (p.alpha - 1.0) / p.t_min * incubation_weight(p, arr)
    return float(out) if np.ndim(out) == 0 else out


def incubation_weight(p: PowerLawParams, t):
    """Density rescaled by its peak, ``min(1, (t / t_min) ** -alpha)``.

    This lies in ``(0, 1]`` and is the probability multiplier applied to
    transmission edges.
    """
    arr = np.maximum(np.asarray(t, dtype=float), p.t_min)
    out = (arr / p.t_min) ** (-p.alpha)
    return float(out) if np.ndim(out) == 0 else out


def clamp_gap(raw, resolution: float = DEFAULT_RESOLUTION):
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    out = np.maximum(raw, resolution)
    return float(out) if np.ndim(out) == 0 else out


def fit(samples, t_min: float | None = None) -> PowerLawParams:
    """Maximum-likelihood power-law fit.

    ``t_min`` defaults to the sample minimum, at which the likelihood is
    maximal for any alpha; alpha then has the closed form
    ``1 + n / sum(log(x / t_min))`` over the samples ``x >= t_min``.

    Raises
    ------
    FitError
        Fewer than two samples at or above ``t_min``.
    ValueError
        A non-positive sample.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise FitError(f"need at least 2 samples to fit a power law, got {x.size}")
    if np.any(~(x > 0)):
        raise ValueError("power-law samples must be positive")
    if t_min is None:
        t_min = float(x.min())
    tail = x[x >= t_min]
    if tail.size < 2:
        raise FitError(f"need at least 2 samples >= t_min={t_min}, got {tail.size}")
    log_sum = float(np.sum(np.log(tail / t_min)))
    alpha = ALPHA_MAX if log_sum <= 0 else min(1.0 + tail.size / log_sum, ALPHA_MAX)
    return PowerLawParams(alpha, float(t_min), int(tail.size))


def sample(p: PowerLawParams, size=None, rng=None):
    """Draw by inverse CDF: ``t_min * (1 - U) ** (-1 / (alpha - 1))``."""
    rng = np.random.default_rng(rng)
    u = rng.random(size)
    return p.t_min * (1.0 - u) ** (-1.0 / (p.alpha - 1.0))


def mean_interarrival(c: Cascade, resolution: float = DEFAULT_RESOLUTION) -> float:
    """Average clamped gap between successive requests of a cascade."""
    if len(c) < 2:
        raise ValueError("mean inter-arrival needs at least 2 requests")
    gaps = clamp_gap(np.diff(c.times), resolution)
    return float(np.mean(gaps))


def loglik(p: PowerLawParams, samples) -> float:
    """Log-likelihood of samples at or above ``t_min``."""
    x = np.asarray(samples, dtype=float)
    x = x[x >= p.t_min]
    return float(x.size * math.log((p.alpha - 1) / p.t_min) - p.alpha * np.sum(np.log(x / p.t_min)))
