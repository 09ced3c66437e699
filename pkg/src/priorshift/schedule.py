"""Discrete corruption schedule: per-step noise rates and their running products."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 2e-2
DEFAULT_T = 100


@dataclass(frozen=True)
class Schedule:
    """Noise schedule over ``T`` discrete steps, indexed t = 0 .. T-1.

    ``alpha_bar`` stores the cumulative products prod_{s<=t} (1 - beta[s]),
    accumulated in extended precision so lookups carry no compounding error.
    The empty product one step before t=0 is exposed by :func:`alpha_bar_at`
    rather than stored.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def linear_schedule(beta_min: float, beta_max: float, T: int) -> Schedule:
    """Evenly spaced rates from ``beta_min`` to ``beta_max`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    beta = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha.astype(np.longdouble))
    return Schedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def default_schedule() -> Schedule:
    return linear_schedule(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX, DEFAULT_T)


def alpha_bar_at(sched: Schedule, t: int) -> float:
    """Cumulative product at step ``t``; ``t = -1`` returns the empty product 1."""
    if not -1 <= t <= sched.T - 1:
        raise ValueError(f"timestep {t} outside [-1, {sched.T - 1}]")
    if t == -1:
        return 1.0
    return float(sched.alpha_bar[t])


def alpha_bar_array(sched: Schedule) -> np.ndarray:
    """All cumulative products as float64, for vectorized gathers."""
    return np.asarray(sched.alpha_bar, dtype=np.float64)
