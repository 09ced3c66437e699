"""Analytic conditional Gaussian-mixture priors.

Everything the corruption process does to a diagonal mixture stays in
closed form: the noised marginal is again a mixture, its score (and hence
the exact noise prediction) is a responsibility-weighted sum, and a single
Gaussian component admits a conjugate clean-frame posterior.  A gridded
posterior covers the general mixture case in one dimension, and a Bayes
two-class rule turns a pair of priors into a nativeness probability.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .latent import Standardizer
from .schedule import Schedule, alpha_bar_at

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ConditionalGMM:
    """Per-label diagonal Gaussian mixtures with a shared component count.

    weights: (L, C) rows summing to 1; zero entries mark unused slots.
    means: (L, C, d); variances: (L, C, d) strictly positive.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 2 or m.ndim != 3 or v.shape != m.shape or m.shape[:2] != w.shape:
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {m.shape}, variances {v.shape}"
            )
        if (w < 0).any() or not np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("mixture weights must be nonnegative and sum to 1 per label")
        if not (v > 0).all():
            raise ValueError("component variances must be strictly positive")

    @property
    def n_labels(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[1])

    @property
    def dim(self) -> int:
        return int(self.means.shape[2])

    @classmethod
    def from_components(cls, weights, means, variances) -> "ConditionalGMM":
        """Single-label mixture from per-component parameter lists."""
        w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        m = np.asarray(means, dtype=np.float64)
        v = np.asarray(variances, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
            v = v[:, None]
        return cls(weights=w[None, :], means=m[None, :, :], variances=v[None, :, :])


@dataclass(frozen=True)
class PosteriorGrid:
    """Normalized clean-frame posterior density tabulated on an ascending grid."""

    grid: np.ndarray
    density: np.ndarray
    t_start: int
    x_t: float


def _check_label(p: ConditionalGMM, label: int) -> int:
    label = int(label)
    if not 0 <= label < p.n_labels:
        raise ValueError(f"label {label} outside [0, {p.n_labels})")
    return label


def _check_labels(p: ConditionalGMM, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= p.n_labels):
        raise ValueError(f"labels outside [0, {p.n_labels})")
    return labels


def _check_t(sched: Schedule, t: int) -> int:
    t = int(t)
    if not 0 <= t <= sched.T - 1:
        raise ValueError(f"timestep {t} outside [0, {sched.T - 1}]")
    return t


def _check_frames(p: ConditionalGMM, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.dim:
        raise ValueError(f"frames shape {x.shape} does not match prior dim {p.dim}")
    return x


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def _component_logpdfs(x: np.ndarray, m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """x (n, d) against per-frame component banks m, v (n, C, d) -> (n, C)."""
    diff = x[:, None, :] - m
    return -0.5 * (diff * diff / v + np.log(v) + _LOG_2PI).sum(axis=2)


def _noised_params(p: ConditionalGMM, ab: float) -> tuple[np.ndarray, np.ndarray]:
    """Component means and variances after corruption to cumulative level ``ab``."""
    return np.sqrt(ab) * p.means, ab * p.variances + (1.0 - ab)


def sample_prior(p: ConditionalGMM, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n frames from the label's mixture."""
    label = _check_label(p, label)
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    comp = rng.choice(p.n_components, size=n, p=p.weights[label])
    eps = rng.standard_normal((n, p.dim))
    return p.means[label][comp] + np.sqrt(p.variances[label][comp]) * eps


def sample_frames(p: ConditionalGMM, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one frame per entry of ``labels``, in order, from a single stream."""
    labels = _check_labels(p, labels)
    n = labels.shape[0]
    cum = np.cumsum(p.weights, axis=1)[labels]
    comp = np.minimum((rng.random(n)[:, None] > cum).sum(axis=1), p.n_components - 1)
    eps = rng.standard_normal((n, p.dim))
    return p.means[labels, comp] + np.sqrt(p.variances[labels, comp]) * eps


def logpdf_batch(p: ConditionalGMM, labels: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Uncorrupted mixture log density per frame."""
    x = _check_frames(p, x)
    labels = _check_labels(p, labels)
    lw = _log_weights(p.weights)[labels]
    lc = _component_logpdfs(x, p.means[labels], p.variances[labels])
    return logsumexp(lw + lc, axis=1)


def logpdf(p: ConditionalGMM, label: int, x: np.ndarray) -> float:
    label = _check_label(p, label)
    return float(logpdf_batch(p, np.array([label]), np.asarray(x, dtype=np.float64)[None, :])[0])


def noised_marginal_logpdf_batch(
    p: ConditionalGMM, labels: np.ndarray, t: int, x: np.ndarray, sched: Schedule
) -> np.ndarray:
    """Log density of the corrupted marginal at step ``t``, one value per frame."""
    x = _check_frames(p, x)
    labels = _check_labels(p, labels)
    t = _check_t(sched, t)
    m, v = _noised_params(p, alpha_bar_at(sched, t))
    lw = _log_weights(p.weights)[labels]
    lc = _component_logpdfs(x, m[labels], v[labels])
    return logsumexp(lw + lc, axis=1)


def noised_marginal_logpdf(
    p: ConditionalGMM, label: int, t: int, x: np.ndarray, sched: Schedule
) -> float:
    label = _check_label(p, label)
    x = np.asarray(x, dtype=np.float64)
    return float(noised_marginal_logpdf_batch(p, np.array([label]), t, x[None, :], sched)[0])


def exact_eps_batch(
    p: ConditionalGMM, labels: np.ndarray, t: int, x: np.ndarray, sched: Schedule
) -> np.ndarray:
    """Noise prediction that exactly matches the corrupted-marginal score.

    Returns -sqrt(1 - alpha_bar_t) times the gradient of the log marginal,
    computed from component responsibilities.
    """
    x = _check_frames(p, x)
    labels = _check_labels(p, labels)
    t = _check_t(sched, t)
    ab = alpha_bar_at(sched, t)
    m, v = _noised_params(p, ab)
    mg = m[labels]
    vg = v[labels]
    lw = _log_weights(p.weights)[labels]
    lj = lw + _component_logpdfs(x, mg, vg)
    lj -= logsumexp(lj, axis=1, keepdims=True)
    resp = np.exp(lj)
    grad = -(resp[:, :, None] * (x[:, None, :] - mg) / vg).sum(axis=1)
    return -np.sqrt(1.0 - ab) * grad


def exact_eps(p: ConditionalGMM, label: int, t: int, x: np.ndarray, sched: Schedule) -> np.ndarray:
    label = _check_label(p, label)
    x = np.asarray(x, dtype=np.float64)
    return exact_eps_batch(p, np.array([label]), t, x[None, :], sched)[0]


def gaussian_posterior_moments(
    mu_p: float, var_p: float, t: int, x_t: float, sched: Schedule
) -> tuple[float, float]:
    """Conjugate clean-frame posterior under a single-Gaussian prior.

    Observation model: x_t ~ N(sqrt(ab) x_0, 1 - ab) with ab the cumulative
    product at step ``t``.
    """
    if var_p <= 0:
        raise ValueError(f"prior variance must be positive, got {var_p}")
    t = _check_t(sched, t)
    ab = alpha_bar_at(sched, t)
    precision = 1.0 / var_p + ab / (1.0 - ab)
    mean = (mu_p / var_p + np.sqrt(ab) * x_t / (1.0 - ab)) / precision
    return float(mean), float(1.0 / precision)


def posterior_grid(
    p: ConditionalGMM,
    label: int,
    t: int,
    x_t: float,
    grid: np.ndarray,
    sched: Schedule,
) -> PosteriorGrid:
    """Gridded clean-frame posterior for a one-dimensional mixture prior.

    The grid must be wide enough that the truncated tails carry no mass;
    edge density above 1e-6 of the total is rejected as a too-narrow grid.
    """
    if p.dim != 1:
        raise ValueError(f"gridded posterior requires a 1-D prior, got dim {p.dim}")
    label = _check_label(p, label)
    t = _check_t(sched, t)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.shape[0] < 8:
        raise ValueError("grid must be a 1-D array with at least 8 points")
    if not (np.diff(grid) > 0).all():
        raise ValueError("grid must be strictly ascending")
    ab = alpha_bar_at(sched, t)
    log_prior = logpdf_batch(p, np.full(grid.shape[0], label), grid[:, None])
    log_lik = -0.5 * ((x_t - np.sqrt(ab) * grid) ** 2 / (1.0 - ab))
    log_post = log_prior + log_lik
    log_post -= log_post.max()
    dens = np.exp(log_post)
    z = np.trapezoid(dens, grid)
    if not np.isfinite(z) or z <= 0:
        raise ValueError("posterior mass on the grid underflowed; widen or refine the grid")
    dens /= z
    edge_mass = 0.5 * (dens[0] * (grid[1] - grid[0]) + dens[-1] * (grid[-1] - grid[-2]))
    if edge_mass > 1e-6:
        raise ValueError(
            f"grid too narrow: boundary cells carry mass {edge_mass:.3g} (> 1e-06)"
        )
    return PosteriorGrid(grid=grid, density=dens, t_start=t, x_t=float(x_t))


def grid_moments(pg: PosteriorGrid) -> tuple[float, float]:
    """Mean and variance of a gridded posterior by trapezoidal quadrature."""
    mean = np.trapezoid(pg.grid * pg.density, pg.grid)
    var = np.trapezoid((pg.grid - mean) ** 2 * pg.density, pg.grid)
    return float(mean), float(var)


def native_class_prob_batch(
    native: ConditionalGMM, l2: ConditionalGMM, labels: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """Posterior probability of the native class under equal class priors."""
    if native.dim != l2.dim or native.n_labels != l2.n_labels:
        raise ValueError("the two priors must share dimension and label vocabulary")
    return expit(logpdf_batch(native, labels, x) - logpdf_batch(l2, labels, x))


def native_class_prob(
    native: ConditionalGMM, l2: ConditionalGMM, label: int, x: np.ndarray
) -> float:
    label = _check_label(native, label)
    x = np.asarray(x, dtype=np.float64)
    return float(native_class_prob_batch(native, l2, np.array([label]), x[None, :])[0])


def marginal_1d(p: ConditionalGMM, dim: int) -> ConditionalGMM:
    """Marginal of one coordinate; diagonal components marginalize slotwise."""
    if not 0 <= dim < p.dim:
        raise ValueError(f"dimension {dim} outside [0, {p.dim})")
    return ConditionalGMM(
        weights=p.weights.copy(),
        means=p.means[:, :, dim:dim + 1].copy(),
        variances=p.variances[:, :, dim:dim + 1].copy(),
    )


def standardized(p: ConditionalGMM, s: Standardizer) -> ConditionalGMM:
    """The prior after frames pass through the standardizer's affine map."""
    if s.mean.shape[0] != p.dim:
        raise ValueError(f"standardizer dim {s.mean.shape[0]} does not match prior dim {p.dim}")
    return ConditionalGMM(
        weights=p.weights.copy(),
        means=(p.means - s.mean) / s.std,
        variances=p.variances / (s.std * s.std),
    )
