"""Built-in oracle suites behind the ``verify`` subcommand.

Each suite checks one analytic backbone of the engine against an
independent route: backprop against central finite differences, the
conjugate posterior against grid quadrature, and the corruption and
reverse-step algebra against their closed-form inverses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import (
    _loss_diff_core,
    _loss_total_core,
    dropout_masks,
    gradient_check,
    init_denoiser,
    init_residual,
)
from .prior import ConditionalGMM, gaussian_posterior_moments, grid_moments, posterior_grid
from .rng import PURPOSE_VERIFY, substream
from .sampler import ddim_step, forward_corrupt, reconstruct_x0
from .schedule import default_schedule

GRAD_TOL = 1e-4
MOMENT_TOL = 1e-6
IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class SuiteResult:
    name: str
    ok: bool
    detail: str


def _randomized_params(rng: np.random.Generator):
    theta = init_denoiser(dim=2, n_labels=3, hidden=(8,), cond_dim=6, time_dim=6, rng=rng)
    phi = init_residual(dim=2, hidden=(8,), rng=rng)
    # Move every tensor off its special initial value so the check covers
    # generic positions, not just the identity-FiLM start.
    for t in (theta.tensors, phi.tensors):
        for name in t:
            t[name] = t[name] + 0.3 * rng.standard_normal(t[name].shape)
    return theta, phi


def gradient_suite(seed: int = 0) -> SuiteResult:
    rng = substream(seed, PURPOSE_VERIFY, 1)
    theta, phi = _randomized_params(rng)
    sched = default_schedule()
    n = 12
    x0 = rng.standard_normal((n, 2))
    zc2 = rng.standard_normal((n, 2))
    h = rng.standard_normal((n, 2))
    labels = rng.integers(0, 3, size=n)
    t = rng.integers(0, sched.T, size=n)
    eps = rng.standard_normal((n, 2))
    masks = dropout_masks(theta, n, 0.25, rng)

    # The reconstruction feeding the residual head is detached, so the
    # denoiser's analytic gradient is the diffusion term's alone; check it
    # against that term.  The head has no other path, so the total works.
    def loss_theta():
        loss, tg, _, _ = _loss_diff_core(theta, x0, labels, t, eps, sched, masks)
        return loss, tg

    def loss_phi():
        loss, _, rg = _loss_total_core(
            theta, phi, x0, zc2, h, labels, t, eps, 0.5, sched, masks, None
        )
        return loss, rg

    worst = gradient_check(loss_theta, theta.tensors)
    worst.update({f"res.{k}": v for k, v in gradient_check(loss_phi, phi.tensors).items()})
    peak = max(worst.values())
    ok = peak < GRAD_TOL
    return SuiteResult(
        name="gradient-check",
        ok=ok,
        detail=f"{len(worst)} tensors, worst relative error {peak:.3g} (tol {GRAD_TOL:g})",
    )


def posterior_suite(seed: int = 0, cases: int = 50) -> SuiteResult:
    rng = substream(seed, PURPOSE_VERIFY, 2)
    sched = default_schedule()
    worst = 0.0
    for _ in range(cases):
        mu_p = float(rng.normal(0.0, 2.0))
        var_p = float(rng.uniform(0.5, 3.0))
        t = int(rng.integers(0, sched.T))
        x0 = float(rng.normal(mu_p, np.sqrt(var_p)))
        x_t = float(forward_corrupt(np.array([[x0]]), t, rng.standard_normal((1, 1)), sched)[0, 0])
        mean, var = gaussian_posterior_moments(mu_p, var_p, t, x_t, sched)
        sd = np.sqrt(var)
        grid = np.linspace(mean - 9 * sd, mean + 9 * sd, 1201)
        p = ConditionalGMM.from_components([1.0], [[mu_p]], [[var_p]])
        gm, gv = grid_moments(posterior_grid(p, 0, t, x_t, grid, sched))
        scale = max(abs(mean), sd)
        worst = max(worst, abs(gm - mean) / scale, abs(gv - var) / var)
    ok = worst < MOMENT_TOL
    return SuiteResult(
        name="posterior-grid",
        ok=ok,
        detail=f"{cases} conjugate cases, worst relative error {worst:.3g} (tol {MOMENT_TOL:g})",
    )


def identity_suite(seed: int = 0, cases: int = 1000) -> SuiteResult:
    rng = substream(seed, PURPOSE_VERIFY, 3)
    sched = default_schedule()
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 9))
        t = int(rng.integers(0, sched.T))
        x0 = rng.standard_normal((1, d))
        eps = rng.standard_normal((1, d))
        x_t = forward_corrupt(x0, t, eps, sched)
        back = reconstruct_x0(x_t, t, eps, sched)
        worst = max(worst, float(np.abs(back - x0).max()))
        stepped = ddim_step(x_t, t, eps, sched)
        target = x0 if t == 0 else forward_corrupt(x0, t - 1, eps, sched)
        worst = max(worst, float(np.abs(stepped - target).max()))
    ok = worst < IDENTITY_TOL
    return SuiteResult(
        name="sampler-identities",
        ok=ok,
        detail=f"{cases} cases, worst absolute error {worst:.3g} (tol {IDENTITY_TOL:g})",
    )


def run_suites(seed: int = 0) -> list[SuiteResult]:
    return [gradient_suite(seed), posterior_suite(seed), identity_suite(seed)]
