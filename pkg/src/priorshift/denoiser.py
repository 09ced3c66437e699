"""Learned noise predictor and residual head, with self-contained backprop.

The denoiser is a feed-forward SiLU network over single frames.  A
conditioning vector (sinusoidal time embedding through a linear layer,
plus an additive label embedding) modulates every hidden layer through a
FiLM transform gamma * a + delta, whose scale and shift are linear in the
conditioning vector and initialized to the identity.  The residual head
maps concatenated encoder features and the reconstructed clean frame to a
second-stage correction.  All gradients are derived by hand; the only
array machinery used is numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .latent import LatentSequence, Standardizer, fit_standardizer, standardize_frames
from .schedule import Schedule, alpha_bar_array, linear_schedule

MODEL_MAGIC = "PRIORSHIFT-MODEL v1"

# Reference hyperparameters of the transformer-scale variant this
# feed-forward engine stands in for; recorded for anyone scaling up.
FULL_SCALE_REFERENCE = {
    "arch": "transformer",
    "layers": 6,
    "heads": 8,
    "model_dim": 1024,
    "ffn_dim": 2048,
    "dropout": 0.1,
    "lr": 5e-5,
    "batch_size": 64,
    "epochs": 360,
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 0.5
    dropout: float = 0.1
    hidden: tuple[int, ...] = (128, 128)
    residual_hidden: tuple[int, ...] = ()
    cond_dim: int = 32
    time_dim: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ValueError("lr and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lam < 0:
            raise ValueError(f"residual loss weight must be >= 0, got {self.lam}")
        if self.cond_dim < 1 or self.time_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")


@dataclass
class DenoiserParams:
    dim: int
    n_labels: int
    hidden: tuple[int, ...]
    cond_dim: int
    time_dim: int
    tensors: dict[str, np.ndarray] = field(repr=False)


@dataclass
class ResidualParams:
    dim: int
    hidden: tuple[int, ...]
    tensors: dict[str, np.ndarray] = field(repr=False)


@dataclass
class ModelBundle:
    """Everything inference needs: both parameter sets and the training standardizer."""

    theta: DenoiserParams
    phi: ResidualParams
    standardizer: Standardizer


def _denoiser_shapes(
    dim: int, n_labels: int, hidden: tuple[int, ...], cond_dim: int, time_dim: int
) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "label_emb": (n_labels, cond_dim),
        "time_w": (cond_dim, time_dim),
        "time_b": (cond_dim,),
    }
    n_in = dim
    for i, n_out in enumerate(hidden):
        shapes[f"layer{i}_w"] = (n_out, n_in)
        shapes[f"layer{i}_b"] = (n_out,)
        shapes[f"layer{i}_film_gw"] = (n_out, cond_dim)
        shapes[f"layer{i}_film_gb"] = (n_out,)
        shapes[f"layer{i}_film_dw"] = (n_out, cond_dim)
        shapes[f"layer{i}_film_db"] = (n_out,)
        n_in = n_out
    shapes["out_w"] = (dim, n_in)
    shapes["out_b"] = (dim,)
    return shapes


def _residual_shapes(dim: int, hidden: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    n_in = 2 * dim
    for i, n_out in enumerate(hidden):
        shapes[f"layer{i}_w"] = (n_out, n_in)
        shapes[f"layer{i}_b"] = (n_out,)
        n_in = n_out
    shapes["out_w"] = (dim, n_in)
    shapes["out_b"] = (dim,)
    return shapes


def init_denoiser(
    dim: int,
    n_labels: int,
    hidden: tuple[int, ...],
    cond_dim: int,
    time_dim: int,
    rng: np.random.Generator,
) -> DenoiserParams:
    """Scaled-normal weights, zero biases; FiLM starts as the identity map."""
    if time_dim % 2:
        raise ValueError(f"time_dim must be even, got {time_dim}")
    t: dict[str, np.ndarray] = {}
    t["label_emb"] = 0.1 * rng.standard_normal((n_labels, cond_dim))
    t["time_w"] = rng.standard_normal((cond_dim, time_dim)) / np.sqrt(time_dim)
    t["time_b"] = np.zeros(cond_dim)
    n_in = dim
    for i, n_out in enumerate(hidden):
        t[f"layer{i}_w"] = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
        t[f"layer{i}_b"] = np.zeros(n_out)
        t[f"layer{i}_film_gw"] = np.zeros((n_out, cond_dim))
        t[f"layer{i}_film_gb"] = np.ones(n_out)
        t[f"layer{i}_film_dw"] = np.zeros((n_out, cond_dim))
        t[f"layer{i}_film_db"] = np.zeros(n_out)
        n_in = n_out
    t["out_w"] = rng.standard_normal((dim, n_in)) / np.sqrt(n_in)
    t["out_b"] = np.zeros(dim)
    return DenoiserParams(
        dim=dim, n_labels=n_labels, hidden=tuple(hidden),
        cond_dim=cond_dim, time_dim=time_dim, tensors=t,
    )


def init_residual(dim: int, hidden: tuple[int, ...], rng: np.random.Generator) -> ResidualParams:
    t: dict[str, np.ndarray] = {}
    n_in = 2 * dim
    for i, n_out in enumerate(hidden):
        t[f"layer{i}_w"] = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
        t[f"layer{i}_b"] = np.zeros(n_out)
        n_in = n_out
    t["out_w"] = rng.standard_normal((dim, n_in)) / np.sqrt(n_in)
    t["out_b"] = np.zeros(dim)
    return ResidualParams(dim=dim, hidden=tuple(hidden), tensors=t)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of timestep indices; even slots sine, odd cosine."""
    if dim % 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _silu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = expit(x)
    return x * s, s


def _silu_grad(m: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1.0 + m * (1.0 - s))


def dropout_masks(
    params: DenoiserParams, n: int, dropout: float, rng: np.random.Generator
) -> list[np.ndarray] | None:
    """Inverted-dropout multipliers, one per hidden layer, scaling baked in."""
    if dropout == 0.0:
        return None
    keep = 1.0 - dropout
    return [
        (rng.random((n, width)) >= dropout) / keep
        for width in params.hidden
    ]


def _check_inputs(params: DenoiserParams, x: np.ndarray, labels: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError(f"input shape {x.shape} does not match model dim {params.dim}")
    if labels.shape != (x.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {x.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= params.n_labels):
        raise ValueError(f"labels outside [0, {params.n_labels})")


def _forward_cached(
    params: DenoiserParams,
    x: np.ndarray,
    t,
    labels: np.ndarray,
    masks: list[np.ndarray] | None,
):
    T = params.tensors
    tvec = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    temb = time_embedding(tvec, params.time_dim)
    cond = temb @ T["time_w"].T + T["time_b"] + T["label_emb"][labels]
    h = x
    layers = []
    for i in range(len(params.hidden)):
        a = h @ T[f"layer{i}_w"].T + T[f"layer{i}_b"]
        gamma = cond @ T[f"layer{i}_film_gw"].T + T[f"layer{i}_film_gb"]
        delta = cond @ T[f"layer{i}_film_dw"].T + T[f"layer{i}_film_db"]
        m = gamma * a + delta
        z, s = _silu(m)
        layers.append((h, a, gamma, m, s))
        h = z if masks is None else z * masks[i]
    eps_hat = h @ T["out_w"].T + T["out_b"]
    cache = (x, temb, cond, labels, layers, h, masks)
    return eps_hat, cache


def _backward(params: DenoiserParams, cache, g_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. the network output."""
    T = params.tensors
    x, temb, cond, labels, layers, h_last, masks = cache
    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = g_out.T @ h_last
    grads["out_b"] = g_out.sum(axis=0)
    g_h = g_out @ T["out_w"]
    g_cond = np.zeros_like(cond)
    for i in reversed(range(len(params.hidden))):
        h_in, a, gamma, m, s = layers[i]
        g_z = g_h if masks is None else g_h * masks[i]
        g_m = g_z * _silu_grad(m, s)
        g_gamma = g_m * a
        g_a = g_m * gamma
        grads[f"layer{i}_film_gw"] = g_gamma.T @ cond
        grads[f"layer{i}_film_gb"] = g_gamma.sum(axis=0)
        grads[f"layer{i}_film_dw"] = g_m.T @ cond
        grads[f"layer{i}_film_db"] = g_m.sum(axis=0)
        g_cond += g_gamma @ T[f"layer{i}_film_gw"] + g_m @ T[f"layer{i}_film_dw"]
        grads[f"layer{i}_w"] = g_a.T @ h_in
        grads[f"layer{i}_b"] = g_a.sum(axis=0)
        g_h = g_a @ T[f"layer{i}_w"]
    grads["time_w"] = g_cond.T @ temb
    grads["time_b"] = g_cond.sum(axis=0)
    g_emb = np.zeros_like(T["label_emb"])
    np.add.at(g_emb, labels, g_cond)
    grads["label_emb"] = g_emb
    return grads


def forward(
    params: DenoiserParams,
    x_t: np.ndarray,
    t,
    labels,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> np.ndarray:
    """Predict the injected noise for frames ``x_t`` at step(s) ``t``.

    ``mode='train'`` applies inverted dropout drawn from ``rng``; ``'eval'``
    is deterministic and pure.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    _check_inputs(params, x, labels)
    masks = None
    if mode == "train" and dropout > 0.0:
        if rng is None:
            raise ValueError("training mode with dropout needs an rng")
        masks = dropout_masks(params, x.shape[0], dropout, rng)
    eps_hat, _ = _forward_cached(params, x, t, labels, masks)
    return eps_hat[0] if single else eps_hat


def _residual_forward(phi: ResidualParams, u: np.ndarray):
    T = phi.tensors
    h = u
    layers = []
    for i in range(len(phi.hidden)):
        a = h @ T[f"layer{i}_w"].T + T[f"layer{i}_b"]
        z, s = _silu(a)
        layers.append((h, a, s))
        h = z
    out = h @ T["out_w"].T + T["out_b"]
    return out, (layers, h)


def _residual_backward(phi: ResidualParams, cache, g_out: np.ndarray) -> dict[str, np.ndarray]:
    T = phi.tensors
    layers, h_last = cache
    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = g_out.T @ h_last
    grads["out_b"] = g_out.sum(axis=0)
    g_h = g_out @ T["out_w"]
    for i in reversed(range(len(phi.hidden))):
        h_in, a, s = layers[i]
        g_a = g_h * _silu_grad(a, s)
        grads[f"layer{i}_w"] = g_a.T @ h_in
        grads[f"layer{i}_b"] = g_a.sum(axis=0)
        g_h = g_a @ T[f"layer{i}_w"]
    return grads


def predict_zc2(phi: ResidualParams, h: np.ndarray, zc1: np.ndarray) -> np.ndarray:
    """Second-stage residual from encoder features and first-stage frames."""
    h = np.asarray(h, dtype=np.float64)
    zc1 = np.asarray(zc1, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h = h[None, :]
        zc1 = zc1[None, :]
    if h.shape != zc1.shape or h.shape[1] != phi.dim:
        raise ValueError(
            f"feature shape {h.shape} and frame shape {zc1.shape} must both be (n, {phi.dim})"
        )
    out, _ = _residual_forward(phi, np.concatenate([h, zc1], axis=1))
    return out[0] if single else out


def _gather_ab(sched: Schedule, t: np.ndarray) -> np.ndarray:
    return alpha_bar_array(sched)[t][:, None]


def _loss_diff_core(
    theta: DenoiserParams,
    x0: np.ndarray,
    labels: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    sched: Schedule,
    masks: list[np.ndarray] | None,
):
    ab = _gather_ab(sched, t)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    eps_hat, cache = _forward_cached(theta, x_t, t, labels, masks)
    r = eps_hat - eps
    loss = float((r * r).mean())
    grads = _backward(theta, cache, (2.0 / r.size) * r)
    return loss, grads, x_t, eps_hat


def draw_batch_noise(
    theta: DenoiserParams,
    n: int,
    sched: Schedule,
    rng: np.random.Generator,
    dropout: float,
):
    """Per-batch stochastic inputs, always in the order t, eps, masks."""
    t = rng.integers(0, sched.T, size=n)
    eps = rng.standard_normal((n, theta.dim))
    masks = dropout_masks(theta, n, dropout, rng)
    return t, eps, masks


def loss_diff(
    theta: DenoiserParams,
    x0: np.ndarray,
    labels: np.ndarray,
    sched: Schedule,
    rng: np.random.Generator,
    dropout: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Denoising loss and gradients; timesteps uniform, noise standard normal."""
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels)
    _check_inputs(theta, x0, labels)
    t, eps, masks = draw_batch_noise(theta, x0.shape[0], sched, rng, dropout)
    loss, grads, _, _ = _loss_diff_core(theta, x0, labels, t, eps, sched, masks)
    return loss, grads


def _loss_total_core(
    theta: DenoiserParams,
    phi: ResidualParams,
    x0: np.ndarray,
    zc2: np.ndarray,
    h: np.ndarray,
    labels: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    lam: float,
    sched: Schedule,
    masks: list[np.ndarray] | None,
    destd: Standardizer | None,
):
    dloss, tgrads, x_t, eps_hat = _loss_diff_core(theta, x0, labels, t, eps, sched, masks)
    ab = _gather_ab(sched, t)
    # The reconstruction enters the residual branch as data: no gradient
    # flows from the residual loss back into the denoiser.
    xhat0 = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if destd is not None:
        xhat0 = xhat0 * destd.std + destd.mean
    zhat, rcache = _residual_forward(phi, np.concatenate([h, xhat0], axis=1))
    rr = zhat - zc2
    rloss = float((rr * rr).mean())
    rgrads = _residual_backward(phi, rcache, (2.0 * lam / rr.size) * rr)
    return dloss + lam * rloss, tgrads, rgrads


def loss_total(
    theta: DenoiserParams,
    phi: ResidualParams,
    x0: np.ndarray,
    zc2: np.ndarray,
    h: np.ndarray,
    labels: np.ndarray,
    lam: float,
    sched: Schedule,
    rng: np.random.Generator,
    dropout: float = 0.0,
    destd: Standardizer | None = None,
) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Joint loss: denoising term plus ``lam`` times the residual regression.

    ``destd`` maps the reconstructed clean frame back to raw scale before
    the residual head, so the head sees the same inputs it gets at
    conversion time.  Consumes rng draws exactly like :func:`loss_diff`.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    zc2 = np.asarray(zc2, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels)
    _check_inputs(theta, x0, labels)
    if zc2.shape != x0.shape or h.shape != x0.shape:
        raise ValueError("zc2 and h tracks must match the frame block shape")
    t, eps, masks = draw_batch_noise(theta, x0.shape[0], sched, rng, dropout)
    return _loss_total_core(theta, phi, x0, zc2, h, labels, t, eps, lam, sched, masks, destd)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_tensors(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in tensors.items()},
            v={k: np.zeros_like(a) for k, a in tensors.items()},
        )


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name in tensors:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train(
    cfg: TrainConfig,
    dataset: list[LatentSequence],
    sched: Schedule,
    rng: np.random.Generator,
    n_labels: int | None = None,
    progress=None,
) -> tuple[ModelBundle, list[float]]:
    """Shuffled-minibatch Adam on the total loss.

    One generator drives initialization, epoch shuffles, per-batch timestep
    and noise draws, and dropout masks, in a fixed order, so a fixed seed
    reproduces parameters bit for bit.  Raises if the loss goes non-finite.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if any(seq.zc2 is None or seq.h is None for seq in dataset):
        raise ValueError("training requires datasets with zc2 and h tracks")
    x0_raw = np.concatenate([seq.frames for seq in dataset], axis=0)
    zc2 = np.concatenate([seq.zc2 for seq in dataset], axis=0)
    h = np.concatenate([seq.h for seq in dataset], axis=0)
    labels = np.concatenate([np.asarray(seq.labels) for seq in dataset])
    if n_labels is None:
        n_labels = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_labels:
        raise ValueError(f"dataset labels outside [0, {n_labels})")
    std = fit_standardizer(dataset)
    x0 = standardize_frames(x0_raw, std)
    dim = x0.shape[1]
    theta = init_denoiser(dim, n_labels, cfg.hidden, cfg.cond_dim, cfg.time_dim, rng)
    phi = init_residual(dim, cfg.residual_hidden, rng)
    st_theta = AdamState.for_tensors(theta.tensors)
    st_phi = AdamState.for_tensors(phi.tensors)
    n = x0.shape[0]
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, tg, rg = loss_total(
                theta, phi, x0[idx], zc2[idx], h[idx], labels[idx],
                cfg.lam, sched, rng, dropout=cfg.dropout, destd=std,
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch offset {start}"
                )
            adam_step(theta.tensors, tg, st_theta, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            adam_step(phi.tensors, rg, st_phi, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            total += loss * idx.size
        curve.append(total / n)
        if progress is not None:
            progress(epoch, curve[-1])
    return ModelBundle(theta=theta, phi=phi, standardizer=std), curve


def eval_loss_diff(eps_fn, x0, labels, t, eps, sched: Schedule) -> float:
    """Denoising loss of an arbitrary predictor on fixed (x0, t, eps) triples."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t)
    eps = np.asarray(eps, dtype=np.float64)
    labels = np.asarray(labels)
    ab = alpha_bar_array(sched)[t][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    out = np.empty_like(eps)
    for tv in np.unique(t):
        sel = t == tv
        out[sel] = eps_fn(x_t[sel], int(tv), labels[sel])
    r = out - eps
    return float((r * r).mean())


def finite_difference_grads(loss_fn, tensors: dict[str, np.ndarray], step: float = 1e-4):
    """Central finite differences of ``loss_fn()`` over every tensor entry.

    ``loss_fn`` must be deterministic and read the tensors in place.
    """
    fd: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        g = np.empty_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = loss_fn()[0]
            flat[j] = orig - step
            lm = loss_fn()[0]
            flat[j] = orig
            gflat[j] = (lp - lm) / (2.0 * step)
        fd[name] = g
    return fd


def gradient_check(loss_fn, tensors: dict[str, np.ndarray], step: float = 1e-4):
    """Worst relative error per tensor between analytic and central-difference
    gradients, measured against the larger of the two tensors' peak magnitudes."""
    _, analytic = loss_fn()
    fd = finite_difference_grads(loss_fn, tensors, step)
    worst: dict[str, float] = {}
    for name in tensors:
        scale = max(np.abs(fd[name]).max(), np.abs(analytic[name]).max(), 1e-12)
        worst[name] = float(np.abs(fd[name] - analytic[name]).max() / scale)
    return worst


def _fmt_hidden(hidden: tuple[int, ...]) -> str:
    return ",".join(str(w) for w in hidden) if hidden else "-"


def _parse_hidden(text: str) -> tuple[int, ...]:
    if text == "-":
        return ()
    return tuple(int(v) for v in text.split(","))


def save_model(path: str, bundle: ModelBundle, sched: Schedule) -> None:
    """Plain-text model file: header, named tensor blocks, trailing ``end``."""
    theta, phi = bundle.theta, bundle.phi
    blocks: list[tuple[str, np.ndarray]] = []
    blocks += [(f"den.{k}", v) for k, v in theta.tensors.items()]
    blocks += [(f"res.{k}", v) for k, v in phi.tensors.items()]
    blocks += [
        ("std.mean", bundle.standardizer.mean),
        ("std.scale", bundle.standardizer.std),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MODEL_MAGIC + "\n")
        fh.write(f"schedule {sched.beta[0]:.17g} {sched.beta[-1]:.17g} {sched.T}\n")
        fh.write(f"dim {theta.dim}\n")
        fh.write(f"labels {theta.n_labels}\n")
        fh.write(f"cond_dim {theta.cond_dim}\n")
        fh.write(f"time_dim {theta.time_dim}\n")
        fh.write(f"hidden {_fmt_hidden(theta.hidden)}\n")
        fh.write(f"residual_hidden {_fmt_hidden(phi.hidden)}\n")
        for name, arr in blocks:
            fh.write(f"tensor {name} {arr.size}\n")
            fh.write(" ".join(f"{v:.17g}" for v in np.asarray(arr).ravel()) + "\n")
        fh.write("end\n")


def _read_kv(fh, key: str) -> list[str]:
    line = fh.readline().rstrip("\n")
    parts = line.split()
    if not parts or parts[0] != key:
        raise ValueError(f"model file: expected {key!r} line, got {line!r}")
    return parts[1:]


def load_model(path: str) -> tuple[ModelBundle, Schedule]:
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file (header {magic!r})")
        bmin, bmax, t_steps = _read_kv(fh, "schedule")
        sched = linear_schedule(float(bmin), float(bmax), int(t_steps))
        dim = int(_read_kv(fh, "dim")[0])
        n_labels = int(_read_kv(fh, "labels")[0])
        cond_dim = int(_read_kv(fh, "cond_dim")[0])
        time_dim = int(_read_kv(fh, "time_dim")[0])
        hidden = _parse_hidden(_read_kv(fh, "hidden")[0])
        res_hidden = _parse_hidden(_read_kv(fh, "residual_hidden")[0])
        shapes: dict[str, tuple[int, ...]] = {}
        shapes.update({
            f"den.{k}": s
            for k, s in _denoiser_shapes(dim, n_labels, hidden, cond_dim, time_dim).items()
        })
        shapes.update({f"res.{k}": s for k, s in _residual_shapes(dim, res_hidden).items()})
        shapes["std.mean"] = (dim,)
        shapes["std.scale"] = (dim,)
        tensors: dict[str, np.ndarray] = {}
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated model file, no 'end' marker")
            line = line.rstrip("\n")
            if line == "end":
                break
            parts = line.split()
            if len(parts) != 3 or parts[0] != "tensor":
                raise ValueError(f"{path}: bad tensor header {line!r}")
            name, size = parts[1], int(parts[2])
            if name not in shapes:
                raise ValueError(f"{path}: unknown tensor {name!r}")
            values = np.array([float(v) for v in fh.readline().split()], dtype=np.float64)
            expect = shapes[name]
            if size != values.size or values.size != int(np.prod(expect)):
                raise ValueError(
                    f"{path}: tensor {name!r} has {values.size} values, expected {expect}"
                )
            tensors[name] = values.reshape(expect)
        missing = sorted(set(shapes) - set(tensors))
        if missing:
            raise ValueError(f"{path}: missing tensors {missing}")
    theta = DenoiserParams(
        dim=dim, n_labels=n_labels, hidden=hidden, cond_dim=cond_dim, time_dim=time_dim,
        tensors={k[len("den."):]: v for k, v in tensors.items() if k.startswith("den.")},
    )
    phi = ResidualParams(
        dim=dim, hidden=res_hidden,
        tensors={k[len("res."):]: v for k, v in tensors.items() if k.startswith("res.")},
    )
    std = Standardizer(mean=tensors["std.mean"], std=tensors["std.scale"])
    return ModelBundle(theta=theta, phi=phi, standardizer=std), sched
