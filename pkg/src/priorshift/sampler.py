"""Forward corruption and deterministic reverse inference.

The reverse pass is the noise-free update: reconstruct the clean frame
from the current state and a noise prediction, then re-corrupt it to the
previous step's level with the same prediction.  Conversion corrupts an
input sequence to a chosen start step and runs that update chain back to
step zero, optionally snapping to a codebook and adding a learned
second-stage residual.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .denoiser import DenoiserParams, ResidualParams, forward, predict_zc2
from .latent import Codebook, LatentSequence, Standardizer, destandardize_frames, \
    snap_frames, standardize_frames
from .prior import ConditionalGMM, exact_eps_batch, native_class_prob_batch
from .rng import PURPOSE_CONVERT, substream
from .schedule import Schedule, alpha_bar_at

EpsFn = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    """Conversion controls.

    ``t_start`` counts corruption steps on the user scale 1..T (0 skips
    diffusion entirely); ``eps_source`` names the predictor family for
    logging purposes only.
    """

    t_start: int
    eps_source: str = "exact"
    seed: int = 0
    predict_residual: bool = False
    snap: bool = True

    def __post_init__(self) -> None:
        if self.t_start < 0:
            raise ValueError(f"t_start must be >= 0, got {self.t_start}")
        if self.eps_source not in ("exact", "model"):
            raise ValueError(f"eps_source must be 'exact' or 'model', got {self.eps_source!r}")


@dataclass(frozen=True)
class ConvertDiagnostics:
    id: str
    t_start: int
    identity_l2: float
    identity_cos: float
    native_prob: float
    n_frames: int


@dataclass(frozen=True)
class ConvertContext:
    """Fixed machinery shared by every sequence in one conversion run."""

    sched: Schedule
    standardizer: Standardizer
    eps_fn: EpsFn
    native: ConditionalGMM
    l2: ConditionalGMM
    codebook: Codebook | None = None
    residual: ResidualParams | None = None


def forward_corrupt(x0: np.ndarray, t: int, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """Corrupt clean frames to step ``t`` with the given unit noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match frames {x0.shape}")
    if not 0 <= t <= sched.T - 1:
        raise ValueError(f"timestep {t} outside [0, {sched.T - 1}]")
    ab = alpha_bar_at(sched, t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reconstruct_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: Schedule) -> np.ndarray:
    """Invert the corruption at step ``t`` given a noise estimate."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"noise shape {eps_hat.shape} does not match frames {x_t.shape}")
    if not 0 <= t <= sched.T - 1:
        raise ValueError(f"timestep {t} outside [0, {sched.T - 1}]")
    ab = alpha_bar_at(sched, t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: Schedule) -> np.ndarray:
    """One deterministic reverse step from ``t`` to ``t - 1``."""
    x0_hat = reconstruct_x0(x_t, t, eps_hat, sched)
    ab_prev = alpha_bar_at(sched, t - 1)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def denoise_from(
    x: np.ndarray, t_start: int, labels: np.ndarray, eps_fn: EpsFn, sched: Schedule
) -> np.ndarray:
    """Run the reverse chain from user-scale step ``t_start`` down to clean.

    ``t_start`` = k means the input sits at schedule index k - 1 and k
    reverse steps run; 0 returns the input unchanged.
    """
    x = np.array(x, dtype=np.float64)
    if not 0 <= t_start <= sched.T:
        raise ValueError(f"t_start {t_start} outside [0, {sched.T}]")
    labels = np.asarray(labels)
    for t in range(t_start - 1, -1, -1):
        x = ddim_step(x, t, eps_fn(x, t, labels), sched)
    return x


def prior_eps_source(p: ConditionalGMM, sched: Schedule) -> EpsFn:
    """Exact predictor from an analytic mixture over the same frame space."""

    def eps_fn(x: np.ndarray, t: int, labels: np.ndarray) -> np.ndarray:
        return exact_eps_batch(p, labels, t, x, sched)

    return eps_fn


def model_eps_source(theta: DenoiserParams) -> EpsFn:
    """Trained predictor, always evaluated without dropout."""

    def eps_fn(x: np.ndarray, t: int, labels: np.ndarray) -> np.ndarray:
        return forward(theta, x, t, labels, mode="eval")

    return eps_fn


def frame_metrics(
    inp: np.ndarray,
    out: np.ndarray,
    labels: np.ndarray,
    native: ConditionalGMM,
    l2: ConditionalGMM,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame identity distance, cosine to input, and nativeness probability."""
    diff = out - inp
    l2d = np.sqrt((diff * diff).sum(axis=1))
    denom = np.linalg.norm(inp, axis=1) * np.linalg.norm(out, axis=1)
    cos = (inp * out).sum(axis=1) / np.maximum(denom, 1e-300)
    prob = native_class_prob_batch(native, l2, labels, out)
    return l2d, cos, prob


def convert(
    seq: LatentSequence,
    ctx: ConvertContext,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[LatentSequence, ConvertDiagnostics]:
    """Translate one sequence toward the native prior.

    Standardize, corrupt to the start step with noise from ``rng``, run the
    deterministic reverse chain, destandardize, then optionally add the
    predicted second-stage residual (computed on the pre-snap frames) and
    snap the first-stage frames to the codebook.
    """
    if cfg.t_start > ctx.sched.T:
        raise ValueError(f"t_start {cfg.t_start} exceeds schedule length {ctx.sched.T}")
    labels = np.asarray(seq.labels)
    xs = standardize_frames(seq.frames, ctx.standardizer)
    if cfg.t_start > 0:
        eps = rng.standard_normal(xs.shape)
        x_t = forward_corrupt(xs, cfg.t_start - 1, eps, ctx.sched)
        z = denoise_from(x_t, cfg.t_start, labels, ctx.eps_fn, ctx.sched)
    else:
        z = xs
    zc1 = destandardize_frames(z, ctx.standardizer)
    if cfg.predict_residual:
        if ctx.residual is None:
            raise ValueError("predict_residual set but the context has no residual model")
        if seq.h is None:
            raise ValueError(f"sequence {seq.id!r} lacks the h track needed for the residual")
        zc2 = predict_zc2(ctx.residual, seq.h, zc1)
    else:
        zc2 = np.zeros_like(zc1)
    if cfg.snap:
        if ctx.codebook is None:
            raise ValueError("snap set but the context has no codebook")
        _, zc1 = snap_frames(zc1, ctx.codebook)
    out_frames = zc1 + zc2
    out_seq = LatentSequence(id=seq.id, labels=labels.copy(), frames=out_frames)
    l2d, cos, prob = frame_metrics(seq.frames, out_frames, labels, ctx.native, ctx.l2)
    diag = ConvertDiagnostics(
        id=seq.id,
        t_start=cfg.t_start,
        identity_l2=float(l2d.mean()),
        identity_cos=float(cos.mean()),
        native_prob=float(prob.mean()),
        n_frames=len(seq),
    )
    return out_seq, diag


def convert_sequences(
    seqs: Sequence[LatentSequence],
    ctx: ConvertContext,
    cfg: SamplerConfig,
    threads: int = 1,
) -> list[tuple[LatentSequence, ConvertDiagnostics]]:
    """Convert a batch of sequences, each on its own noise substream.

    Substreams are keyed by sequence position, so results are identical at
    any thread count; outputs keep input order.
    """
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")

    def work(item: tuple[int, LatentSequence]):
        i, seq = item
        return convert(seq, ctx, cfg, substream(cfg.seed, PURPOSE_CONVERT, i))

    items = list(enumerate(seqs))
    if threads == 1:
        return [work(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, items))
