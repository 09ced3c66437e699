"""Accent conversion for discrete latent frame sequences via partial diffusion.

A frame sequence drawn from a shifted (second-language) prior is corrupted
part-way along a fixed noise schedule, then carried back deterministically
under a native conditional prior.  The start step is the knob: low values
keep the input's identity, high values land on the native distribution.
"""
from .denoiser import (
    DenoiserParams,
    ModelBundle,
    ResidualParams,
    TrainConfig,
    forward,
    load_model,
    loss_diff,
    loss_total,
    predict_zc2,
    save_model,
    time_embedding,
    train,
)
from .harness import (
    SweepTable,
    World,
    WorldSpec,
    posterior_curves,
    gen_dataset,
    gen_world,
    load_world,
    save_world,
    sweep,
)
from .latent import (
    Codebook,
    LabelTrack,
    LatentSequence,
    Standardizer,
    fit_standardizer,
    load_dataset,
    save_dataset,
    snap_to_codebook,
    standardize,
    upsample_nearest,
)
from .prior import (
    ConditionalGMM,
    PosteriorGrid,
    exact_eps,
    gaussian_posterior_moments,
    native_class_prob,
    noised_marginal_logpdf,
    posterior_grid,
    sample_prior,
)
from .sampler import (
    SamplerConfig,
    convert,
    ddim_step,
    denoise_from,
    forward_corrupt,
    reconstruct_x0,
)
from .schedule import Schedule, alpha_bar_at, default_schedule, linear_schedule

__version__ = "0.1.0"
