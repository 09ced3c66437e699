"""Command-line entry points.

Every command takes one ``--seed`` and derives all of its randomness from
named substreams of it, so identical invocations produce byte-identical
outputs regardless of thread count.  Logs go to stderr; result files and
machine-readable verify lines go where the flags point.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import MODEL_MAGIC, TrainConfig, load_model, save_model, train
from .harness import (
    WORLD_MAGIC,
    WorldSpec,
    build_context,
    posterior_curves,
    gen_dataset,
    gen_world,
    load_world,
    save_world,
    sweep,
)
from .latent import load_dataset, save_dataset
from .prior import marginal_1d
from .rng import PURPOSE_DATA, PURPOSE_TRAIN, substream
from .sampler import SamplerConfig, convert_sequences
from .schedule import DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_T, linear_schedule
from .verify import run_suites

log = logging.getLogger("priorshift")


class UsageError(Exception):
    """Bad flag combinations detected after parsing; exits with status 2."""


def _out_path(path: str, force: bool) -> str:
    if Path(path).exists() and not force:
        raise UsageError(f"output path {path} exists; pass --force to overwrite")
    return path


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from exc


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beta-min", type=float, default=None,
                   help=f"first noise rate (default {DEFAULT_BETA_MIN})")
    p.add_argument("--beta-max", type=float, default=None,
                   help=f"last noise rate (default {DEFAULT_BETA_MAX})")
    p.add_argument("--T", type=int, default=None,
                   help=f"number of corruption steps (default {DEFAULT_T})")


def _schedule_from_args(args: argparse.Namespace):
    return linear_schedule(
        DEFAULT_BETA_MIN if args.beta_min is None else args.beta_min,
        DEFAULT_BETA_MAX if args.beta_max is None else args.beta_max,
        DEFAULT_T if args.T is None else args.T,
    )


def _reject_schedule_flags(args: argparse.Namespace) -> None:
    for flag, value in (("--beta-min", args.beta_min), ("--beta-max", args.beta_max),
                        ("--T", args.T)):
        if value is not None:
            raise UsageError(
                f"{flag} conflicts with --model <file>: the schedule is read from the model"
            )


def _cmd_gen_world(args: argparse.Namespace) -> int:
    spec = WorldSpec(
        dim=args.dim, n_labels=args.labels, n_components=args.components,
        codebook_size=args.codebook_size, h_noise=args.h_noise,
        l2_shift=args.l2_shift, mean_scale=args.mean_scale,
        var_lo=args.var_lo, var_hi=args.var_hi, seed=args.seed,
    )
    world = gen_world(spec)
    save_world(world, _out_path(args.out, args.force))
    log.info("gen-world out=%s attempts=%d", args.out, world.attempts)
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    world = load_world(args.world)
    seqs = gen_dataset(
        world, args.source, args.n_seq, args.seq_len,
        substream(args.seed, PURPOSE_DATA),
    )
    save_dataset(seqs, _out_path(args.out, args.force), world.spec.n_labels)
    n_frames = sum(len(s) for s in seqs)
    log.info("gen-data out=%s source=%s sequences=%d frames=%d",
             args.out, args.source, len(seqs), n_frames)
    return 0


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _cmd_train(args: argparse.Namespace) -> int:
    kwargs: dict = {}
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        unknown = sorted(set(doc) - _TRAIN_FIELDS)
        if unknown:
            raise UsageError(f"unknown training config keys: {', '.join(unknown)}")
        for key in ("hidden", "residual_hidden"):
            if key in doc:
                doc[key] = tuple(doc[key])
        kwargs = doc
    kwargs["seed"] = args.seed
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    cfg = TrainConfig(**kwargs)
    seqs, _, n_labels = load_dataset(args.data)
    sched = _schedule_from_args(args)
    out = _out_path(args.out, args.force)
    bundle, curve = train(
        cfg, seqs, sched, substream(cfg.seed, PURPOSE_TRAIN), n_labels=n_labels,
        progress=lambda epoch, loss: log.info("epoch=%d mean_loss=%.6g", epoch, loss),
    )
    save_model(out, bundle, sched)
    log.info("train out=%s epochs=%d final_loss=%.6g", out, cfg.epochs,
             curve[-1] if curve else float("nan"))
    return 0


def _load_model_or_exact(args: argparse.Namespace):
    if args.model == "exact":
        return None, _schedule_from_args(args)
    bundle, sched = load_model(args.model)
    _reject_schedule_flags(args)
    return bundle, sched


def _cmd_convert(args: argparse.Namespace) -> int:
    world = load_world(args.world)
    seqs, dim, n_labels = load_dataset(args.data)
    if dim != world.spec.dim:
        raise UsageError(f"dataset dim {dim} does not match world dim {world.spec.dim}")
    bundle, sched = _load_model_or_exact(args)
    if bundle is not None and bundle.theta.dim != dim:
        raise UsageError(f"model dim {bundle.theta.dim} does not match dataset dim {dim}")
    out = _out_path(args.out, args.force)
    diag_path = None
    if args.diagnostics is not None:
        diag_path = _out_path(args.diagnostics, args.force)
    ctx = build_context(world, sched, bundle)
    cfg = SamplerConfig(
        t_start=args.t_start,
        eps_source="exact" if bundle is None else "model",
        seed=args.seed,
        predict_residual=bundle is not None,
        snap=not args.no_snap,
    )
    results = convert_sequences(seqs, ctx, cfg, threads=args.threads)
    save_dataset([seq for seq, _ in results], out, n_labels)
    if diag_path is not None:
        with open(diag_path, "w", encoding="utf-8") as fh:
            fh.write("id,t_start,identity_l2,native_prob\n")
            for _, d in results:
                fh.write(f"{d.id},{d.t_start},{d.identity_l2:.17g},{d.native_prob:.17g}\n")
    total = sum(d.n_frames for _, d in results)
    mean_l2 = sum(d.identity_l2 * d.n_frames for _, d in results) / total
    mean_prob = sum(d.native_prob * d.n_frames for _, d in results) / total
    log.info("convert out=%s t_start=%d frames=%d identity_l2=%.4f native_prob=%.4f",
             out, args.t_start, total, mean_l2, mean_prob)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    world = load_world(args.world)
    bundle, sched = _load_model_or_exact(args)
    t_starts = _parse_int_list(args.t_starts, "--t-starts")
    out = _out_path(args.out, args.force)
    table = sweep(
        world, bundle, t_starts, args.n_seq, args.seq_len, args.seed, sched,
        snap=not args.no_snap, stratify_labels=args.stratify_labels,
        threads=args.threads,
    )
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(table.to_csv())
    for row in table.rows:
        log.info("sweep t_start=%d identity_l2=%.4f native_prob=%.4f",
                 row.t_start, row.identity_l2, row.native_prob)
    return 0


def _cmd_posterior(args: argparse.Namespace) -> int:
    world = load_world(args.world)
    sched = _schedule_from_args(args)
    t_starts = _parse_int_list(args.t_starts, "--t-starts")
    out_dir = Path(args.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise UsageError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    if args.grid_lo is None or args.grid_hi is None:
        m1 = marginal_1d(world.native, args.dim)
        sd = float(np.sqrt(m1.variances.max()))
        lo = min(float(m1.means.min()), args.x0) - 8.0 * sd
        hi = max(float(m1.means.max()), args.x0) + 8.0 * sd
    if args.grid_lo is not None:
        lo = args.grid_lo
    if args.grid_hi is not None:
        hi = args.grid_hi
    grid = np.linspace(lo, hi, args.grid_points)
    posterior_curves(world, args.label, args.x0, t_starts, grid, sched,
              dim=args.dim, out_dir=str(out_dir))
    log.info("posterior out_dir=%s curves=%d grid=[%.3f, %.3f]",
             out_dir, len(t_starts), lo, hi)
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    results = run_suites(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="priorshift",
        description="Latent-frame accent conversion by partial diffusion toward a native prior.",
    )
    parser.add_argument(
        "--version", action="version",
        version=f"priorshift {__version__} (model format {MODEL_MAGIC!r}, "
                f"world format {WORLD_MAGIC!r})",
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="draw a synthetic pair of priors plus codebook")
    p.add_argument("--out", required=True, help="world JSON path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--labels", type=int, default=16)
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--h-noise", type=float, default=0.05)
    p.add_argument("--l2-shift", type=float, default=1.5)
    p.add_argument("--mean-scale", type=float, default=2.0)
    p.add_argument("--var-lo", type=float, default=0.5)
    p.add_argument("--var-hi", type=float, default=1.5)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_gen_world)

    p = sub.add_parser("gen-data", help="sample labeled sequences from a world")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--source", choices=("native", "l2"), default="l2")
    p.add_argument("--n-seq", type=int, default=100)
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit the denoiser and residual head")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    _add_schedule_flags(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("convert", help="translate sequences toward the native prior")
    p.add_argument("--world", required=True)
    p.add_argument("--model", required=True, help="model file path, or 'exact'")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--t-start", type=int, required=True,
                   help="corruption steps before the reverse pass (0..T)")
    p.add_argument("--no-snap", action="store_true", help="skip codebook quantization")
    p.add_argument("--diagnostics", default=None, help="per-sequence metrics CSV path")
    p.add_argument("--threads", type=int, default=1)
    _add_schedule_flags(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("sweep", help="trade-off table across start steps")
    p.add_argument("--world", required=True)
    p.add_argument("--model", required=True, help="model file path, or 'exact'")
    p.add_argument("--out", required=True, help="summary CSV path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--t-starts", default="0,25,50,75,100")
    p.add_argument("--n-seq", type=int, default=40)
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--no-snap", action="store_true")
    p.add_argument("--stratify-labels", action="store_true",
                   help="average per-label means instead of pooled frames")
    p.add_argument("--threads", type=int, default=1)
    _add_schedule_flags(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("posterior", help="tabulate 1-D clean-frame posteriors")
    p.add_argument("--world", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--label", type=int, default=0)
    p.add_argument("--dim", type=int, default=0, help="coordinate of the prior to use")
    p.add_argument("--x0", type=float, required=True, help="shifted frame value to explain")
    p.add_argument("--t-starts", default="1,25,50,75,100")
    p.add_argument("--grid-lo", type=float, default=None)
    p.add_argument("--grid-hi", type=float, default=None)
    p.add_argument("--grid-points", type=int, default=2001)
    _add_schedule_flags(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_posterior)

    p = sub.add_parser("verify", help="run the built-in oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        stream=sys.stderr, format="%(levelname)s %(message)s", force=True,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
