"""Command line: generate / train / fuse / evaluate.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric failure.
``HSRDIFF_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .cdformer import CDFormer, init_params, param_count
from .config import ConfigError, RunConfig, load_config
from .degradation import (CubeFormatError, HsiCube, crop_to_factor, default_response, load_cube,
                          load_response, make_pair, save_cube, save_response, synthesize_scene)
from .metrics import evaluate, mean_report
from .numerics import Rng
from .schedule import build_inference_schedule, build_training_schedule, sample
from .training import NumericError, OptimState, Sample, progressive_schedule, run_training

log = logging.getLogger("hsrdiff")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ValidationError(ValueError):
    pass


def _threads():
    n = os.environ.get("HSRDIFF_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _echo(cfg: RunConfig) -> None:
    s = cfg.scene
    print(f"config: seed={cfg.seed} bands={s.bands} msi_bands={cfg.msi_bands} size={s.height}x{s.width} "
          f"endmembers={s.endmembers} smoothness={s.smoothness} factor={cfg.factor}")


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    _echo(cfg)
    out = cfg.data_dir
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(cfg.seed)
    z = crop_to_factor(synthesize_scene(cfg.scene, root.spawn("data")), cfg.factor)
    # quantise to the on-disk precision first so every product derives from the stored reference
    z = HsiCube(z.data.astype(np.float32).astype(np.float64))
    save_response(out / "response.srsp", default_response(cfg.msi_bands, cfg.scene.bands))
    r = load_response(out / "response.srsp")
    x, y, z = make_pair(z, r, cfg.degradation())
    for name, cube in (("z", z), ("x", x), ("y", y)):
        save_cube(out / f"{name}.hcube", cube)
        print(f"{name}: {cube.bands} bands, {cube.height}x{cube.width}")
    return EXIT_OK


def _load_dataset(cfg: RunConfig):
    d = cfg.data_dir
    z, x, y = (load_cube(d / f"{n}.hcube").data for n in ("z", "x", "y"))
    r = load_response(d / "response.srsp")
    if x.shape[0] != r.msi_bands or z.shape[0] != r.bands or y.shape[0] != z.shape[0]:
        raise ValidationError("dataset band counts disagree with the spectral response")
    if y.shape[1] * cfg.factor != z.shape[1] or y.shape[2] * cfg.factor != z.shape[2]:
        raise ValidationError(f"LR cube {y.shape} does not match HR {z.shape} at factor {cfg.factor}")
    f64 = np.float64
    return [Sample(x.astype(f64), y.astype(f64), z.astype(f64))], r


def _stage_plan(cfg: RunConfig, model_cfg, full: int) -> list[str]:
    lines, last = [], None
    for epoch in range(cfg.train.epochs):
        patch, trainable = progressive_schedule(cfg.train, epoch, model_cfg, full)
        key = (patch, len(trainable))
        if key != last:
            lines.append(f"from epoch {epoch}: patch {patch}x{patch}, {len(trainable)} trainable tensors")
            last = key
    return lines


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.dry_run:
        # planned from the config alone, so it works before `generate`
        model_cfg = cfg.model_config()
        print(f"parameters: {param_count(init_params(model_cfg, Rng(cfg.seed).spawn('init')))}")
        for line in _stage_plan(cfg, model_cfg, min(cfg.scene.height, cfg.scene.width)):
            print(line)
        return EXIT_OK
    dataset, r = _load_dataset(cfg)
    d = cfg.degradation()
    z0 = dataset[0].z
    model_cfg = cfg.model_config(bands=z0.shape[0], msi_bands=r.msi_bands)
    root = Rng(cfg.seed)
    if args.resume and cfg.checkpoint.exists():
        state = ckpt.load_checkpoint(cfg.checkpoint)
        if state.cfg != model_cfg:
            raise ValidationError("checkpoint model config differs from the run config")
        params, opt, schedule = state.params, state.opt, state.schedule
        print(f"resuming from step {opt.step}")
    else:
        params = init_params(model_cfg, root.spawn("init"))
        opt = OptimState.for_params(params)
        schedule = build_training_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

    tc = cfg.train
    stop = None if args.max_epochs is None else args.max_epochs * tc.steps_per_epoch
    cfg.log.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume and opt.step > 0 else "w"
    with open(cfg.log, mode) as logf:
        def on_step(epoch, step, loss, patch):
            logf.write(f"{epoch} {step} {loss:.17g} {tc.lr:g} {patch}\n")

        def on_epoch_end(epoch, step):
            if (epoch + 1) % cfg.checkpoint_every == 0:
                logf.flush()
                ckpt.save_checkpoint(cfg.checkpoint, model_cfg, params, opt, schedule)

        losses = run_training(params, opt, dataset, schedule, tc, model_cfg, r, d, root.spawn("train"),
                              start_step=opt.step, stop_step=stop, on_step=on_step,
                              on_epoch_end=on_epoch_end)
    ckpt.save_checkpoint(cfg.checkpoint, model_cfg, params, opt, schedule)
    if losses:
        print(f"trained {len(losses)} steps; final loss {losses[-1]:.6f}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    state = ckpt.load_checkpoint(args.checkpoint)
    x, y = load_cube(args.x).data, load_cube(args.y).data
    mc = state.cfg
    if x.shape[0] != mc.msi_bands or y.shape[0] != mc.bands:
        raise ValidationError(f"checkpoint expects {mc.msi_bands}/{mc.bands} bands, "
                              f"got x with {x.shape[0]} and y with {y.shape[0]}")
    if x.shape[1] % y.shape[1] or x.shape[2] % y.shape[2]:
        raise ValidationError(f"x {x.shape[1:]} is not an integer multiple of y {y.shape[1:]}")
    steps, variance, clip = 100, "beta", True
    if args.config:
        run_cfg = load_config(args.config)
        steps, variance, clip = run_cfg.sample_steps, run_cfg.variance, run_cfg.clip
    steps = args.steps if args.steps is not None else steps
    variance = args.variance or variance
    if not 1 <= steps <= state.schedule.T:
        raise ValidationError(f"--steps must lie in 1..{state.schedule.T}")
    dt = mc.np_dtype
    x, y = x.astype(dt), y.astype(dt)
    infer = build_inference_schedule(state.schedule, steps)
    model = CDFormer(mc, state.params)
    out = Path(args.out)

    def on_step(remaining, z):
        if args.save_trajectory and remaining % args.save_trajectory == 0 and remaining > 0:
            save_cube(out.with_name(f"{out.stem}_t{remaining:04d}{out.suffix}"), np.clip(z, 0, 1))

    fused = sample(model, x, y, infer, Rng(args.seed).spawn("sampling"), variance=variance, clip=clip,
                   dtype=dt, on_step=on_step)
    save_cube(out, fused)
    print(f"fused {fused.shape[0]} bands, {fused.shape[1]}x{fused.shape[2]} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    paths = args.cubes
    if len(paths) % 2:
        raise ValidationError("evaluate takes REF EST pairs")
    reports = []
    for ref_path, est_path in zip(paths[0::2], paths[1::2]):
        ref, est = load_cube(ref_path).data, load_cube(est_path).data
        if ref.shape != est.shape:
            raise ValidationError(f"shape mismatch: {ref_path} {ref.shape} vs {est_path} {est.shape}")
        rep = evaluate(ref, est, args.factor)
        reports.append(rep)
        print(rep.row(Path(est_path).stem))
    print(mean_report(reports).row("mean"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsrdiff", description="Diffusion-based hyperspectral super-resolution")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a scene and its observation pair")
    g.add_argument("config")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="continue from the configured checkpoint")
    t.add_argument("--dry-run", action="store_true", help="print parameter count and stage plan only")
    t.add_argument("--max-epochs", type=int, help="stop after this many epochs in total")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="sample a fused HR-HSI")
    f.add_argument("checkpoint")
    f.add_argument("x")
    f.add_argument("y")
    f.add_argument("out")
    f.add_argument("--config", help="run config whose [sample] section supplies defaults")
    f.add_argument("--steps", type=int, help="refinement steps (default 100)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--variance", choices=("beta", "posterior"),
                   help="noise scale per step: sqrt(beta_t) (default) or the posterior std")
    f.add_argument("--save-trajectory", type=int, default=0, metavar="K",
                   help="also write every K-th intermediate z_t")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("evaluate", help="PSNR / SSIM / SAM / ERGAS of estimate vs reference")
    e.add_argument("cubes", nargs="+", metavar="REF EST")
    e.add_argument("--factor", type=int, default=4, help="resolution ratio used by ERGAS")
    e.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        with _threads():
            return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CubeFormatError, ckpt.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
