"""Loss, Adam, patch sampling and the progressive training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .cdformer import ModelConfig, ModelParams, denoise, param_layout
from .degradation import SpatialDegradation, SpectralResponse
from .numerics import Rng, Tensor
from .schedule import NoiseSchedule, forward_marginal, sample_gamma

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a training step produces a non-finite value."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    epochs: int = 10
    steps_per_epoch: int = 100
    progressive_stages: list[tuple[int, int]] = field(default_factory=list)
    full_res_stage: int | None = None
    clip_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be >= 1, epochs >= 0")
        stages = [(int(e), int(p)) for e, p in self.progressive_stages]
        if [e for e, _ in stages] != sorted(e for e, _ in stages):
            raise ValueError("progressive stages must be sorted by start epoch")
        if any(b[1] < a[1] for a, b in zip(stages, stages[1:])):
            raise ValueError("progressive patch sizes must be non-decreasing")
        self.progressive_stages = stages


@dataclass
class Sample:
    """One aligned training triple; ``y_mask`` marks LR pixels usable in the Y-consistency term."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    y_mask: np.ndarray | None = None


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


# --- loss -----------------------------------------------------------------


def _l1_mean(diff: Tensor, mask: np.ndarray | None = None) -> Tensor:
    a = nx.tabs(diff)
    if mask is None:
        return nx.mean(a)
    count = int(mask.sum()) * diff.shape[0]
    if count == 0:
        return Tensor(0.0, dtype=diff.dtype)
    return nx.scale(nx.tsum(a * mask.astype(diff.dtype)), 1.0 / count)


def fusion_loss(z0_hat: Tensor, z0, x, y, r: SpectralResponse, d: SpatialDegradation,
             y_mask: np.ndarray | None = None) -> Tensor:
    """Mean-L1 MSI consistency + mean-L1 LR-HSI consistency + mean-L1 reconstruction error."""
    z0_hat = nx.as_tensor(z0_hat)
    z0, x, y = np.asarray(z0), np.asarray(x), np.asarray(y)
    if z0.shape != z0_hat.shape:
        raise ValueError(f"estimate {z0_hat.shape} and reference {z0.shape} differ in shape")
    bands, h, w = z0_hat.shape
    if x.shape != (r.msi_bands, h, w):
        raise ValueError(f"x shape {x.shape} inconsistent with response and estimate")
    if y.shape != (bands, h // d.factor, w // d.factor):
        raise ValueError(f"y shape {y.shape} inconsistent with degradation and estimate")
    dt = z0_hat.dtype
    rz = nx.matmul(Tensor(r.matrix.astype(dt)), nx.reshape(z0_hat, (bands, h * w)))
    x_term = _l1_mean(nx.reshape(rz, x.shape) - x.astype(dt))
    ah, aw = d.axis_matrix(h).astype(dt), d.axis_matrix(w).astype(dt)
    zd = nx.matmul(nx.matmul(Tensor(ah), z0_hat), Tensor(aw.T.copy()))
    y_term = _l1_mean(zd - y.astype(dt), y_mask)
    z_term = _l1_mean(z0_hat - z0.astype(dt))
    return x_term + y_term + z_term


# --- optimiser ------------------------------------------------------------


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], opt: OptimState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam, in place; ``grads`` may cover a subset of ``params``."""
    opt.step += 1
    bc1 = 1.0 - cfg.beta1 ** opt.step
    bc2 = 1.0 - cfg.beta2 ** opt.step
    for name, g in grads.items():
        p = params[name]
        m, v = opt.m[name], opt.v[name]
        if g.shape != m.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, moments have {m.shape}")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


# --- progressive learning -------------------------------------------------


def frozen_stage_trainable(model_cfg: ModelConfig) -> set[str]:
    """Names updated during the full-resolution stage: the later denoising blocks and the head."""
    n = model_cfg.n_layers
    first = n - math.ceil(n / 2)
    keep = tuple(f"ds.blocks.{l}." for l in range(first, n)) + ("head.",)
    return {name for name, _, _ in param_layout(model_cfg) if name.startswith(keep)}


def progressive_schedule(cfg: TrainConfig, epoch: int, model_cfg: ModelConfig,
                         full_size: int) -> tuple[int, set[str]]:
    """Active (patch size, trainable parameter names) for ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.full_res_stage is not None and epoch >= cfg.full_res_stage:
        return full_size, frozen_stage_trainable(model_cfg)
    everything = {name for name, _, _ in param_layout(model_cfg)}
    if not cfg.progressive_stages:
        return full_size, everything
    size = cfg.progressive_stages[0][1]
    for start, p in cfg.progressive_stages:
        if epoch >= start:
            size = p
    return min(size, full_size), everything


def patch_sampler(dataset: Sequence[Sample], patch_size: int, rng: Rng, d: SpatialDegradation,
                  batch_size: int = 1) -> list[Sample]:
    """Random crops aligned to the LR grid so each HR/LR/MSI triple stays co-registered."""
    f = d.factor
    if patch_size % f:
        raise ValueError(f"patch size {patch_size} is not divisible by factor {f}")
    lp = patch_size // f
    batch = []
    for _ in range(batch_size):
        s = dataset[int(rng.integers(0, len(dataset)))]
        _, h, w = s.z.shape
        if patch_size > min(h, w):
            raise ValueError(f"patch size {patch_size} exceeds image size {h}x{w}")
        if patch_size == h and patch_size == w:
            batch.append(Sample(s.x, s.y, s.z, s.y_mask))
            continue
        i = int(rng.integers(0, h // f - lp + 1))
        j = int(rng.integers(0, w // f - lp + 1))
        hr = (slice(None), slice(i * f, i * f + patch_size), slice(j * f, j * f + patch_size))
        lr = (slice(None), slice(i, i + lp), slice(j, j + lp))
        batch.append(Sample(s.x[hr], s.y[lr], s.z[hr], d.valid_lr_mask(patch_size, patch_size)))
    return batch


# --- training -------------------------------------------------------------


def _non_finite_report(params: ModelParams) -> str:
    bad = [n for n, p in params.items()
           if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad)))]
    return ", ".join(bad) if bad else "no parameter or gradient is non-finite"


def training_step(batch: Sequence[Sample], params: ModelParams, opt: OptimState, schedule: NoiseSchedule,
                  cfg: TrainConfig, model_cfg: ModelConfig, r: SpectralResponse, d: SpatialDegradation,
                  rng: Rng, trainable: set[str] | None = None) -> float:
    """One optimisation step on ``batch``; returns the batch-mean loss before the update."""
    names = set(params) if trainable is None else trainable
    for name, p in params.items():
        p.grad = None
        p.requires_grad = name in names
    total = None
    for k, s in enumerate(batch):
        srng = rng.spawn(k)
        _, gamma = sample_gamma(schedule, srng)
        eps = srng.normal(s.z.shape, dtype=model_cfg.np_dtype)
        zt = forward_marginal(s.z.astype(model_cfg.np_dtype), gamma, eps)
        z_hat = denoise(s.x, s.y, zt, gamma, params, model_cfg)
        term = fusion_loss(z_hat, s.z, s.x, s.y, r, d, s.y_mask)
        total = term if total is None else total + term
    loss = nx.scale(total, 1.0 / len(batch))
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}; suspect parameters: {_non_finite_report(params)}")
    loss.backward()
    grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)
             for n in params if n in names}
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradient in {', '.join(bad)}")
    if cfg.clip_norm:
        clip_global_norm(grads, cfg.clip_norm)
    adam_update(params, grads, opt, cfg)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    return value


def run_training(params: ModelParams, opt: OptimState, dataset: Sequence[Sample], schedule: NoiseSchedule,
                 cfg: TrainConfig, model_cfg: ModelConfig, r: SpectralResponse, d: SpatialDegradation,
                 rng: Rng, start_step: int = 0, stop_step: int | None = None,
                 on_step: Callable[[int, int, float, int], None] | None = None,
                 on_epoch_end: Callable[[int, int], None] | None = None) -> list[float]:
    """Train from global step ``start_step`` up to ``stop_step`` (default: all epochs).

    Every step draws from ``rng.spawn(step)``, so a run resumed at any step with
    restored parameters and moments continues the same trajectory.
    """
    full = min(min(s.z.shape[1:]) for s in dataset)
    total = cfg.epochs * cfg.steps_per_epoch
    stop = total if stop_step is None else min(stop_step, total)
    losses = []
    for step in range(start_step, stop):
        epoch = step // cfg.steps_per_epoch
        patch, trainable = progressive_schedule(cfg, epoch, model_cfg, full)
        srng = rng.spawn(step)
        batch = patch_sampler(dataset, patch, srng.spawn("crop"), d, cfg.batch_size)
        loss = training_step(batch, params, opt, schedule, cfg, model_cfg, r, d, srng.spawn("noise"),
                             trainable)
        losses.append(loss)
        if on_step is not None:
            on_step(epoch, step, loss, patch)
        if on_epoch_end is not None and (step + 1) % cfg.steps_per_epoch == 0:
            on_epoch_end(epoch, step + 1)
    return losses
