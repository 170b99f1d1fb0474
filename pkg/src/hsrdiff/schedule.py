"""Diffusion schedule math: noise tables, forward noising, posterior, reverse sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import Rng

DenoiseFn = Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]

VARIANCES = ("beta", "posterior")


@dataclass
class NoiseSchedule:
    """Per-step retention ``alpha[t-1]`` (t = 1..T) and cumulative ``gamma[t]`` with gamma[0] = 1."""

    alpha: np.ndarray
    gamma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    @classmethod
    def from_alpha(cls, alpha) -> "NoiseSchedule":
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.ndim != 1 or len(alpha) < 1:
            raise ValueError("alpha must be a non-empty vector")
        if np.any(alpha <= 0) or np.any(alpha >= 1):
            raise ValueError("every alpha must lie in (0, 1)")
        gamma = np.concatenate([[1.0], np.cumprod(alpha)])
        return cls(alpha=alpha, gamma=gamma)


@dataclass
class PosteriorParams:
    mean: np.ndarray
    var: float


@dataclass
class InferenceSchedule:
    """Rows ``(gamma_t, gamma_prev, alpha_t)`` for s = 1..S; gamma_t strictly decreasing down the rows.

    ``indices`` holds the training-schedule step each row was taken from.
    """

    steps: np.ndarray
    indices: np.ndarray

    @property
    def S(self) -> int:
        return len(self.steps)


def build_training_schedule(T: int = 2000, beta_start: float = 1e-6, beta_end: float = 1e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule.from_alpha(1.0 - betas)


def sample_gamma(schedule: NoiseSchedule, rng: Rng) -> tuple[int, float]:
    """Two-stage draw: t ~ U{1..T}, then gamma ~ U(gamma_t, gamma_{t-1})."""
    t = int(rng.integers(1, schedule.T + 1))
    lo, hi = schedule.gamma[t], schedule.gamma[t - 1]
    while True:
        g = float(rng.uniform(lo, hi))
        if lo < g < hi:
            return t, g


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_marginal(z0, gamma: float, eps) -> np.ndarray:
    z0, eps = np.asarray(z0), np.asarray(eps)
    _check_same(z0, eps, "forward_marginal")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    return math.sqrt(gamma) * z0 + math.sqrt(1.0 - gamma) * eps


def forward_step(z_prev, alpha_t: float, eps) -> np.ndarray:
    z_prev, eps = np.asarray(z_prev), np.asarray(eps)
    _check_same(z_prev, eps, "forward_step")
    if not 0 < alpha_t < 1:
        raise ValueError(f"alpha_t must lie in (0, 1), got {alpha_t}")
    return math.sqrt(alpha_t) * z_prev + math.sqrt(1.0 - alpha_t) * eps


def _posterior_coefficients(gamma_t: float, gamma_prev: float, alpha_t: float) -> tuple[float, float, float]:
    if not gamma_t < 1:
        raise ValueError(f"posterior undefined at gamma_t = {gamma_t}")
    denom = 1.0 - gamma_t
    c0 = math.sqrt(gamma_prev) * (1.0 - alpha_t) / denom
    ct = math.sqrt(alpha_t) * (1.0 - gamma_prev) / denom
    var = (1.0 - gamma_prev) * (1.0 - alpha_t) / denom
    return c0, ct, var


def posterior_params(z0, zt, t: int, s: NoiseSchedule) -> PosteriorParams:
    """Mean and variance of q(z_{t-1} | z_0, z_t)."""
    z0, zt = np.asarray(z0), np.asarray(zt)
    _check_same(z0, zt, "posterior_params")
    if not 1 <= t <= s.T:
        raise ValueError(f"t must lie in 1..{s.T}, got {t}")
    c0, ct, var = _posterior_coefficients(s.gamma[t], s.gamma[t - 1], s.alpha[t - 1])
    return PosteriorParams(mean=c0 * z0 + ct * zt, var=max(var, 0.0))


def refinement_step(zt, z0_hat, step, eps, variance: str = "beta") -> np.ndarray:
    """One reverse update z_t -> z_{t-1} given a clean-image estimate.

    ``variance="beta"`` scales the noise by sqrt(beta_t) = sqrt(1 - alpha_t); ``"posterior"``
    uses the posterior standard deviation instead.
    """
    zt, z0_hat, eps = np.asarray(zt), np.asarray(z0_hat), np.asarray(eps)
    _check_same(zt, z0_hat, "refinement_step")
    _check_same(zt, eps, "refinement_step")
    gamma_t, gamma_prev, alpha_t = (float(v) for v in step)
    c0, ct, var = _posterior_coefficients(gamma_t, gamma_prev, alpha_t)
    if variance == "beta":
        sigma = math.sqrt(1.0 - alpha_t)
    elif variance == "posterior":
        sigma = math.sqrt(max(var, 0.0))
    else:
        raise ValueError(f"unknown variance mode {variance!r}; expected one of {VARIANCES}")
    return c0 * z0_hat + ct * zt + sigma * eps


def build_inference_schedule(train: NoiseSchedule, S: int = 100) -> InferenceSchedule:
    """Pick S training steps whose gammas best follow a linear ramp from gamma_1 down to gamma_T.

    Targets are snapped to the training table under a strictly-increasing-index
    constraint, so S == T returns the training sequence itself.
    """
    T = train.T
    if not 1 <= S <= T:
        raise ValueError(f"S must lie in 1..{T}, got {S}")
    table = train.gamma[1:]
    targets = np.linspace(table[-1], table[0], S)[::-1]
    idx = np.empty(S, dtype=np.int64)
    lo = 0
    for s in range(S):
        hi = T - (S - s)  # leave room for the remaining picks
        window = table[lo:hi + 1]
        j = lo + int(np.argmin(np.abs(window - targets[s])))
        idx[s] = j
        lo = j + 1
    gammas = table[idx]
    prev = np.concatenate([[1.0], gammas[:-1]])
    steps = np.stack([gammas, prev, gammas / prev], axis=1)
    return InferenceSchedule(steps=steps, indices=idx + 1)


def sample(model: DenoiseFn, x, y, infer: InferenceSchedule, rng: Rng, *,
           shape: Optional[tuple[int, int, int]] = None, variance: str = "beta",
           clip: bool = True, dtype=np.float64,
           on_step: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Run the reverse chain from pure noise.

    ``shape`` defaults to (bands of y, height of x, width of x). ``on_step(s, z)``
    is called after each update with the remaining step count ``s - 1``.
    """
    x, y = np.asarray(x), np.asarray(y)
    if shape is None:
        shape = (y.shape[0], x.shape[1], x.shape[2])
    z = rng.normal(shape, dtype=dtype)
    for s in range(infer.S, 0, -1):
        step = infer.steps[s - 1]
        z0_hat = np.asarray(model(x, y, z, float(step[0])), dtype=dtype)
        if clip:
            z0_hat = np.clip(z0_hat, 0.0, 1.0)
        eps = rng.normal(shape, dtype=dtype) if s > 1 else np.zeros(shape, dtype=dtype)
        z = refinement_step(z, z0_hat, step, eps, variance=variance).astype(dtype, copy=False)
        if on_step is not None:
            on_step(s - 1, z)
    return np.clip(z, 0.0, 1.0) if clip else z
