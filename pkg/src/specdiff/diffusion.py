"""Noise schedule, forward process, training loss, samplers and guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .text import ConditionEmbedding, null_embedding

__all__ = [
    "NoiseSchedule",
    "BatchCondition",
    "GuidanceConfig",
    "build_schedule",
    "q_sample",
    "training_loss",
    "cfg_predict",
    "ddpm_ancestral_step",
    "strided_timesteps",
    "strided_deterministic_sample",
    "ancestral_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """beta_t plus derived alpha / alpha-bar arrays, all 1-indexed via t-1."""

    betas: np.ndarray
    T: int

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) != self.T:
            raise ValueError("betas must be a length-T vector")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ValueError("betas must be non-decreasing")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        if np.any(np.diff(alpha_bars) >= 0) or not np.all((alpha_bars > 0) & (alpha_bars < 1)):
            raise ValueError("alpha_bars must be strictly decreasing in (0, 1)")

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step t (t in 1..T); t=0 returns 1."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


@dataclass
class BatchCondition:
    """Condition container for batched sampling: vectors (B, M, d_tau)."""

    vectors: torch.Tensor
    is_null: bool = False

    @property
    def width(self) -> int:
        return self.vectors.shape[-1]


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 7.5
    steps: int = 100
    sampler: str = "strided_deterministic"
    seed: int = 0

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sampler not in ("ancestral", "strided_deterministic"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(betas, T)


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in 1..{schedule.T}")
    if eps.shape != z0.shape:
        raise ValueError("eps must match z0 shape")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def training_loss(model, batch_z0: torch.Tensor, conditions, schedule: NoiseSchedule,
                  rng: np.random.Generator, drop_p: float = 0.1,
                  dropout_fn=None) -> torch.Tensor:
    """Noise-prediction MSE with per-item random timestep and condition dropout.

    conditions: list of ConditionEmbedding, one per batch item. dropout_fn
    defaults to full-condition dropout with probability drop_p.
    """
    if len(batch_z0) == 0:
        raise ValueError("empty batch")
    if len(conditions) != len(batch_z0):
        raise ValueError("one condition per batch item required")
    b = len(batch_z0)
    ts = rng.integers(1, schedule.T + 1, size=b)
    eps = torch.from_numpy(rng.standard_normal(tuple(batch_z0.shape))).to(batch_z0.dtype)
    dropped = []
    for cond in conditions:
        if dropout_fn is not None:
            cond = dropout_fn(cond, rng)
        elif drop_p > 0 and rng.random() < drop_p:
            cond = null_embedding(cond.vectors.shape[0], cond.width, dtype=cond.vectors.dtype)
        dropped.append(cond.vectors)
    cond_batch = torch.stack(dropped)
    abars = torch.tensor(
        [schedule.alpha_bar(int(t)) for t in ts], dtype=batch_z0.dtype
    ).view(b, *([1] * (batch_z0.ndim - 1)))
    z_t = torch.sqrt(abars) * batch_z0 + torch.sqrt(1.0 - abars) * eps
    pred = model(z_t, torch.from_numpy(ts).long(), cond_batch)
    loss = ((pred - eps) ** 2).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite diffusion training loss")
    return loss


def cfg_predict(model, z_t: torch.Tensor, t: int, cond: ConditionEmbedding,
                w: float) -> torch.Tensor:
    """Classifier-free guidance: (1+w) * eps(cond) - w * eps(null).

    The w=0 and null-condition identities are exact: those paths make a
    single model call and return its output untouched.
    """
    if cond.is_null:
        return model(z_t, t, cond)
    eps_cond = model(z_t, t, cond)
    if w == 0:
        return eps_cond
    eps_uncond = model(z_t, t, BatchCondition(torch.zeros_like(cond.vectors), is_null=True))
    return (1.0 + w) * eps_cond - w * eps_uncond


def ddpm_ancestral_step(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor,
                        schedule: NoiseSchedule, rng: np.random.Generator,
                        sigma_scale: float = 1.0) -> torch.Tensor:
    """One reverse step with fixed variance beta_t (no noise at t=1)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])
    abar = schedule.alpha_bar(t)
    mean = (z_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1 or sigma_scale == 0.0:
        return mean
    noise = torch.from_numpy(rng.standard_normal(tuple(z_t.shape))).to(z_t.dtype)
    return mean + sigma_scale * np.sqrt(beta) * noise


def strided_timesteps(T: int, steps: int):
    """Evenly strided decreasing subset of 1..T, always containing T."""
    if steps > T:
        raise ValueError("steps must be <= T")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return list(ts[::-1])


def strided_deterministic_sample(model, cond: ConditionEmbedding, cfg: GuidanceConfig,
                                 shape, schedule: NoiseSchedule,
                                 z_init: torch.Tensor | None = None,
                                 callback=None) -> torch.Tensor:
    """Deterministic sub-T sampler.

    Each update predicts z0 from the noise estimate and re-noises it to
    the previous selected timestep without injecting fresh noise; the
    seed only fixes z_T.
    """
    if z_init is None:
        rng = np.random.default_rng(cfg.seed)
        z = torch.from_numpy(rng.standard_normal(tuple(shape))).float()
    else:
        z = z_init.clone()
    ts = strided_timesteps(schedule.T, cfg.steps)
    for i, t in enumerate(ts):
        eps_hat = cfg_predict(model, z, t, cond, cfg.w)
        abar_t = schedule.alpha_bar(t)
        z0_hat = (z - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        abar_prev = schedule.alpha_bar(t_prev)
        z = np.sqrt(abar_prev) * z0_hat + np.sqrt(1.0 - abar_prev) * eps_hat
        if callback is not None:
            z = callback(i, t, t_prev, z)
    return z


def ancestral_sample(model, cond: ConditionEmbedding, cfg: GuidanceConfig,
                     shape, schedule: NoiseSchedule,
                     sigma_scale: float = 1.0) -> torch.Tensor:
    """Full-T ancestral sampler (Markov chain reversal with beta_t variance)."""
    rng = np.random.default_rng(cfg.seed)
    z = torch.from_numpy(rng.standard_normal(tuple(shape))).float()
    for t in range(schedule.T, 0, -1):
        eps_hat = cfg_predict(model, z, t, cond, cfg.w)
        z = ddpm_ancestral_step(z, t, eps_hat, schedule, rng, sigma_scale)
    return z
