"""Audio manipulation procedures: style transfer (partial noising),
inpainting (mask blending), word swap (attention injection) and attention
re-weighting.

All four run on the deterministic strided sampler so that source and
edited trajectories are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .audio import AudioClip
from .diffusion import GuidanceConfig, cfg_predict, q_sample, strided_timesteps
from .pipeline import Pipeline
from .text import L_MAX, tokenize
from .unet import AttentionRecorder

__all__ = [
    "EditRequest",
    "style_transfer",
    "inpaint",
    "word_swap",
    "reweight",
    "AttentionInjector",
    "AttentionReweighter",
]


@dataclass(frozen=True)
class EditRequest:
    kind: str
    prompt: str
    guidance: GuidanceConfig = GuidanceConfig()
    source_prompt: str | None = None   # word swap
    start_fraction: float | None = None  # style transfer n in (0, 1]
    mask_interval: tuple | None = None   # inpaint, seconds
    token: str | None = None             # reweight
    scale: float | None = None           # reweight c > 0
    injection_window: float = 0.8        # word swap, fraction of steps

    def __post_init__(self):
        if self.kind not in ("style_transfer", "inpaint", "word_swap", "reweight"):
            raise ValueError(f"unknown edit kind {self.kind!r}")
        if self.kind == "style_transfer":
            if self.start_fraction is None or not (0 < self.start_fraction <= 1):
                raise ValueError("style transfer needs start fraction n in (0, 1]")
        if self.kind == "inpaint" and self.mask_interval is None:
            raise ValueError("inpaint needs a mask interval")
        if self.kind == "word_swap" and self.source_prompt is None:
            raise ValueError("word swap needs a source prompt")
        if self.kind == "reweight":
            if self.token is None or self.scale is None or self.scale <= 0:
                raise ValueError("reweight needs a token and a scale > 0")
        if not 0 <= self.injection_window <= 1:
            raise ValueError("injection window must be in [0, 1]")


def _reverse_from(pipe: Pipeline, cond, z_start: torch.Tensor, timesteps,
                  w: float, controller=None, callback=None) -> torch.Tensor:
    """Deterministic strided reverse pass over an explicit timestep list."""
    model = pipe.guided_model(controller)
    z = z_start
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            eps_hat = cfg_predict(model, z, t, cond, w)
            abar_t = pipe.schedule.alpha_bar(t)
            z0_hat = (z - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
            t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
            abar_prev = pipe.schedule.alpha_bar(t_prev)
            z = np.sqrt(abar_prev) * z0_hat + np.sqrt(1.0 - abar_prev) * eps_hat
            if callback is not None:
                z = callback(i, t, t_prev, z)
    return z


def style_transfer(pipe: Pipeline, source: AudioClip, req: EditRequest) -> AudioClip:
    """Noise the source to t* = round(n * T) and denoise under the new prompt."""
    n = req.start_fraction
    z0 = pipe.audio_to_latent(source).unsqueeze(0)
    t_star = max(1, int(round(n * pipe.schedule.T)))
    rng = np.random.default_rng(req.guidance.seed)
    eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).float()
    z_start = q_sample(z0, t_star, eps, pipe.schedule)
    ts = [t for t in strided_timesteps(pipe.schedule.T, req.guidance.steps) if t <= t_star]
    if not ts or ts[0] != t_star:
        ts = [t_star] + ts
    cond = pipe.encode_caption(req.prompt)
    z = _reverse_from(pipe, cond, z_start, ts, req.guidance.w)
    return pipe.latent_to_audio(z[0], gl_seed=req.guidance.seed)


def _mask_columns(pipe: Pipeline, interval, width: int) -> torch.Tensor:
    """Boolean width mask: True inside the edited (free) time interval."""
    a, b = interval
    duration = pipe.config.clip_duration
    if not (0 <= a <= b <= duration):
        raise ValueError(f"mask interval {interval} outside clip of {duration}s")
    cols = torch.zeros(width, dtype=torch.bool)
    i0 = int(round(a / duration * width))
    i1 = int(round(b / duration * width))
    cols[i0:i1] = True
    return cols


def inpaint(pipe: Pipeline, source: AudioClip, req: EditRequest) -> AudioClip:
    """Regenerate the masked time interval; outside it the source latent is
    re-imposed at every step, so the unmasked region is preserved by
    construction (up to autoencoder reconstruction error)."""
    z0_src = pipe.audio_to_latent(source).unsqueeze(0)
    width = z0_src.shape[-1]
    free = _mask_columns(pipe, req.mask_interval, width)
    rng = np.random.default_rng(req.guidance.seed)

    def blend(i, t, t_prev, z):
        if t_prev == 0:
            z_src = z0_src
        else:
            eps = torch.from_numpy(rng.standard_normal(tuple(z0_src.shape))).float()
            z_src = q_sample(z0_src, t_prev, eps, pipe.schedule)
        out = z_src.clone()
        out[..., free] = z[..., free]
        return out

    z_init = torch.from_numpy(
        np.random.default_rng(req.guidance.seed + 1).standard_normal(tuple(z0_src.shape))
    ).float()
    ts = strided_timesteps(pipe.schedule.T, req.guidance.steps)
    cond = pipe.encode_caption(req.prompt)
    z = _reverse_from(pipe, cond, z_init, ts, req.guidance.w, callback=blend)
    return pipe.latent_to_audio(z[0], gl_seed=req.guidance.seed)


# ---------------------------------------------------------------------------
# Attention controllers
# ---------------------------------------------------------------------------

class AttentionInjector:
    """Replays a recorded trajectory's score columns for shared tokens.

    Records are consumed in call order; both trajectories must use the
    same timestep list and layer sequence.
    """

    def __init__(self, records, shared_positions, active_timesteps):
        self.records = records
        self.shared = sorted(shared_positions)
        self.active = set(active_timesteps)
        self.pointer = 0

    def process(self, layer, t, scores, hw):
        if self.pointer >= len(self.records):
            raise RuntimeError("attention record stream exhausted")
        rec_layer, rec_t, rec_scores, rec_hw = self.records[self.pointer]
        self.pointer += 1
        if (rec_layer, rec_hw) != (layer, hw):
            raise RuntimeError(
                f"trajectory mismatch: recorded ({rec_layer}, {rec_hw}), got ({layer}, {hw})"
            )
        if t not in self.active or not self.shared:
            return scores
        out = scores.clone()
        out[..., self.shared] = rec_scores[..., self.shared]
        return out


class AttentionReweighter:
    """Scales a token's post-softmax column by c and renormalizes each row."""

    def __init__(self, positions, scale: float):
        self.positions = sorted(positions)
        self.scale = scale

    def process(self, layer, t, scores, hw):
        if self.scale == 1.0 or not self.positions:
            return scores
        out = scores.clone()
        out[..., self.positions] *= self.scale
        return out / out.sum(dim=-1, keepdim=True)


def _token_positions(prompt: str, word: str):
    """Positions of word in the ensemble sequence (both encoder halves)."""
    ids = tokenize(prompt)
    words = prompt.lower().split()[:L_MAX]
    positions = [i for i, w in enumerate(words) if w == word.lower()]
    return [p for i in positions for p in (i, i + L_MAX)], ids


def word_swap(pipe: Pipeline, req: EditRequest):
    """Generate under the source prompt, then regenerate under the edited
    prompt while injecting the source's attention maps for shared tokens
    during the first injection_window fraction of steps."""
    src_words = req.source_prompt.lower().split()
    dst_words = req.prompt.lower().split()
    if len(src_words) != len(dst_words):
        raise ValueError("word swap prompts must have equal length")
    shared = [i for i, (a, b) in enumerate(zip(src_words, dst_words)) if a == b]
    shared_positions = [p for i in shared if i < L_MAX for p in (i, i + L_MAX)]

    ts = strided_timesteps(pipe.schedule.T, req.guidance.steps)
    n_active = int(round(req.injection_window * len(ts)))
    active = ts[:n_active]

    recorder = AttentionRecorder()
    rng = np.random.default_rng(req.guidance.seed)
    z_init = torch.from_numpy(
        rng.standard_normal((1,) + pipe.config.latent_shape)
    ).float()
    z_src = _reverse_from(pipe, pipe.encode_caption(req.source_prompt), z_init.clone(), ts,
                          req.guidance.w, controller=recorder)
    injector = AttentionInjector(recorder.records, shared_positions, active)
    z_dst = _reverse_from(pipe, pipe.encode_caption(req.prompt), z_init.clone(), ts,
                          req.guidance.w, controller=injector)
    src_audio = pipe.latent_to_audio(z_src[0], gl_seed=req.guidance.seed)
    dst_audio = pipe.latent_to_audio(z_dst[0], gl_seed=req.guidance.seed)
    return src_audio, dst_audio, z_src[0], z_dst[0]


def reweight(pipe: Pipeline, req: EditRequest):
    """Generate with one token's attention column scaled by c."""
    positions, _ = _token_positions(req.prompt, req.token)
    if not positions:
        raise ValueError(f"token {req.token!r} not present in prompt {req.prompt!r}")
    controller = AttentionReweighter(positions, req.scale)
    rng = np.random.default_rng(req.guidance.seed)
    z_init = torch.from_numpy(
        rng.standard_normal((1,) + pipe.config.latent_shape)
    ).float()
    ts = strided_timesteps(pipe.schedule.T, req.guidance.steps)
    z = _reverse_from(pipe, pipe.encode_caption(req.prompt), z_init, ts,
                      req.guidance.w, controller=controller)
    return pipe.latent_to_audio(z[0], gl_seed=req.guidance.seed), z[0]
