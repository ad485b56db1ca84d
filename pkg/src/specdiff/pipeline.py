"""End-to-end bundle: DSP config, stats, autoencoder, text encoders, U-Net.

Everything downstream of the corpus (sampling, editing, evaluation, the
CLI) talks to this object instead of wiring the pieces up by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import AudioClip, DspConfig, MelSpectrogram, TRAIN_DSP, compute_mel, invert_mel_griffin_lim
from .autoencoder import AutoEncoder, AutoEncoderConfig
from .diffusion import (GuidanceConfig, NoiseSchedule, build_schedule, cfg_predict,
                        strided_deterministic_sample)
from .image import MelStats, SpectroImage, denormalize_global, normalize_global, pack_rgb
from .text import ConditionEmbedding, TextEncoder, ensemble_encode, tokenize
from .unet import UNet, UNetConfig

__all__ = ["Pipeline", "PipelineConfig"]


@dataclass(frozen=True)
class PipelineConfig:
    dsp: DspConfig = TRAIN_DSP
    clip_duration: float = 2.56
    d_tau: int = 64
    unet_widths: tuple = (32, 64, 96)
    ae_scale: int = 4
    ae_hidden: int = 32
    latent_channels: int = 4
    image_channels: int = 3
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    gl_iters: int = 32

    @property
    def mel_shape(self):
        frames = int(round(self.clip_duration * self.dsp.sample_rate)) // self.dsp.hop
        return (self.dsp.n_mels, frames)

    @property
    def latent_shape(self):
        d, l = self.mel_shape
        if self.ae_scale == 1:
            return (self.image_channels, d, l)
        return (self.latent_channels, d // self.ae_scale, l // self.ae_scale)


class Pipeline:
    def __init__(self, config: PipelineConfig = PipelineConfig(), stats: MelStats | None = None,
                 seed: int = 0):
        self.config = config
        self.stats = stats
        self.ae = AutoEncoder(AutoEncoderConfig(
            in_channels=config.image_channels,
            latent_channels=config.latent_channels,
            hidden=config.ae_hidden,
            scale=config.ae_scale,
        ), seed=seed)
        self.encoder_a = TextEncoder(config.d_tau, seed=seed + 1)
        self.encoder_b = TextEncoder(config.d_tau, seed=seed + 2)
        self.unet = UNet(UNetConfig(
            in_channels=config.latent_shape[0],
            widths=config.unet_widths,
            d_tau=config.d_tau,
        ), seed=seed + 3)
        self.schedule: NoiseSchedule = build_schedule(config.T, config.beta_start, config.beta_end)

    # -- conditioning ------------------------------------------------------

    def encode_caption(self, caption: str) -> ConditionEmbedding:
        return ensemble_encode(tokenize(caption), self.encoder_a, self.encoder_b)

    # -- feature-space transforms -----------------------------------------

    def mel_to_image(self, mel: MelSpectrogram) -> SpectroImage:
        img = normalize_global(mel, self.stats)
        if self.config.image_channels == 3:
            img = pack_rgb(img)
        return img

    def audio_to_latent(self, clip: AudioClip) -> torch.Tensor:
        mel = compute_mel(clip, self.config.dsp)
        return self.image_to_latent(self.mel_to_image(mel))

    def image_to_latent(self, img: SpectroImage) -> torch.Tensor:
        x = torch.from_numpy(img.values).float().unsqueeze(0)
        with torch.no_grad():
            return self.ae.encode(x)[0]

    def latent_to_mel(self, z: torch.Tensor) -> MelSpectrogram:
        with torch.no_grad():
            x = self.ae.decode(z.unsqueeze(0))[0]
        # static thresholding: guided sampling can overshoot the normalized
        # image range, and denormalization would amplify the overshoot into
        # implausible log-power extremes that drown out everything else
        x = x.clamp(-1.0, 1.0)
        img = SpectroImage(x.double().numpy(), stats=self.stats)
        mel = denormalize_global(img, self.stats, self.config.dsp)
        if self.stats is not None and self.stats.mel_max is not None:
            # tighter threshold when the stats carry the corpus value range:
            # no real clip exceeds it, so anything outside is guidance
            # overshoot that would drown quieter co-events
            mel = MelSpectrogram(
                np.clip(mel.values, self.stats.mel_min, self.stats.mel_max),
                self.config.dsp)
        return mel

    def latent_to_audio(self, z: torch.Tensor, gl_seed: int = 0) -> AudioClip:
        mel = self.latent_to_mel(z)
        return invert_mel_griffin_lim(mel, iters=self.config.gl_iters, seed=gl_seed)

    # -- sampling ----------------------------------------------------------

    def guided_model(self, controller=None):
        """Model callable for the samplers; the controller only sees the
        conditional branch (recording/editing never touches the null pass)."""
        def model(z, t, cond):
            ctrl = None if getattr(cond, "is_null", False) else controller
            return self.unet(z, t, cond, controller=ctrl)
        return model

    def sample_latent(self, caption: str, guidance: GuidanceConfig,
                      controller=None, z_init=None, callback=None) -> torch.Tensor:
        cond = self.encode_caption(caption)
        with torch.no_grad():
            z = strided_deterministic_sample(
                self.guided_model(controller), cond, guidance,
                (1,) + self.config.latent_shape, self.schedule,
                z_init=z_init, callback=callback,
            )
        return z[0]

    def sample_latents_batch(self, captions, guidance: GuidanceConfig) -> torch.Tensor:
        """Sample one latent per caption in a single batched trajectory.

        Per-caption initial noise depends only on (guidance.seed, position),
        so a batch run reproduces the corresponding single runs' z_T.
        """
        from .diffusion import BatchCondition

        conds = torch.stack([self.encode_caption(c).vectors for c in captions])
        rng = np.random.default_rng(guidance.seed)
        z = torch.from_numpy(
            rng.standard_normal((len(captions),) + self.config.latent_shape)
        ).float()
        with torch.no_grad():
            return strided_deterministic_sample(
                self.guided_model(), BatchCondition(conds), guidance,
                z.shape, self.schedule, z_init=z,
            )

    def generate(self, caption: str, guidance: GuidanceConfig, controller=None,
                 gl_seed: int = 0):
        z = self.sample_latent(caption, guidance, controller=controller)
        mel = self.latent_to_mel(z)
        audio = invert_mel_griffin_lim(mel, iters=self.config.gl_iters, seed=gl_seed)
        return audio, mel, z

    # -- persistence -------------------------------------------------------

    def trainable_modules(self):
        return {"unet": self.unet, "encoder_a": self.encoder_a, "encoder_b": self.encoder_b}

    def all_modules(self):
        return {"ae": self.ae, **self.trainable_modules()}
