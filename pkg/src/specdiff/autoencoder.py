"""Small deterministic convolutional autoencoder (pixel <-> latent boundary).

Trained with MSE reconstruction plus an L2 latent penalty instead of a
variational KL term; per-channel latent shift/scale keeps the latent
distribution near unit variance so the diffusion noise schedule stays
meaningful. scale=1 is an exact identity bypass for pixel-space runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = ["AutoEncoderConfig", "AutoEncoder", "ae_train_step", "calibrate_latents", "train_autoencoder"]


@dataclass(frozen=True)
class AutoEncoderConfig:
    in_channels: int = 3
    latent_channels: int = 4
    hidden: int = 32
    scale: int = 4  # spatial downsample factor; 1 = identity bypass


class AutoEncoder(nn.Module):
    def __init__(self, config: AutoEncoderConfig = AutoEncoderConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        torch.manual_seed(seed)
        if config.scale == 1:
            self.identity = True
            self.register_buffer("latent_shift", torch.zeros(config.in_channels))
            self.register_buffer("latent_scale", torch.ones(config.in_channels))
            return
        if config.scale not in (2, 4, 8):
            raise ValueError("scale must be 1, 2, 4 or 8")
        self.identity = False
        n_down = int(np.log2(config.scale))
        h = config.hidden
        enc = [nn.Conv2d(config.in_channels, h, 3, padding=1), nn.SiLU()]
        ch = h
        for _ in range(n_down):
            enc += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1), nn.SiLU()]
            ch *= 2
        enc += [nn.Conv2d(ch, config.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(config.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1), nn.SiLU()]
            ch //= 2
        dec += [nn.Conv2d(ch, config.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        # unit-variance calibration, set after training
        self.register_buffer("latent_shift", torch.zeros(config.latent_channels))
        self.register_buffer("latent_scale", torch.ones(config.latent_channels))

    def _check_dims(self, x):
        if x.shape[-1] % self.config.scale or x.shape[-2] % self.config.scale:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by scale {self.config.scale}"
            )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_dims(x)
        z = x if self.identity else self.encoder(x)
        return (z - self.latent_shift[:, None, None]) / self.latent_scale[:, None, None]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        z = z * self.latent_scale[:, None, None] + self.latent_shift[:, None, None]
        return z if self.identity else self.decoder(z)

    def raw_encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_dims(x)
        return x if self.identity else self.encoder(x)


def ae_train_step(batch: torch.Tensor, model: AutoEncoder, optimizer,
                  latent_penalty: float = 1e-4) -> float:
    """One Adam step on MSE reconstruction + lambda * mean-square latent."""
    optimizer.zero_grad()
    z = model.raw_encode(batch)
    recon = model.decoder(z) if not model.identity else z
    loss = F.mse_loss(recon, batch) + latent_penalty * (z ** 2).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite autoencoder loss: {loss.item()}")
    loss.backward()
    optimizer.step()
    return float(loss.item())


def calibrate_latents(model: AutoEncoder, batches) -> None:
    """Set per-channel shift/scale so encoded latents are ~zero-mean unit-std."""
    if model.identity:
        return
    with torch.no_grad():
        zs = torch.cat([model.raw_encode(b) for b in batches])
        mean = zs.mean(dim=(0, 2, 3))
        std = zs.std(dim=(0, 2, 3)).clamp_min(1e-6)
        model.latent_shift.copy_(mean)
        model.latent_scale.copy_(std)


def train_autoencoder(images: torch.Tensor, model: AutoEncoder, steps: int,
                      batch_size: int = 16, lr: float = 2e-4, seed: int = 0,
                      latent_penalty: float = 1e-4, log_every: int = 0):
    """SGD loop over a fixed in-memory image tensor. Returns loss history."""
    optimizer = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        loss = ae_train_step(images[idx], model, optimizer, latent_penalty)
        history.append(loss)
        if log_every and (step + 1) % log_every == 0:
            print(f"ae step {step + 1}/{steps} loss {np.mean(history[-log_every:]):.5f}")
    calibrate_latents(model, [images[i:i + 16] for i in range(0, len(images), 16)])
    return history
