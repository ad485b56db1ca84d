"""Tiny U-Net noise predictor with per-level cross-attention.

Attention scores can be observed (recorder) or rewritten (controllers
used by the editing procedures) without changing anything else about the
forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "UNetConfig",
    "UNet",
    "AttentionRecorder",
    "sinusoidal_embedding",
    "parameter_count",
]


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    widths: tuple = (32, 64, 96)
    d_tau: int = 64
    temb_dim: int = 64
    groups: int = 8


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """[sin(t * f_k), cos(t * f_k)] at geometric frequencies; t: (B,)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-np.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(torch.float32)


class AttentionRecorder:
    """Collects (layer, timestep, row-normalized scores, spatial shape)."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records = []

    def process(self, layer: int, t, scores: torch.Tensor, hw) -> torch.Tensor:
        if self.enabled:
            self.records.append((layer, t, scores.detach().clone(), hw))
        return scores

    def clear(self):
        self.records = []


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(min(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _CrossAttention(nn.Module):
    """Single-head attention from spatial features to condition tokens."""

    def __init__(self, channels, d_tau, layer_index):
        super().__init__()
        self.layer_index = layer_index
        self.scale = 1.0 / np.sqrt(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(d_tau, channels, bias=False)
        self.to_v = nn.Linear(d_tau, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)

    def forward(self, x, cond, t, controller=None):
        b, c, h, w = x.shape
        feats = x.reshape(b, c, h * w).transpose(1, 2)  # (B, N, C)
        q = self.to_q(feats)
        k = self.to_k(cond)
        v = self.to_v(cond)
        scores = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        if controller is not None:
            scores = controller.process(self.layer_index, t, scores, (h, w))
        out = self.to_out(scores @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    """3-level encoder/decoder with cross-attention at every resolution."""

    def __init__(self, config: UNetConfig = UNetConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        torch.manual_seed(seed)
        w0, w1, w2 = config.widths
        g = config.groups
        td = config.temb_dim
        self.temb_mlp = nn.Sequential(
            nn.Linear(td, td * 2), nn.SiLU(), nn.Linear(td * 2, td)
        )
        self.conv_in = nn.Conv2d(config.in_channels, w0, 3, padding=1)
        self.down_block0 = _ResBlock(w0, w0, td, g)
        self.attn_down0 = _CrossAttention(w0, config.d_tau, 0)
        self.downsample0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.down_block1 = _ResBlock(w1, w1, td, g)
        self.attn_down1 = _CrossAttention(w1, config.d_tau, 1)
        self.downsample1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mid_block1 = _ResBlock(w2, w2, td, g)
        self.attn_mid = _CrossAttention(w2, config.d_tau, 2)
        self.mid_block2 = _ResBlock(w2, w2, td, g)
        self.up_conv1 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.up_block1 = _ResBlock(w1 * 2, w1, td, g)
        self.attn_up1 = _CrossAttention(w1, config.d_tau, 3)
        self.up_conv0 = nn.ConvTranspose2d(w1, w0, 4, stride=2, padding=1)
        self.up_block0 = _ResBlock(w0 * 2, w0, td, g)
        self.attn_up0 = _CrossAttention(w0, config.d_tau, 4)
        self.norm_out = nn.GroupNorm(min(g, w0), w0)
        self.conv_out = nn.Conv2d(w0, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, t, cond, controller=None):
        """z: (B,C,H,W); t: int or (B,) tensor; cond: ConditionEmbedding,
        (M,d_tau) tensor, or (B,M,d_tau) batch."""
        b = z.shape[0]
        if z.shape[2] % 4 or z.shape[3] % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {z.shape}")
        if hasattr(cond, "vectors"):
            cond = cond.vectors
        if cond.ndim == 2:
            cond = cond.unsqueeze(0).expand(b, -1, -1)
        t_tensor = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
        if t_tensor.numel() == 1:
            t_tensor = t_tensor.expand(b)
        t_tag = int(t_tensor[0].item()) if t_tensor.numel() else 0
        dtype = self.conv_in.weight.dtype
        temb = self.temb_mlp(sinusoidal_embedding(t_tensor, self.config.temb_dim).to(dtype))

        h0 = self.conv_in(z)
        h0 = self.down_block0(h0, temb)
        h0 = self.attn_down0(h0, cond, t_tag, controller)
        h1 = self.downsample0(h0)
        h1 = self.down_block1(h1, temb)
        h1 = self.attn_down1(h1, cond, t_tag, controller)
        h2 = self.downsample1(h1)
        h2 = self.mid_block1(h2, temb)
        h2 = self.attn_mid(h2, cond, t_tag, controller)
        h2 = self.mid_block2(h2, temb)
        u1 = self.up_conv1(h2)
        u1 = self.up_block1(torch.cat([u1, h1], dim=1), temb)
        u1 = self.attn_up1(u1, cond, t_tag, controller)
        u0 = self.up_conv0(u1)
        u0 = self.up_block0(torch.cat([u0, h0], dim=1), temb)
        u0 = self.attn_up0(u0, cond, t_tag, controller)
        out = self.conv_out(F.silu(self.norm_out(u0)))
        if not torch.isfinite(out).all():
            self._locate_nonfinite(z, temb, cond, controller)
        return out

    def _locate_nonfinite(self, z, temb, cond, controller):
        names = ["conv_in", "down_block0", "attn_down0", "downsample0",
                 "down_block1", "attn_down1", "downsample1", "mid_block1",
                 "attn_mid", "mid_block2"]
        h = z
        stages = [
            lambda x: self.conv_in(x),
            lambda x: self.down_block0(x, temb),
            lambda x: self.attn_down0(x, cond, 0, None),
            lambda x: self.downsample0(x),
            lambda x: self.down_block1(x, temb),
            lambda x: self.attn_down1(x, cond, 0, None),
            lambda x: self.downsample1(x),
            lambda x: self.mid_block1(x, temb),
            lambda x: self.attn_mid(x, cond, 0, None),
            lambda x: self.mid_block2(x, temb),
        ]
        for name, stage in zip(names, stages):
            h = stage(h)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after layer {name}")
        raise FloatingPointError("non-finite activations in decoder path")


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
