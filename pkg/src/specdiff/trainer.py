"""Training loops: dataset preparation, LDM training, image pretraining."""

from __future__ import annotations

import numpy as np
import torch

from .audio import TRAIN_DSP, compute_mel, read_wav
from .autoencoder import train_autoencoder
from .corpus import read_manifest, render_toy_image
from .diffusion import training_loss
from .image import compute_dataset_stats, normalize_global, pack_rgb
from .pipeline import Pipeline

__all__ = [
    "load_audio_dataset",
    "load_image_dataset",
    "prepare_pipeline_data",
    "train_ldm",
]


def load_audio_dataset(manifest_path, cfg=TRAIN_DSP, duration: float = 2.56):
    """(captions, mels) from a corpus directory's manifest."""
    records = read_manifest(manifest_path, duration)
    root = manifest_path.parent if hasattr(manifest_path, "parent") else None
    from pathlib import Path

    root = Path(manifest_path).parent
    captions, mels = [], []
    target = int(round(duration * cfg.sample_rate))
    for sample_id, clip in records:
        wav = read_wav(root / f"{sample_id}.wav").padded_to(target)
        captions.append(clip.caption)
        mels.append(compute_mel(wav, cfg))
    return captions, mels


def load_image_dataset(manifest_path, duration: float = 2.56, height: int = 64, width: int = 256):
    """(captions, images) regenerated deterministically from the manifest."""
    records = read_manifest(manifest_path, duration)
    captions, images = [], []
    for _sample_id, clip in records:
        img = render_toy_image(clip.caption, np.random.default_rng([clip.seed, 2]),
                               height=height, width=width, duration=duration)
        captions.append(clip.caption)
        images.append(img)
    return captions, images


def prepare_pipeline_data(pipe: Pipeline, captions, mels, stats=None):
    """Compute/attach stats, build image tensors, encode to latents."""
    if stats is None:
        stats = compute_dataset_stats(mels)
    pipe.stats = stats
    images = []
    for mel in mels:
        images.append(pipe.mel_to_image(mel).values)
    image_tensor = torch.from_numpy(np.stack(images)).float()
    return captions, image_tensor


def encode_latents(pipe: Pipeline, image_tensor: torch.Tensor, batch: int = 16) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([
            pipe.ae.encode(image_tensor[i:i + batch])
            for i in range(0, len(image_tensor), batch)
        ])


def train_ldm(pipe: Pipeline, latents: torch.Tensor, captions, steps: int,
              batch_size: int = 8, lr: float = 2e-4, seed: int = 0, drop_p: float = 0.1,
              val_fraction: float = 0.0, val_every: int = 500, log_every: int = 0):
    """Joint U-Net + text-encoder training on precomputed latents.

    Returns (loss_history, val_history) where val_history is a list of
    (step, validation loss) pairs.
    """
    params = list(pipe.unet.parameters())
    params += list(pipe.encoder_a.parameters()) + list(pipe.encoder_b.parameters())
    optimizer = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(seed)

    n = len(latents)
    n_val = int(n * val_fraction)
    order = np.random.default_rng(seed + 1).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]

    history, val_history = [], []
    for step in range(steps):
        idx = train_idx[rng.integers(0, len(train_idx), size=min(batch_size, len(train_idx)))]
        conds = [pipe.encode_caption(captions[i]) for i in idx]
        optimizer.zero_grad()
        loss = training_loss(pipe.unet, latents[idx], conds, pipe.schedule, rng, drop_p=drop_p)
        loss.backward()
        optimizer.step()
        history.append(float(loss.item()))
        if n_val and (step + 1) % val_every == 0:
            val_history.append((step + 1, validation_loss(pipe, latents[val_idx],
                                                          [captions[i] for i in val_idx],
                                                          seed=seed + 7)))
        if log_every and (step + 1) % log_every == 0:
            print(f"ldm step {step + 1}/{steps} loss {np.mean(history[-log_every:]):.5f}")
    return history, val_history


def validation_loss(pipe: Pipeline, latents: torch.Tensor, captions, seed: int = 0,
                    n_draws: int = 4) -> float:
    """Deterministic conditional noise-prediction loss on held-out latents."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_draws):
            conds = [pipe.encode_caption(c) for c in captions]
            loss = training_loss(pipe.unet, latents, conds, pipe.schedule, rng, drop_p=0.0)
            total += float(loss.item())
    return total / n_draws
