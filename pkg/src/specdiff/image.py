"""Mel-spectrogram <-> image-space transforms.

The float path (global mean/std normalization) is lossless; the 8-bit
per-spectrogram min-max path is the deliberately lossy baseline kept
around for A/B comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import DspConfig, MelSpectrogram

__all__ = [
    "MelStats",
    "SpectroImage",
    "compute_dataset_stats",
    "normalize_global",
    "denormalize_global",
    "pack_rgb",
    "unpack_rgb",
    "quantize_lossy",
    "dequantize_lossy",
    "save_stats",
    "load_stats",
    "export_png",
]


class DegenerateStatsError(ValueError):
    """Dataset statistics with zero spread cannot normalize anything."""


@dataclass(frozen=True)
class MelStats:
    """Global dataset statistics: mean, standard deviation, contrast factor k,
    and (optionally) the observed value range of the corpus."""

    mean: float
    std: float
    scale_k: float = 3.0
    source_count: int = 1
    mel_min: float | None = None
    mel_max: float | None = None

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateStatsError(f"std must be > 0, got {self.std}")
        if not self.scale_k > 0:
            raise ValueError("scale_k must be > 0")
        if self.source_count < 1:
            raise ValueError("source_count must be >= 1")
        if (self.mel_min is None) != (self.mel_max is None):
            raise ValueError("mel_min and mel_max must be set together")
        if self.mel_min is not None and not self.mel_min < self.mel_max:
            raise ValueError("need mel_min < mel_max")


@dataclass(frozen=True)
class SpectroImage:
    """c x d x l float image; c is 1 (grayscale) or 3 (channel-replicated)."""

    values: np.ndarray
    stats: MelStats | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] not in (1, 3):
            raise ValueError(f"expected (c,d,l) with c in {{1,3}}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def compute_dataset_stats(mels, scale_k: float = 3.0) -> MelStats:
    """Two-pass mean/std over every value of every mel in the iterable."""
    mels = list(mels)
    if not mels:
        raise ValueError("empty corpus manifest")
    count = sum(m.values.size for m in mels)
    mean = sum(float(np.sum(m.values)) for m in mels) / count
    sq = sum(float(np.sum((m.values - mean) ** 2)) for m in mels)
    std = float(np.sqrt(sq / count))
    if std <= 0:
        raise DegenerateStatsError("corpus has zero variance")
    return MelStats(mean=mean, std=std, scale_k=scale_k, source_count=len(mels),
                    mel_min=min(float(m.values.min()) for m in mels),
                    mel_max=max(float(m.values.max()) for m in mels))


def normalize_global(mel: MelSpectrogram, stats: MelStats) -> SpectroImage:
    """(x - mean) / (k * std); no clamping, so the map is invertible."""
    img = (mel.values - stats.mean) / (stats.scale_k * stats.std)
    return SpectroImage(img[None, :, :], stats=stats)


def denormalize_global(img: SpectroImage, stats: MelStats, cfg: DspConfig) -> MelSpectrogram:
    v = img.values
    if v.shape[0] == 3:
        v = v.mean(axis=0, keepdims=True)
    mel = v[0] * (stats.scale_k * stats.std) + stats.mean
    return MelSpectrogram(mel, cfg)


def pack_rgb(img: SpectroImage) -> SpectroImage:
    if img.channels != 1:
        raise ValueError(f"pack_rgb expects 1 channel, got {img.channels}")
    return SpectroImage(np.repeat(img.values, 3, axis=0), stats=img.stats)


def unpack_rgb(img: SpectroImage) -> SpectroImage:
    if img.channels != 3:
        raise ValueError(f"unpack_rgb expects 3 channels, got {img.channels}")
    v = img.values
    # channel-replicated images unpack bit-exactly; (3a)/3 would round
    if np.array_equal(v[0], v[1]) and np.array_equal(v[1], v[2]):
        return SpectroImage(v[:1], stats=img.stats)
    return SpectroImage(v.mean(axis=0, keepdims=True), stats=img.stats)


# ---------------------------------------------------------------------------
# Lossy per-spectrogram 8-bit baseline
# ---------------------------------------------------------------------------

def quantize_lossy(mel: MelSpectrogram):
    """Per-spectrogram min-max map onto {0..255}. Returns (uint8 image, lo, hi)."""
    lo = float(np.min(mel.values))
    hi = float(np.max(mel.values))
    if hi <= lo:
        raise ValueError("mel has zero dynamic range; nothing to quantize")
    img8 = np.round((mel.values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return img8, lo, hi


def dequantize_lossy(img8: np.ndarray, lo: float, hi: float, cfg: DspConfig) -> MelSpectrogram:
    mel = img8.astype(np.float64) / 255.0 * (hi - lo) + lo
    return MelSpectrogram(mel, cfg)


# ---------------------------------------------------------------------------
# Persistence / export
# ---------------------------------------------------------------------------

def save_stats(stats: MelStats, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"mean\t{stats.mean!r}",
        f"std\t{stats.std!r}",
        f"k\t{stats.scale_k!r}",
        f"count\t{stats.source_count}",
    ]
    if stats.mel_min is not None:
        lines += [f"min\t{stats.mel_min!r}", f"max\t{stats.mel_max!r}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_stats(path) -> MelStats:
    fields = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("\t")
        fields[key] = value
    return MelStats(
        mean=float(fields["mean"]),
        std=float(fields["std"]),
        scale_k=float(fields["k"]),
        source_count=int(fields["count"]),
        mel_min=float(fields["min"]) if "min" in fields else None,
        mel_max=float(fields["max"]) if "max" in fields else None,
    )


def export_png(img: SpectroImage, path) -> None:
    """Clamp [-1,1] -> {0..255} and write a PNG. Visualization only."""
    from PIL import Image

    v = np.clip(img.values, -1.0, 1.0)
    v8 = np.round((v + 1.0) / 2.0 * 255.0).astype(np.uint8)
    # mel row 0 is the lowest band; draw it at the bottom of the figure
    v8 = v8[:, ::-1, :]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if img.channels == 1:
        Image.fromarray(v8[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(v8, 0, -1), mode="RGB").save(path)
