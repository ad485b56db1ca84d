"""Audio I/O and the audio <-> mel-spectrogram boundary.

Everything here is deterministic numpy: WAV read/write, STFT, mel
filterbanks, and Griffin-Lim inversion of log-mel matrices.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "AudioClip",
    "DspConfig",
    "MelSpectrogram",
    "WavFormatError",
    "read_wav",
    "write_wav",
    "mel_filterbank",
    "mel_filterbank_centers",
    "compute_mel",
    "invert_mel_griffin_lim",
    "DEFAULT_DSP",
    "TEST_DSP",
    "TRAIN_DSP",
]


class WavFormatError(ValueError):
    """Raised for WAV files we refuse to read: bad header, stereo, wrong depth."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class AudioClip:
    """Mono audio in [-1, 1] floats."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip is mono: samples must be 1-D")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def padded_to(self, n_samples: int) -> "AudioClip":
        """Zero-pad or truncate to exactly n_samples."""
        s = self.samples
        if len(s) >= n_samples:
            s = s[:n_samples]
        else:
            s = np.concatenate([s, np.zeros(n_samples - len(s))])
        return AudioClip(s, self.sample_rate)


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    n_fft: int = 2048
    win_length: int = 1024
    hop: int = 160
    n_mels: int = 256
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        f_max = self.f_max if self.f_max is not None else self.sample_rate / 2
        object.__setattr__(self, "f_max", float(f_max))
        if self.win_length > self.n_fft:
            raise ValueError("win_length must be <= n_fft")
        if self.hop > self.win_length:
            raise ValueError("hop must be <= win_length")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


# Paper-shape profile: 10.24 s at 16 kHz -> (256, 1024) mel.
DEFAULT_DSP = DspConfig()
# Small profile for unit tests and DSP oracles.
TEST_DSP = DspConfig(n_fft=512, win_length=256, hop=64, n_mels=64)
# Training profile: 2.56 s clips -> (64, 256) mel, desk sized.
TRAIN_DSP = DspConfig(n_fft=1024, win_length=512, hop=160, n_mels=64)


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel matrix (n_mels x frames) with its generating config."""

    values: np.ndarray
    config: DspConfig

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("mel values must be 2-D (n_mels, frames)")
        if v.shape[0] != self.config.n_mels:
            raise ValueError(
                f"mel has {v.shape[0]} rows, config says {self.config.n_mels}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("mel values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, 16-bit PCM little-endian, mono)
# ---------------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError, struct.error) as exc:
        raise WavFormatError("malformed WAV header", str(exc)) from exc
    if n_channels != 1:
        raise WavFormatError("non-mono WAV", f"{n_channels} channels")
    if sampwidth != 2:
        raise WavFormatError("unsupported bit depth", f"{8 * sampwidth} bits")
    ints = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioClip(ints / 32768.0, rate)


def write_wav(path, clip: AudioClip) -> None:
    # same 32768 scale as read_wav so the round trip stays within 2^-15
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(ints.tobytes())


# ---------------------------------------------------------------------------
# STFT / mel filterbank
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank_cached(sample_rate, n_fft, n_mels, f_min, f_max):
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - left) / max(center - left, 1e-12)
        down = (right - fft_freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape (n_mels, n_fft//2 + 1). Read-only."""
    return _filterbank_cached(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)


def mel_filterbank_centers(cfg: DspConfig) -> np.ndarray:
    """Center frequency in Hz of each mel bin."""
    mel_pts = np.linspace(_hz_to_mel(cfg.f_min), _hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


@lru_cache(maxsize=16)
def _pinv_cached(sample_rate, n_fft, n_mels, f_min, f_max):
    fb = _filterbank_cached(sample_rate, n_fft, n_mels, f_min, f_max)
    pinv = np.linalg.pinv(fb)
    pinv.setflags(write=False)
    return pinv


def _hann_periodic(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def stft_magnitude(samples: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Center-padded (reflect) magnitude STFT, shape (n_fft//2+1, ceil(len/hop))."""
    n_frames = int(np.ceil(len(samples) / cfg.hop))
    return np.abs(_stft_complex(samples, cfg, n_frames))


def _stft_complex(samples, cfg: DspConfig, n_frames):
    pad = cfg.n_fft // 2
    padded = np.pad(samples, pad, mode="reflect") if len(samples) > pad else np.pad(samples, pad)
    window = np.zeros(cfg.n_fft)
    offset = (cfg.n_fft - cfg.win_length) // 2
    window[offset:offset + cfg.win_length] = _hann_periodic(cfg.win_length)
    frames = np.stack(
        [padded[i * cfg.hop:i * cfg.hop + cfg.n_fft] for i in range(n_frames)]
    )
    return np.fft.rfft(frames * window, axis=1).T


def _istft(spec: np.ndarray, cfg: DspConfig, out_len: int) -> np.ndarray:
    """Overlap-add inverse of _stft_complex with window-square normalization."""
    n_frames = spec.shape[1]
    window = np.zeros(cfg.n_fft)
    offset = (cfg.n_fft - cfg.win_length) // 2
    window[offset:offset + cfg.win_length] = _hann_periodic(cfg.win_length)
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=1) * window
    total = n_frames * cfg.hop + cfg.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window ** 2
    for i in range(n_frames):
        out[i * cfg.hop:i * cfg.hop + cfg.n_fft] += frames[i]
        norm[i * cfg.hop:i * cfg.hop + cfg.n_fft] += wsq
    out = out / np.maximum(norm, 1e-10)
    pad = cfg.n_fft // 2
    return out[pad:pad + out_len]


def compute_mel(clip: AudioClip, cfg: DspConfig) -> MelSpectrogram:
    """Log-mel power spectrogram: ln(max(fb @ |STFT|^2, log_floor))."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: clip {clip.sample_rate}, config {cfg.sample_rate}"
        )
    if len(clip.samples) == 0:
        raise ValueError("empty clip")
    mag = stft_magnitude(clip.samples, cfg)
    power = mag ** 2
    mel_power = mel_filterbank(cfg) @ power
    return MelSpectrogram(np.log(np.maximum(mel_power, cfg.log_floor)), cfg)


def invert_mel_griffin_lim(mel: MelSpectrogram, iters: int = 32, seed: int = 0) -> AudioClip:
    """Reconstruct audio from a log-mel matrix.

    exp(log-mel) -> linear power via clamped filterbank pseudo-inverse ->
    Griffin-Lim phase estimation -> peak-normalized waveform.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    cfg = mel.config
    mel_power = np.exp(mel.values)
    pinv = _pinv_cached(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)
    power = np.maximum(pinv @ mel_power, 0.0)
    mag = np.sqrt(power)
    out_len = mel.values.shape[1] * cfg.hop

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    spec = mag * phase
    for _ in range(iters):
        audio = _istft(spec, cfg, out_len)
        re = _stft_complex(audio, cfg, mag.shape[1])
        spec = mag * np.exp(1j * np.angle(re))
    audio = _istft(spec, cfg, out_len)
    peak = np.max(np.abs(audio))
    if peak > 0:
        audio = audio / peak
    return AudioClip(audio, cfg.sample_rate)
