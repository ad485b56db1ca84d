"""Objective metrics: toy-classifier FD/KL/IS and the signal-analysis
event-accuracy oracle, plus the guidance/steps sweep harness.

The oracle is generation-free: it is calibrated against rendered ground
truth before any generative model exists, so it can serve as an
independent check on generated audio.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import AudioClip, DspConfig, MelSpectrogram
from .corpus import EventSpec, NOISE_BAND, parse_caption

__all__ = [
    "EventClassifier",
    "MetricReport",
    "train_classifier",
    "classifier_accuracy",
    "frechet_distance",
    "kl_and_is",
    "detect_event",
    "event_accuracy_oracle",
    "spectral_flatness",
    "sweep",
    "write_sweep_tsv",
    "CLASS_NAMES",
]

CLASS_NAMES = tuple(
    f"{kind}_{pitch}"
    for kind in ("tone", "chirp_up", "chirp_down", "noise_burst")
    for pitch in ("low", "mid", "high")
) + ("silence",)
_CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}


def event_class(ev: EventSpec) -> int:
    return _CLASS_INDEX[f"{ev.kind}_{ev.pitch_class}"]


# ---------------------------------------------------------------------------
# Signal-analysis event oracle
# ---------------------------------------------------------------------------

ORACLE_NFFT = 1024
ORACLE_HOP = 256
ENERGY_GATE = 1e-4  # RMS below this counts as silence
TONE_RATIO = 8.0    # band/median per-bin power ratio for tone detection
CHIRP_MIN_OCTAVES = 0.35
FLATNESS_THRESHOLD = 0.35


def _interval_spectrum(samples: np.ndarray, sr: int, start: float, end: float):
    """Per-frame power spectra of the event interval (Hann frames)."""
    i0, i1 = int(start * sr), int(end * sr)
    seg = samples[i0:i1]
    if len(seg) < ORACLE_NFFT:
        seg = np.pad(seg, (0, ORACLE_NFFT - len(seg)))
    window = np.hanning(ORACLE_NFFT)
    frames = []
    for j in range(0, len(seg) - ORACLE_NFFT + 1, ORACLE_HOP):
        frames.append(np.abs(np.fft.rfft(seg[j:j + ORACLE_NFFT] * window)) ** 2)
    freqs = np.fft.rfftfreq(ORACLE_NFFT, 1 / sr)
    return np.asarray(frames), freqs


def _interval_rms(samples: np.ndarray, sr: int, start: float, end: float) -> float:
    seg = samples[int(start * sr):int(end * sr)]
    return float(np.sqrt(np.mean(seg ** 2))) if len(seg) else 0.0


def spectral_flatness(clip: AudioClip, interval, band=NOISE_BAND) -> float:
    """Geometric/arithmetic mean ratio of the mean power spectrum in band.

    Narrow tonal peaks are clipped at 20x the median bin before the ratio
    so coexisting tones do not mask broadband noise. Returns 0 for
    (near-)silent intervals.
    """
    start, end = interval
    if _interval_rms(clip.samples, clip.sample_rate, start, end) < ENERGY_GATE:
        return 0.0
    frames, freqs = _interval_spectrum(clip.samples, clip.sample_rate, start, end)
    mean_spec = frames.mean(axis=0)
    sel = (freqs >= band[0]) & (freqs <= band[1])
    spec = mean_spec[sel]
    med = np.median(spec)
    if med <= 0:
        return 0.0
    spec = np.minimum(spec, 20.0 * med) + 1e-20
    return float(np.exp(np.mean(np.log(spec))) / np.mean(spec))


def _peak_track(frames, freqs, f_lo=80.0, f_hi=7600.0):
    sel = (freqs >= f_lo) & (freqs <= f_hi)
    peaks = []
    for frame in frames:
        p = frame[sel]
        if p.sum() <= 0:
            continue
        peaks.append(freqs[sel][int(np.argmax(p))])
    return np.asarray(peaks)


def detect_event(clip: AudioClip, ev: EventSpec) -> bool:
    """Signal-domain check that one expected event is audible in its interval."""
    sr = clip.sample_rate
    pad = 0.02  # keep clear of the fade ramps
    start, end = ev.start + pad, max(ev.start + pad + 0.05, ev.end - pad)
    if _interval_rms(clip.samples, sr, start, end) < ENERGY_GATE:
        return False
    frames, freqs = _interval_spectrum(clip.samples, sr, start, end)
    if len(frames) == 0:
        return False
    mean_spec = frames.mean(axis=0)

    if ev.kind == "tone":
        lo, hi = ev.base_freq * 2 ** (-1 / 6), ev.base_freq * 2 ** (1 / 6)
        band = (freqs >= lo) & (freqs <= hi)
        full = (freqs >= 50) & (freqs <= 7600)
        med = np.median(mean_spec[full])
        return med > 0 and float(mean_spec[band].mean() / med) >= TONE_RATIO
    if ev.kind in ("chirp_up", "chirp_down"):
        lo = ev.base_freq * 2 ** (-1.4) if ev.kind == "chirp_down" else ev.base_freq * 2 ** (-0.4)
        hi = ev.base_freq * 2 ** (1.4) if ev.kind == "chirp_up" else ev.base_freq * 2 ** (0.4)
        peaks = _peak_track(frames, freqs, max(lo, 80.0), min(hi, 7600.0))
        if len(peaks) < 4:
            return False
        t = np.arange(len(peaks)) / len(peaks)  # fraction of interval
        octaves = np.log2(np.maximum(peaks, 1.0))
        slope = np.polyfit(t, octaves, 1)[0]  # octaves per interval
        want = 1.0 if ev.kind == "chirp_up" else -1.0
        return slope * want >= CHIRP_MIN_OCTAVES
    # noise burst
    return spectral_flatness(clip, (start, end)) >= FLATNESS_THRESHOLD


def event_accuracy_oracle(clip: AudioClip, expected_events) -> float:
    """Fraction of expected events detected; silence expectation handled by caller."""
    expected = list(expected_events)
    if not expected:
        return 1.0 if _interval_rms(clip.samples, clip.sample_rate, 0, clip.duration) < ENERGY_GATE else 0.0
    hits = sum(1 for ev in expected if detect_event(clip, ev))
    return hits / len(expected)


# ---------------------------------------------------------------------------
# Toy classifier (metric backbone)
# ---------------------------------------------------------------------------

class EventClassifier(nn.Module):
    """Small conv net over 1-channel normalized mel images; softmax output."""

    def __init__(self, n_classes: int = len(CLASS_NAMES), feat_dim: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.body = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d((2, 8)),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(64 * 2 * 8, feat_dim), nn.SiLU())
        self.out = nn.Linear(feat_dim, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class probability vectors (softmax)."""
        return torch.softmax(self.out(self.features(x)), dim=-1)

    def logits(self, x):
        return self.out(self.features(x))


def _caption_targets(captions, duration):
    targets = []
    for caption in captions:
        t = np.zeros(len(CLASS_NAMES))
        if caption.strip():
            events, _ = parse_caption(caption, duration)
            for ev in events:
                t[event_class(ev)] += 1.0
        else:
            t[_CLASS_INDEX["silence"]] = 1.0
        targets.append(t / t.sum())
    return torch.from_numpy(np.stack(targets)).float()


def train_classifier(mel_images: torch.Tensor, captions, steps: int = 800,
                     batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
                     duration: float = 2.56, model: EventClassifier | None = None):
    """Soft cross-entropy on event-class distributions derived from captions."""
    model = model or EventClassifier(seed=seed)
    targets = _caption_targets(captions, duration)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, len(mel_images), size=min(batch_size, len(mel_images)))
        optimizer.zero_grad()
        logits = model.logits(mel_images[idx])
        loss = -(targets[idx] * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite classifier loss")
        loss.backward()
        optimizer.step()
    return model


def classifier_accuracy(model: EventClassifier, mel_images: torch.Tensor, captions,
                        duration: float = 2.56) -> float:
    """Per-event top-k accuracy: k = number of events in the caption."""
    scores = []
    with torch.no_grad():
        probs = model(mel_images)
    for prob, caption in zip(probs, captions):
        if caption.strip():
            events, _ = parse_caption(caption, duration)
            true = {event_class(ev) for ev in events}
        else:
            true = {_CLASS_INDEX["silence"]}
        top = set(torch.topk(prob, k=len(true)).indices.tolist())
        scores.append(len(true & top) / len(true))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Distribution metrics
# ---------------------------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), clamped at 0."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    dim = feats_a.shape[1]
    if len(feats_a) < dim + 1 or len(feats_b) < dim + 1:
        raise ValueError(f"need at least dim+1={dim + 1} samples per set")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    # atleast_2d: np.cov collapses 1-D feature spaces to a 0-d array
    cov_a = np.atleast_2d(np.cov(feats_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feats_b, rowvar=False))
    sqrt_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(sqrt_a @ cov_b @ sqrt_a)
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * cross))
    return max(fd, 0.0)


def kl_and_is(probs_generated: np.ndarray, probs_reference: np.ndarray | None = None,
              eps: float = 1e-10):
    """Paired KL (needs reference) and Inception Score of the generated set."""
    p = np.asarray(probs_generated, dtype=np.float64) + eps
    p = p / p.sum(axis=1, keepdims=True)
    marginal = p.mean(axis=0)
    is_score = float(np.exp(np.mean(np.sum(p * np.log(p / marginal), axis=1))))
    if probs_reference is None:
        return None, is_score
    q = np.asarray(probs_reference, dtype=np.float64) + eps
    q = q / q.sum(axis=1, keepdims=True)
    if q.shape != p.shape:
        raise ValueError("paired KL needs equally many generated and reference rows")
    kl = float(np.mean(np.sum(p * np.log(p / q), axis=1)))
    return kl, is_score


# ---------------------------------------------------------------------------
# Guidance / steps sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    fd: float
    kl: float
    is_score: float
    acc: float
    n_samples: int
    w: float
    steps: int

    def __post_init__(self):
        if self.fd < 0 or not (0 <= self.acc <= 1) or self.is_score < 1 - 1e-9:
            raise ValueError("metric out of range")


def sweep(pipe, classifier: EventClassifier | None, prompts, w_list, steps_list,
          reference_mels=None, seed: int = 0, gl_iters: int = 16):
    """One MetricReport per (w, steps) cell over a fixed prompt list."""
    from .audio import invert_mel_griffin_lim
    from .diffusion import GuidanceConfig
    from .image import normalize_global

    ref_feats = ref_probs = None
    if classifier is not None and reference_mels is not None:
        ref_images = torch.stack([
            torch.from_numpy(normalize_global(m, pipe.stats).values).float()
            for m in reference_mels
        ])
        with torch.no_grad():
            ref_feats = classifier.features(ref_images).numpy()
            ref_probs = classifier(ref_images).numpy()

    rows = []
    for w in w_list:
        for steps in steps_list:
            guidance = GuidanceConfig(w=w, steps=steps, seed=seed)
            latents = pipe.sample_latents_batch(list(prompts), guidance)
            accs, gen_images = [], []
            for i, prompt in enumerate(prompts):
                mel = pipe.latent_to_mel(latents[i])
                audio = invert_mel_griffin_lim(mel, iters=gl_iters, seed=seed + i)
                events, _ = parse_caption(prompt, pipe.config.clip_duration)
                accs.append(event_accuracy_oracle(audio, events))
                gen_images.append(torch.from_numpy(
                    normalize_global(mel, pipe.stats).values).float())
            fd = kl = 0.0
            is_score = 1.0
            if classifier is not None and ref_feats is not None:
                gen = torch.stack(gen_images)
                with torch.no_grad():
                    gen_feats = classifier.features(gen).numpy()
                    gen_probs = classifier(gen).numpy()
                fd = frechet_distance(gen_feats, ref_feats)
                kl, is_score = kl_and_is(gen_probs, ref_probs)
            rows.append(MetricReport(fd=fd, kl=kl or 0.0, is_score=is_score,
                                     acc=float(np.mean(accs)), n_samples=len(prompts),
                                     w=w, steps=steps))
    return rows


def write_sweep_tsv(rows, path) -> None:
    lines = ["w\tsteps\tfd\tkl\tis\tacc\tn"]
    for r in rows:
        lines.append(f"{r.w}\t{r.steps}\t{r.fd:.6f}\t{r.kl:.6f}\t{r.is_score:.6f}"
                     f"\t{r.acc:.6f}\t{r.n_samples}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
