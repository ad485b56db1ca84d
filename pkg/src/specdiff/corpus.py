"""Procedural (audio, caption) corpus with machine-checkable event structure.

Captions come from a tiny closed grammar and parse back to their event
lists exactly, which is what makes the event-accuracy oracle possible.
A matching (image, caption) corpus provides the toy pretraining set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import AudioClip, DspConfig, TRAIN_DSP, write_wav

__all__ = [
    "EventSpec",
    "CaptionedClip",
    "GrammarConfig",
    "sample_caption_and_events",
    "parse_caption",
    "events_to_caption",
    "render_audio",
    "render_toy_image",
    "build_corpus",
    "read_manifest",
    "VOCABULARY",
]

KINDS = ("tone", "chirp_up", "chirp_down", "noise_burst")
PITCHES = {"low": 220.0, "mid": 440.0, "high": 880.0}
KIND_PHRASES = {
    "tone": ("tone",),
    "chirp_up": ("rising", "chirp"),
    "chirp_down": ("falling", "chirp"),
    "noise_burst": ("noise", "burst"),
}
JOINERS = {"sequential": (("followed", "by"), ("then",)), "simultaneous": (("and",),)}
QUIET_GAIN = 0.25

VOCABULARY = (
    "<pad>", "<unk>",
    "a", "quiet", "low", "mid", "high",
    "tone", "rising", "falling", "chirp", "noise", "burst",
    "followed", "by", "then", "and",
)


@dataclass(frozen=True)
class EventSpec:
    kind: str
    pitch_class: str
    start: float
    end: float
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.pitch_class not in PITCHES:
            raise ValueError(f"unknown pitch class {self.pitch_class!r}")
        if not (0 <= self.start < self.end):
            raise ValueError("need 0 <= start < end")

    @property
    def base_freq(self) -> float:
        return PITCHES[self.pitch_class]


@dataclass(frozen=True)
class CaptionedClip:
    events: tuple
    caption: str
    relation: str
    seed: int
    duration: float = 2.56


@dataclass(frozen=True)
class GrammarConfig:
    duration: float = 2.56
    n_events_probs: tuple = ((1, 0.45), (2, 0.40), (3, 0.15))
    simultaneous_prob: float = 0.3
    quiet_prob: float = 0.15
    max_events: int = 3


def _event_phrase(ev: EventSpec) -> str:
    words = ["a"]
    if ev.gain == QUIET_GAIN:
        words.append("quiet")
    if ev.kind != "noise_burst":
        words.append(ev.pitch_class)
    words.extend(KIND_PHRASES[ev.kind])
    return " ".join(words)


def _intervals(n: int, relation: str, duration: float):
    if relation == "simultaneous":
        return [(0.0, duration)] * n
    return [(i * duration / n, (i + 1) * duration / n) for i in range(n)]


def events_to_caption(events, relation: str, joiner_words=None) -> str:
    """Render the canonical caption for an event list."""
    parts = [_event_phrase(ev) for ev in events]
    if len(events) == 1:
        return parts[0]
    joiners = joiner_words or [JOINERS[relation][0]] * (len(events) - 1)
    out = [parts[0]]
    for joiner, part in zip(joiners, parts[1:]):
        out.append(" ".join(joiner))
        out.append(part)
    return " ".join(out)


def parse_caption(caption: str, duration: float = 2.56):
    """Inverse of the grammar: caption -> (events, relation).

    Raises ValueError for strings outside the template set.
    """
    tokens = caption.lower().split()
    parts, joiners = [], []
    current = []
    i = 0
    while i < len(tokens):
        if tokens[i] == "followed" and i + 1 < len(tokens) and tokens[i + 1] == "by":
            parts.append(current); joiners.append("sequential"); current = []; i += 2
        elif tokens[i] == "then":
            parts.append(current); joiners.append("sequential"); current = []; i += 1
        elif tokens[i] == "and":
            parts.append(current); joiners.append("simultaneous"); current = []; i += 1
        else:
            current.append(tokens[i]); i += 1
    parts.append(current)
    if joiners and len(set(joiners)) > 1:
        raise ValueError("mixed sequential/simultaneous joiners")
    relation = joiners[0] if joiners else "sequential"

    specs = []
    for part in parts:
        if not part or part[0] != "a":
            raise ValueError(f"event phrase must start with 'a': {part}")
        rest = part[1:]
        gain = 1.0
        if rest and rest[0] == "quiet":
            gain = QUIET_GAIN
            rest = rest[1:]
        if tuple(rest) == KIND_PHRASES["noise_burst"]:
            specs.append(("noise_burst", "mid", gain))
            continue
        if len(rest) < 2 or rest[0] not in PITCHES:
            raise ValueError(f"bad event phrase: {part}")
        pitch, kind_words = rest[0], tuple(rest[1:])
        for kind, phrase in KIND_PHRASES.items():
            if kind != "noise_burst" and kind_words == phrase:
                break
        else:
            raise ValueError(f"unknown kind phrase: {kind_words}")
        specs.append((kind, pitch, gain))

    spans = _intervals(len(specs), relation, duration)
    events = tuple(
        EventSpec(kind, pitch, start, end, gain)
        for (kind, pitch, gain), (start, end) in zip(specs, spans)
    )
    return events, relation


def sample_caption_and_events(rng: np.random.Generator, grammar: GrammarConfig = GrammarConfig(),
                              seed: int = 0) -> CaptionedClip:
    ns, ps = zip(*grammar.n_events_probs)
    n = int(rng.choice(ns, p=np.asarray(ps) / sum(ps)))
    relation = "sequential"
    if n > 1 and rng.random() < grammar.simultaneous_prob:
        relation = "simultaneous"
    spans = _intervals(n, relation, grammar.duration)
    events = []
    joiner_words = []
    for idx, (start, end) in enumerate(spans):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        pitch = "mid" if kind == "noise_burst" else list(PITCHES)[int(rng.integers(3))]
        gain = QUIET_GAIN if rng.random() < grammar.quiet_prob else 1.0
        events.append(EventSpec(kind, pitch, start, end, gain))
        if idx > 0:
            options = JOINERS[relation]
            joiner_words.append(options[int(rng.integers(len(options)))])
    # simultaneous noise drowns quiet partners; keep quiet only solo or sequential
    caption = events_to_caption(events, relation, joiner_words or None)
    return CaptionedClip(tuple(events), caption, relation, seed, grammar.duration)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

FADE_SEC = 0.010
NOISE_BAND = (150.0, 7000.0)


def _fade_envelope(n: int, sr: int) -> np.ndarray:
    env = np.ones(n)
    k = min(int(FADE_SEC * sr), n // 2)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = ramp
        env[-k:] = ramp[::-1]
    return env


def _render_event(ev: EventSpec, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round((ev.end - ev.start) * sr))
    t = np.arange(n) / sr
    if ev.kind == "tone":
        sig = np.sin(2 * np.pi * ev.base_freq * t)
    elif ev.kind in ("chirp_up", "chirp_down"):
        f1 = ev.base_freq * (2.0 if ev.kind == "chirp_up" else 0.5)
        # linear sweep base -> +-1 octave; phase = 2*pi * integral of f(t)
        dur = max(n / sr, 1e-9)
        freq = ev.base_freq + (f1 - ev.base_freq) * t / dur
        phase = 2 * np.pi * (ev.base_freq * t + 0.5 * (f1 - ev.base_freq) * t ** 2 / dur)
        sig = np.sin(phase)
    else:  # noise_burst: band-limited white noise
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1 / sr)
        mask = (freqs >= NOISE_BAND[0]) & (freqs <= NOISE_BAND[1])
        sig = np.fft.irfft(spec * mask, n=n)
        peak = np.max(np.abs(sig))
        if peak > 0:
            sig = sig / peak
    return sig * _fade_envelope(n, sr) * ev.gain


def render_audio(spec: CaptionedClip, cfg: DspConfig = TRAIN_DSP) -> AudioClip:
    """Sum of rendered events, peak-normalized."""
    sr = cfg.sample_rate
    total = int(round(spec.duration * sr))
    out = np.zeros(total)
    rng = np.random.default_rng([spec.seed, 0xA0D10])
    for ev in spec.events:
        sig = _render_event(ev, sr, rng)
        i0 = int(round(ev.start * sr))
        out[i0:i0 + len(sig)] += sig
    peak = np.max(np.abs(out))
    if peak > 0:
        out = out / peak
    return AudioClip(out, sr)


def render_toy_image(caption: str, rng: np.random.Generator,
                     height: int = 64, width: int = 256, duration: float = 2.56) -> np.ndarray:
    """Visual surrogate of a caption: 3 x H x W float image in [-1, 1].

    tone -> horizontal bar at pitch-dependent height, chirps -> diagonal
    bars, noise -> speckle; sequential events split the width like time.
    """
    events, _ = parse_caption(caption, duration)
    img = -np.ones((height, width))
    pitch_rows = {"low": int(height * 0.18), "mid": int(height * 0.5), "high": int(height * 0.82)}
    for ev in events:
        x0 = int(ev.start / duration * width)
        x1 = max(x0 + 1, int(ev.end / duration * width))
        level = 2.0 * min(ev.gain, 1.0) - 1.0
        if ev.kind == "tone":
            row = pitch_rows[ev.pitch_class]
            img[max(row - 2, 0):row + 2, x0:x1] = level
        elif ev.kind in ("chirp_up", "chirp_down"):
            r0 = pitch_rows[ev.pitch_class]
            r1 = min(max(r0 + (height // 4 if ev.kind == "chirp_up" else -height // 4), 2), height - 3)
            xs = np.arange(x0, x1)
            rows = np.round(np.linspace(r0, r1, len(xs))).astype(int)
            for x, r in zip(xs, rows):
                img[max(r - 2, 0):r + 2, x] = level
        else:
            speckle = rng.random((height // 2, x1 - x0)) < 0.35
            block = np.where(speckle, level, -1.0)
            img[height // 4:height // 4 + height // 2, x0:x1] = block
    return np.repeat(img[None, :, :], 3, axis=0)


# ---------------------------------------------------------------------------
# Corpus building / manifest I/O
# ---------------------------------------------------------------------------

def _serialize_events(events) -> str:
    return ";".join(f"{e.kind}:{e.pitch_class}:{e.start:.6f}:{e.end:.6f}" for e in events)


def build_corpus(n: int, seed: int, out_dir, mode: str = "audio",
                 grammar: GrammarConfig = GrammarConfig(), cfg: DspConfig = TRAIN_DSP):
    """Write n samples + manifest.tsv; byte-identical for a fixed seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in ("audio", "image"):
        raise ValueError(f"mode must be audio or image, got {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for idx in range(n):
        sample_seed = int(np.random.default_rng([seed, idx]).integers(2 ** 31))
        rng = np.random.default_rng([seed, idx, 1])
        clip = sample_caption_and_events(rng, grammar, seed=sample_seed)
        clip = replace(clip, seed=sample_seed)
        sample_id = f"{mode}_{idx:05d}"
        if mode == "audio":
            write_wav(out_dir / f"{sample_id}.wav", render_audio(clip, cfg))
        else:
            from PIL import Image

            img = render_toy_image(clip.caption, np.random.default_rng([sample_seed, 2]),
                                   duration=grammar.duration)
            v8 = np.round((np.clip(img, -1, 1) + 1) / 2 * 255).astype(np.uint8)
            Image.fromarray(np.moveaxis(v8, 0, -1), mode="RGB").save(out_dir / f"{sample_id}.png")
        lines.append("\t".join([
            sample_id, clip.caption, _serialize_events(clip.events), str(sample_seed)
        ]))
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path, duration: float = 2.56):
    """Yield CaptionedClip records from a manifest.tsv."""
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        sample_id, caption, _events, seed = line.split("\t")
        events, relation = parse_caption(caption, duration)
        records.append((sample_id, CaptionedClip(events, caption, relation, int(seed), duration)))
    return records
