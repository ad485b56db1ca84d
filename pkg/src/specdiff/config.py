"""Run configuration: one validated YAML document for every tunable.

Unknown keys are hard errors so sweep typos fail loudly, and validation
reports every violated constraint at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .audio import DspConfig
from .diffusion import GuidanceConfig
from .pipeline import PipelineConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "save_config", "DEFAULT_CONFIG"]


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


DEFAULT_CONFIG = {
    "dsp": {
        "sample_rate": 16000, "n_fft": 1024, "win_length": 512, "hop": 160,
        "n_mels": 64, "f_min": 0.0, "f_max": 8000.0, "log_floor": 1e-5,
    },
    "clip_duration": 2.56,
    "stats_scale_k": 3.0,
    "model": {
        "d_tau": 64, "unet_widths": [32, 64, 96], "ae_scale": 4, "ae_hidden": 32,
        "latent_channels": 4, "image_channels": 3,
    },
    "schedule": {"T": 1000, "beta_start": 1.0e-4, "beta_end": 0.02},
    "train": {
        "steps": 12000, "batch_size": 8, "lr": 2.0e-4, "drop_p": 0.10, "seed": 0,
        "ae_steps": 3000, "ae_lr": 2.0e-4, "val_fraction": 0.0,
    },
    "guidance": {"w": 7.5, "steps": 100, "sampler": "strided_deterministic", "seed": 0},
    "corpus": {"n": 256, "seed": 7},
    "gl_iters": 32,
}


def _merge_checked(defaults, overrides, path, problems):
    out = {}
    for key, default in defaults.items():
        if isinstance(default, dict):
            sub = overrides.get(key, {})
            if not isinstance(sub, dict):
                problems.append(f"{path}{key}: expected a mapping")
                sub = {}
            out[key] = _merge_checked(default, sub, f"{path}{key}.", problems)
        else:
            out[key] = overrides.get(key, default)
    for key in overrides:
        if key not in defaults:
            problems.append(f"{path}{key}: unknown key")
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict

    @property
    def dsp(self) -> DspConfig:
        d = self.raw["dsp"]
        return DspConfig(**d)

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(**self.raw["guidance"])

    @property
    def pipeline(self) -> PipelineConfig:
        m = self.raw["model"]
        s = self.raw["schedule"]
        return PipelineConfig(
            dsp=self.dsp,
            clip_duration=self.raw["clip_duration"],
            d_tau=m["d_tau"],
            unet_widths=tuple(m["unet_widths"]),
            ae_scale=m["ae_scale"],
            ae_hidden=m["ae_hidden"],
            latent_channels=m["latent_channels"],
            image_channels=m["image_channels"],
            T=s["T"],
            beta_start=s["beta_start"],
            beta_end=s["beta_end"],
            gl_iters=self.raw["gl_iters"],
        )

    def validate(self):
        problems = []
        try:
            dsp = self.dsp
        except (ValueError, TypeError) as exc:
            problems.append(f"dsp: {exc}")
            dsp = None
        s, m, g = self.raw["schedule"], self.raw["model"], self.raw["guidance"]
        if not (0 < s["beta_start"] <= s["beta_end"] < 1):
            problems.append("schedule: need 0 < beta_start <= beta_end < 1")
        if g["steps"] > s["T"]:
            problems.append(f"guidance.steps ({g['steps']}) must be <= schedule.T ({s['T']})")
        if g["steps"] < 1:
            problems.append("guidance.steps must be >= 1")
        if g["w"] < 0:
            problems.append("guidance.w must be >= 0")
        if g["sampler"] not in ("ancestral", "strided_deterministic"):
            problems.append(f"guidance.sampler: unknown sampler {g['sampler']!r}")
        if m["ae_scale"] not in (1, 2, 4, 8):
            problems.append("model.ae_scale must be 1, 2, 4 or 8")
        if len(m["unet_widths"]) != 3:
            problems.append("model.unet_widths must list 3 widths")
        if dsp is not None:
            grid = m["ae_scale"] * 4  # AE downsample then two U-Net halvings
            frames = int(round(self.raw["clip_duration"] * dsp.sample_rate)) // dsp.hop
            if dsp.n_mels % grid:
                problems.append(f"dsp.n_mels ({dsp.n_mels}) must be divisible by {grid}")
            if frames % grid:
                problems.append(f"frame count ({frames}) must be divisible by {grid}")
        if not 0 <= self.raw["train"]["drop_p"] <= 1:
            problems.append("train.drop_p must be in [0, 1]")
        if self.raw["corpus"]["n"] < 1:
            problems.append("corpus.n must be >= 1")
        if problems:
            raise ConfigError(problems)
        return self


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(["config root must be a mapping"])
    if overrides:
        data = _deep_update(data, overrides)
    problems = []
    merged = _merge_checked(DEFAULT_CONFIG, data, "", problems)
    if problems:
        raise ConfigError(problems)
    return RunConfig(merged).validate()


def _deep_update(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def save_config(config: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config.raw, sort_keys=True), encoding="utf-8")
