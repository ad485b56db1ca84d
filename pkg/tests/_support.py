"""Helpers for the slow end-to-end tests that need trained models.

Everything expensive (corpora, autoencoder, denoiser, transfer runs) is
cached under .cache/ keyed by a hash of its full parameter set, so
repeated pytest invocations reuse earlier training products.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from specdiff.audio import TRAIN_DSP, DspConfig, invert_mel_griffin_lim
from specdiff.autoencoder import train_autoencoder
from specdiff.checkpoint import load_into_module, save_module
from specdiff.corpus import (GrammarConfig, build_corpus, parse_caption,
                             sample_caption_and_events)
from specdiff.diffusion import GuidanceConfig
from specdiff.evalmetrics import event_accuracy_oracle
from specdiff.image import load_stats, save_stats
from specdiff.pipeline import Pipeline, PipelineConfig
from specdiff.trainer import (encode_latents, load_audio_dataset, load_image_dataset,
                              prepare_pipeline_data, train_ldm, validation_loss)

CACHE = Path(__file__).resolve().parent.parent / ".cache"

MAIN_CONFIG = PipelineConfig(dsp=TRAIN_DSP, clip_duration=2.56, d_tau=64,
                             unet_widths=(32, 64, 96), ae_scale=4, ae_hidden=16,
                             latent_channels=4, image_channels=3, T=1000,
                             gl_iters=32)
MAIN_CORPUS = dict(n=256, seed=7)
MAIN_TRAIN = dict(ldm_steps=36000, ae_steps=1500, dec_refine_steps=12000,
                  batch_size=8, lr=2e-4, drop_p=0.1, seed=0)
LDM_CHUNK = 4000  # milestone interval for incremental training/caching

SMALL_DSP = DspConfig(sample_rate=16000, n_fft=256, win_length=128, hop=64, n_mels=16)
SMALL_CONFIG = PipelineConfig(dsp=SMALL_DSP, clip_duration=0.256, d_tau=32,
                              unet_widths=(16, 24, 32), ae_scale=1,
                              image_channels=3, T=1000, gl_iters=8)


def _key(params) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _config_fingerprint(config: PipelineConfig) -> dict:
    return {"dsp": repr(config.dsp), "clip": config.clip_duration,
            "d_tau": config.d_tau, "widths": list(config.unet_widths),
            "ae_scale": config.ae_scale, "ae_hidden": config.ae_hidden,
            "latent_channels": config.latent_channels,
            "channels": config.image_channels, "T": config.T,
            "beta": [config.beta_start, config.beta_end]}


def cached_corpus(n: int, seed: int, mode: str = "audio",
                  dsp: DspConfig = TRAIN_DSP, duration: float = 2.56,
                  grammar: GrammarConfig | None = None) -> Path:
    grammar = grammar or GrammarConfig(duration=duration)
    key = _key({"n": n, "seed": seed, "mode": mode, "dsp": repr(dsp),
                "grammar": repr(grammar)})
    out = CACHE / f"corpus-{mode}-{key}"
    if not (out / "manifest.tsv").exists():
        build_corpus(n, seed, out, mode=mode, grammar=grammar, cfg=dsp)
    return out


def _load_main_dataset(config: PipelineConfig, pipe: Pipeline):
    corpus = cached_corpus(MAIN_CORPUS["n"], MAIN_CORPUS["seed"], dsp=config.dsp,
                           duration=config.clip_duration)
    captions, mels = load_audio_dataset(corpus / "manifest.tsv", config.dsp,
                                        config.clip_duration)
    return prepare_pipeline_data(pipe, captions, mels)


def _save_pipe(pipe: Pipeline, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    save_stats(pipe.stats, root / "stats.tsv")
    for name, module in pipe.all_modules().items():
        save_module(root / name, module)


def _load_pipe(pipe: Pipeline, root: Path) -> None:
    pipe.stats = load_stats(root / "stats.tsv")
    for name, module in pipe.all_modules().items():
        load_into_module(root / name, module)


def _refine_decoder(pipe: Pipeline, images: torch.Tensor, steps: int,
                    batch_size: int, lr: float, seed: int) -> None:
    """Extra reconstruction training for the AE decoder only.

    The encoder and latent-calibration buffers stay frozen, so latents —
    and therefore the trained denoiser — are untouched; only the decode
    path sharpens.
    """
    opt = torch.optim.Adam(pipe.ae.decoder.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        batch = images[rng.integers(0, len(images), size=batch_size)]
        with torch.no_grad():
            z = pipe.ae.raw_encode(batch)
        opt.zero_grad()
        loss = torch.nn.functional.mse_loss(pipe.ae.decoder(z), batch)
        loss.backward()
        opt.step()


def trained_main_pipeline(train=MAIN_TRAIN, config=MAIN_CONFIG) -> Pipeline:
    """The main trained text-to-audio model used by the end-to-end tests.

    The denoiser trains in LDM_CHUNK-step stages, each saved as a milestone
    under one cache directory keyed by everything except the step count, so
    raising ldm_steps resumes from the deepest cached milestone instead of
    retraining from scratch. An optional decoder-only refinement stage runs
    after the target milestone and is cached beside it.
    """
    key = _key({"config": _config_fingerprint(config),
                "train": {k: v for k, v in train.items()
                          if k not in ("ldm_steps", "dec_refine_steps")},
                "chunk": LDM_CHUNK, "corpus": MAIN_CORPUS})
    root = CACHE / f"model-{key}"
    pipe = Pipeline(config, seed=train["seed"])
    target = train["ldm_steps"]
    refine = train.get("dec_refine_steps", 0)
    if target % LDM_CHUNK:
        raise ValueError(f"ldm_steps must be a multiple of {LDM_CHUNK}")
    goal = root / f"step-{target:06d}"
    final = root / f"step-{target:06d}-dec{refine:06d}" if refine else goal
    if (final / "stats.tsv").exists():
        _load_pipe(pipe, final)
        return pipe
    if refine and (goal / "stats.tsv").exists():
        _load_pipe(pipe, goal)
        captions, images = _load_main_dataset(config, pipe)
        _refine_decoder(pipe, images, refine, train["batch_size"],
                        train["lr"], train["seed"])
        _save_pipe(pipe, final)
        return pipe

    done = 0
    milestones = sorted(root.glob("step-*")) if root.exists() else []
    starts = [m for m in milestones if int(m.name.split("-")[1]) <= target]
    captions = images = latents = None
    if starts:
        done = int(starts[-1].name.split("-")[1])
        _load_pipe(pipe, starts[-1])
    else:
        captions, images = _load_main_dataset(config, pipe)
        if not pipe.ae.identity:
            train_autoencoder(images, pipe.ae, steps=train["ae_steps"],
                              lr=train["lr"], seed=train["seed"], log_every=1000)
    while done < target:
        if latents is None:
            if captions is None:
                captions, images = _load_main_dataset(config, pipe)
            latents = encode_latents(pipe, images)
        # per-chunk seed keeps batch orders distinct across stages
        train_ldm(pipe, latents, captions, steps=LDM_CHUNK,
                  batch_size=train["batch_size"], lr=train["lr"],
                  seed=train["seed"] + done, drop_p=train["drop_p"],
                  log_every=1000)
        done += LDM_CHUNK
        _save_pipe(pipe, root / f"step-{done:06d}")
    if refine:
        if captions is None:
            captions, images = _load_main_dataset(config, pipe)
        _refine_decoder(pipe, images, refine, train["batch_size"],
                        train["lr"], train["seed"])
        _save_pipe(pipe, final)
    return pipe


# ---------------------------------------------------------------------------
# Prompt sets and accuracy evaluation
# ---------------------------------------------------------------------------

def event_prompts(n_prompts: int, n_events: int, seed: int, duration: float = 2.56,
                  sequential_only: bool = False):
    """Deterministic caption sample with a fixed per-caption event count."""
    grammar = GrammarConfig(duration=duration,
                            n_events_probs=((n_events, 1.0),),
                            simultaneous_prob=0.0 if sequential_only else 0.3)
    rng = np.random.default_rng(seed)
    return [sample_caption_and_events(rng, grammar, seed=seed + i).caption
            for i in range(n_prompts)]


def batch_accuracy(pipe: Pipeline, prompts, guidance: GuidanceConfig,
                   gl_iters: int = 16, chunk: int = 32):
    """Per-prompt oracle accuracy of batched generations."""
    scores = []
    for i in range(0, len(prompts), chunk):
        part = prompts[i:i + chunk]
        sub = GuidanceConfig(w=guidance.w, steps=guidance.steps,
                             sampler=guidance.sampler, seed=guidance.seed + i)
        latents = pipe.sample_latents_batch(part, sub)
        for j, prompt in enumerate(part):
            mel = pipe.latent_to_mel(latents[j])
            audio = invert_mel_griffin_lim(mel, iters=gl_iters, seed=sub.seed + j)
            events, _ = parse_caption(prompt, pipe.config.clip_duration)
            scores.append(event_accuracy_oracle(audio, events))
    return np.asarray(scores)


# ---------------------------------------------------------------------------
# Image-pretraining transfer experiment
# ---------------------------------------------------------------------------

def transfer_experiment(seeds=(0, 1, 2, 3, 4), pretrain_steps=5000,
                        finetune_steps=5000, corpus_n=192,
                        config: PipelineConfig = SMALL_CONFIG,
                        guidance=GuidanceConfig(w=3.0, steps=50, seed=0),
                        acc_prompts: int = 40):
    """Per-seed comparison of image-pretrained vs from-scratch training.

    Returns a list of dicts with validation losses and oracle accuracies
    for both arms. Cached as a TSV, so assertions re-run instantly.
    """
    key = _key({"config": _config_fingerprint(config), "seeds": list(seeds),
                "pretrain": pretrain_steps, "finetune": finetune_steps,
                "corpus_n": corpus_n, "w": guidance.w, "steps": guidance.steps,
                "acc_prompts": acc_prompts})
    table = CACHE / f"transfer-{key}.tsv"
    if table.exists():
        rows = []
        for line in table.read_text().strip().splitlines()[1:]:
            seed, vf, vs, af, asc = line.split("\t")
            rows.append(dict(seed=int(seed), val_finetune=float(vf),
                             val_scratch=float(vs), acc_finetune=float(af),
                             acc_scratch=float(asc)))
        return rows

    duration = config.clip_duration
    grammar = GrammarConfig(duration=duration)
    audio_corpus = cached_corpus(corpus_n, 11, dsp=config.dsp, duration=duration,
                                 grammar=grammar)
    image_corpus = cached_corpus(corpus_n, 12, mode="image", dsp=config.dsp,
                                 duration=duration, grammar=grammar)
    d, l = config.mel_shape

    probe = Pipeline(config, seed=0)
    audio_captions, mels = load_audio_dataset(audio_corpus / "manifest.tsv",
                                              config.dsp, duration)
    audio_captions, audio_images = prepare_pipeline_data(probe, audio_captions, mels)
    stats = probe.stats
    image_captions, raw_images = load_image_dataset(image_corpus / "manifest.tsv",
                                                    duration, height=d, width=l)
    image_tensor = torch.from_numpy(np.stack(raw_images)).float()

    # one shared image-pretraining run feeds every fine-tune arm
    pre = Pipeline(config, seed=100)
    pre.stats = stats
    train_ldm(pre, encode_latents(pre, image_tensor), image_captions,
              steps=pretrain_steps, seed=100, log_every=1000)
    pre_state = {name: {k: v.clone() for k, v in module.state_dict().items()}
                 for name, module in pre.trainable_modules().items()}

    prompts = event_prompts(acc_prompts, 1, seed=900, duration=duration)
    rows = []
    for seed in seeds:
        results = {}
        for arm in ("finetune", "scratch"):
            pipe = Pipeline(config, seed=seed)
            pipe.stats = stats
            if arm == "finetune":
                for name, module in pipe.trainable_modules().items():
                    module.load_state_dict(pre_state[name])
            latents = encode_latents(pipe, audio_images)
            _, val_history = train_ldm(pipe, latents, audio_captions,
                                       steps=finetune_steps, seed=seed,
                                       val_fraction=0.15, val_every=finetune_steps,
                                       log_every=0)
            results[f"val_{arm}"] = val_history[-1][1]
            results[f"acc_{arm}"] = float(np.mean(
                batch_accuracy(pipe, prompts, guidance, gl_iters=8)))
        rows.append(dict(seed=seed, **results))

    CACHE.mkdir(exist_ok=True)
    lines = ["seed\tval_finetune\tval_scratch\tacc_finetune\tacc_scratch"]
    for r in rows:
        lines.append(f"{r['seed']}\t{r['val_finetune']:.6f}\t{r['val_scratch']:.6f}"
                     f"\t{r['acc_finetune']:.6f}\t{r['acc_scratch']:.6f}")
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
