"""Command-line entry point orchestrating the whole toolkit.

Every subcommand writes into a run directory containing a config
snapshot, a log, and its artifacts. Exit codes: 0 success, 2 config
error, 3 checkpoint error, 4 input error, 5 calibration failure.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import audio as audio_mod
from .audio import read_wav, write_wav, compute_mel, invert_mel_griffin_lim
from .atlas import aggregate_maps, export_map_png, localization_score
from .checkpoint import CheckpointError, load_into_module, save_module
from .config import ConfigError, RunConfig, load_config, save_config
from .corpus import GrammarConfig, build_corpus, parse_caption, read_manifest
from .diffusion import GuidanceConfig
from .edits import EditRequest, inpaint, reweight, style_transfer, word_swap
from .evalmetrics import (EventClassifier, classifier_accuracy, event_accuracy_oracle,
                          frechet_distance, kl_and_is, sweep as run_sweep,
                          train_classifier, write_sweep_tsv)
from .image import export_png, load_stats, save_stats
from .pipeline import Pipeline
from .text import write_vocabulary
from .trainer import (encode_latents, load_audio_dataset, load_image_dataset,
                      prepare_pipeline_data, train_ldm)
from .autoencoder import train_autoencoder
from .unet import AttentionRecorder

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_INPUT = 4
EXIT_CALIBRATION = 5


def _run_root() -> Path:
    return Path(os.environ.get("SPECDIFF_RUN_ROOT", "runs"))


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


class AppState:
    def __init__(self, config: RunConfig, run_dir: Path):
        self.config = config
        self.run_dir = run_dir

    def log(self, message: str):
        click.echo(message)
        with open(self.run_dir / "log.txt", "a", encoding="utf-8") as fh:
            fh.write(message + "\n")

    def pipeline(self, workspace: Path | None = None, need=()) -> Pipeline:
        pipe = Pipeline(self.config.pipeline, seed=self.config.raw["train"]["seed"])
        ws = workspace or self.run_dir
        stats_path = ws / "stats.tsv"
        if stats_path.exists():
            pipe.stats = load_stats(stats_path)
        elif "stats" in need:
            _fail(EXIT_INPUT, f"no stats.tsv in workspace {ws}; run `stats` first")
        for name, module in pipe.all_modules().items():
            ckpt = ws / "ckpt" / name
            if ckpt.exists():
                try:
                    load_into_module(ckpt, module)
                except CheckpointError as exc:
                    _fail(EXIT_CHECKPOINT, str(exc))
            elif name in need:
                _fail(EXIT_INPUT, f"missing checkpoint {ckpt}; train it first")
        return pipe

    def save_pipeline(self, pipe: Pipeline, names=None):
        for name, module in pipe.all_modules().items():
            if names is None or name in names:
                save_module(self.run_dir / "ckpt" / name, module)
        if pipe.stats is not None:
            save_stats(pipe.stats, self.run_dir / "stats.tsv")


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML run configuration; defaults apply otherwise.")
@click.option("--run-dir", type=click.Path(), default=None,
              help="Run directory (default: <run root>/<command>).")
@click.pass_context
def main(ctx, config_path, run_dir):
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    name = ctx.invoked_subcommand or "run"
    run_path = Path(run_dir) if run_dir else _run_root() / name
    run_path.mkdir(parents=True, exist_ok=True)
    save_config(config, run_path / "config.yaml")
    write_vocabulary(run_path / "vocab.txt")
    ctx.obj = AppState(config, run_path)


@main.group()
def corpus():
    """Corpus generation commands."""


@corpus.command("build")
@click.option("--mode", type=click.Choice(["audio", "image"]), default="audio")
@click.option("--n", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def corpus_build(state: AppState, mode, n, seed, out):
    cfg = state.config.raw["corpus"]
    n = n or cfg["n"]
    seed = cfg["seed"] if seed is None else seed
    grammar = GrammarConfig(duration=state.config.raw["clip_duration"])
    manifest = build_corpus(n, seed, out, mode=mode, grammar=grammar, cfg=state.config.dsp)
    state.log(f"built {mode} corpus of {n} samples at {out} (manifest {manifest})")


@main.command()
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.pass_obj
def stats(state: AppState, corpus_dir):
    """Compute global mel statistics over a corpus."""
    from .image import compute_dataset_stats

    captions, mels = load_audio_dataset(Path(corpus_dir) / "manifest.tsv",
                                        state.config.dsp, state.config.raw["clip_duration"])
    result = compute_dataset_stats(mels, scale_k=state.config.raw["stats_scale_k"])
    save_stats(result, state.run_dir / "stats.tsv")
    state.log(f"stats over {len(mels)} clips: mean={result.mean:.6f} std={result.std:.6f}")


def _load_training_images(state: AppState, corpus_dir, pipe: Pipeline, image_mode=False):
    manifest = Path(corpus_dir) / "manifest.tsv"
    if not manifest.exists():
        _fail(EXIT_INPUT, f"no manifest.tsv under {corpus_dir}")
    duration = state.config.raw["clip_duration"]
    if image_mode:
        d, l = pipe.config.mel_shape
        captions, images = load_image_dataset(manifest, duration, height=d, width=l)
        return captions, torch.from_numpy(np.stack(images)).float()
    captions, mels = load_audio_dataset(manifest, state.config.dsp, duration)
    return prepare_pipeline_data(pipe, captions, mels, stats=pipe.stats)


@main.command("train-ae")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.pass_obj
def train_ae(state: AppState, corpus_dir):
    """Train the pixel/latent autoencoder on a corpus."""
    pipe = state.pipeline()
    if pipe.ae.identity:
        state.log("ae_scale is 1 (identity bypass); nothing to train")
        return
    captions, images = _load_training_images(state, corpus_dir, pipe)
    t = state.config.raw["train"]
    history = train_autoencoder(images, pipe.ae, steps=t["ae_steps"], lr=t["ae_lr"],
                                seed=t["seed"], log_every=500)
    state.save_pipeline(pipe, names=("ae",))
    state.log(f"autoencoder trained {t['ae_steps']} steps, final loss {history[-1]:.6f}")


def _train_diffusion(state: AppState, corpus_dir, image_mode, init_from=None):
    need = ("ae", "stats") if state.config.raw["model"]["ae_scale"] > 1 else ()
    pipe = state.pipeline(need=need)
    if init_from:
        for name, module in pipe.trainable_modules().items():
            try:
                load_into_module(Path(init_from) / name, module)
            except CheckpointError as exc:
                _fail(EXIT_CHECKPOINT, f"--init-from rejected: {exc}")
    captions, images = _load_training_images(state, corpus_dir, pipe, image_mode=image_mode)
    latents = encode_latents(pipe, images)
    t = state.config.raw["train"]
    history, _ = train_ldm(pipe, latents, captions, steps=t["steps"],
                           batch_size=t["batch_size"], lr=t["lr"], seed=t["seed"],
                           drop_p=t["drop_p"], log_every=500)
    state.save_pipeline(pipe)
    state.log(f"diffusion trained {t['steps']} steps, final loss {history[-1]:.6f}")


@main.command("pretrain-image")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.pass_obj
def pretrain_image(state: AppState, corpus_dir):
    """Pretrain the denoiser on the toy image corpus."""
    _train_diffusion(state, corpus_dir, image_mode=True)


@main.command("train-ldm")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--init-from", type=click.Path(exists=True), default=None,
              help="Checkpoint directory (e.g. an image-pretraining run's ckpt/).")
@click.pass_obj
def train_ldm_cmd(state: AppState, corpus_dir, init_from):
    """Train the latent diffusion model on an audio corpus."""
    _train_diffusion(state, corpus_dir, image_mode=False, init_from=init_from)


def _guidance(state: AppState, w, steps, seed) -> GuidanceConfig:
    g = dict(state.config.raw["guidance"])
    if w is not None:
        g["w"] = w
    if steps is not None:
        g["steps"] = steps
    if seed is not None:
        g["seed"] = seed
    return GuidanceConfig(**g)


@main.command()
@click.option("--prompt", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--w", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--workspace", type=click.Path(exists=True), default=None,
              help="Directory holding stats.tsv and ckpt/ from training runs.")
@click.option("--out", type=click.Path(), default=None)
@click.pass_obj
def sample(state: AppState, prompt, seed, w, steps, workspace, out):
    """Generate audio from a text prompt."""
    ws = Path(workspace) if workspace else None
    pipe = state.pipeline(workspace=ws, need=("stats",) if ws else ())
    if pipe.stats is None:
        from .image import MelStats

        pipe.stats = MelStats(mean=-5.0, std=3.0)
    guidance = _guidance(state, w, steps, seed)
    clip, mel, _z = pipe.generate(prompt, guidance, gl_seed=guidance.seed)
    out = Path(out) if out else state.run_dir / "sample.wav"
    write_wav(out, clip)
    export_png(pipe.mel_to_image(mel), out.with_suffix(".png"))
    state.log(f"wrote {out} for prompt {prompt!r} (w={guidance.w}, steps={guidance.steps})")


@main.group()
def edit():
    """Audio manipulation commands."""


def _edit_common(f):
    f = click.option("--workspace", type=click.Path(exists=True), required=True)(f)
    f = click.option("--seed", type=int, default=None)(f)
    f = click.option("--w", type=float, default=None)(f)
    f = click.option("--steps", type=int, default=None)(f)
    f = click.option("--out", type=click.Path(), default=None)(f)
    return f


def _write_edit_outputs(state: AppState, pipe, clips, labels, out):
    out_dir = Path(out) if out else state.run_dir
    for clip, label in zip(clips, labels):
        path = out_dir / f"{label}.wav"
        write_wav(path, clip)
        mel = compute_mel(clip, state.config.dsp)
        export_png(pipe.mel_to_image(mel), out_dir / f"{label}.png")
        state.log(f"wrote {path}")


@edit.command("transfer")
@click.option("--source", type=click.Path(exists=True), required=True)
@click.option("--prompt", required=True)
@click.option("--start-fraction", "-n", type=float, default=0.7)
@_edit_common
@click.pass_obj
def edit_transfer(state: AppState, source, prompt, start_fraction, workspace, seed, w, steps, out):
    pipe = state.pipeline(Path(workspace), need=("stats", "unet"))
    req = EditRequest(kind="style_transfer", prompt=prompt, start_fraction=start_fraction,
                      guidance=_guidance(state, w, steps, seed))
    try:
        src = read_wav(source)
    except (OSError, ValueError) as exc:
        _fail(EXIT_INPUT, str(exc))
    target = int(round(state.config.raw["clip_duration"] * state.config.dsp.sample_rate))
    result = style_transfer(pipe, src.padded_to(target), req)
    _write_edit_outputs(state, pipe, [src, result], ["source", "transferred"], out)


@edit.command("inpaint")
@click.option("--source", type=click.Path(exists=True), required=True)
@click.option("--prompt", required=True)
@click.option("--mask", nargs=2, type=float, required=True, help="Masked interval, seconds.")
@_edit_common
@click.pass_obj
def edit_inpaint(state: AppState, source, prompt, mask, workspace, seed, w, steps, out):
    pipe = state.pipeline(Path(workspace), need=("stats", "unet"))
    req = EditRequest(kind="inpaint", prompt=prompt, mask_interval=tuple(mask),
                      guidance=_guidance(state, w, steps, seed))
    src = read_wav(source)
    target = int(round(state.config.raw["clip_duration"] * state.config.dsp.sample_rate))
    result = inpaint(pipe, src.padded_to(target), req)
    _write_edit_outputs(state, pipe, [src, result], ["source", "inpainted"], out)


@edit.command("swap")
@click.option("--source-prompt", required=True)
@click.option("--prompt", required=True)
@click.option("--window", type=float, default=0.8)
@_edit_common
@click.pass_obj
def edit_swap(state: AppState, source_prompt, prompt, window, workspace, seed, w, steps, out):
    pipe = state.pipeline(Path(workspace), need=("stats", "unet"))
    req = EditRequest(kind="word_swap", prompt=prompt, source_prompt=source_prompt,
                      injection_window=window, guidance=_guidance(state, w, steps, seed))
    src_audio, dst_audio, _zs, _zd = word_swap(pipe, req)
    _write_edit_outputs(state, pipe, [src_audio, dst_audio], ["source", "swapped"], out)


@edit.command("reweight")
@click.option("--prompt", required=True)
@click.option("--token", required=True)
@click.option("--scale", "-c", type=float, required=True)
@_edit_common
@click.pass_obj
def edit_reweight(state: AppState, prompt, token, scale, workspace, seed, w, steps, out):
    pipe = state.pipeline(Path(workspace), need=("stats", "unet"))
    req = EditRequest(kind="reweight", prompt=prompt, token=token, scale=scale,
                      guidance=_guidance(state, w, steps, seed))
    clip, _z = reweight(pipe, req)
    _write_edit_outputs(state, pipe, [clip], ["reweighted"], out)


@main.command("attn-viz")
@click.option("--prompt", required=True)
@click.option("--workspace", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--w", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.pass_obj
def attn_viz(state: AppState, prompt, workspace, seed, w, steps):
    """Export per-token attention heatmaps and a localization score table."""
    pipe = state.pipeline(Path(workspace), need=("stats", "unet"))
    guidance = _guidance(state, w, steps, seed)
    recorder = AttentionRecorder()
    z = pipe.sample_latent(prompt, guidance, controller=recorder)
    mel = pipe.latent_to_mel(z)
    words = prompt.lower().split()
    ref_shape = pipe.config.latent_shape[1:]
    threshold = int(guidance.steps * 0.2)
    lines = ["token\tlocalization_first_half\tinterval"]
    for i, word in enumerate(words):
        amap = aggregate_maps(recorder.records, i, ref_shape, token=word,
                              timestep_filter=lambda t: t <= pipe.schedule.T * 0.8)
        export_map_png(amap, state.run_dir / f"attn_{i:02d}_{word}.png",
                       underlay=pipe.mel_to_image(mel))
        score = localization_score(amap, (0.0, 0.5))
        lines.append(f"{word}\t{score:.6f}\t[0.0,0.5)")
    (state.run_dir / "attention_scores.tsv").write_text("\n".join(lines) + "\n")
    state.log(f"wrote {len(words)} attention maps to {state.run_dir}")


@main.command("eval")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--generated", type=click.Path(exists=True), default=None,
              help="Directory of generated WAVs; defaults to the corpus itself.")
@click.option("--workspace", type=click.Path(exists=True), default=None)
@click.pass_obj
def eval_cmd(state: AppState, corpus_dir, generated, workspace):
    """Classifier metrics + oracle accuracy of a corpus (or generated set)."""
    from .image import compute_dataset_stats, normalize_global

    duration = state.config.raw["clip_duration"]
    captions, mels = load_audio_dataset(Path(corpus_dir) / "manifest.tsv",
                                        state.config.dsp, duration)
    stats_obj = compute_dataset_stats(mels, scale_k=state.config.raw["stats_scale_k"])
    images = torch.stack([
        torch.from_numpy(normalize_global(m, stats_obj).values).float() for m in mels
    ])
    n_train = int(len(images) * 0.8)
    classifier = train_classifier(images[:n_train], captions[:n_train],
                                  duration=duration, seed=state.config.raw["train"]["seed"])
    held_acc = classifier_accuracy(classifier, images[n_train:], captions[n_train:], duration)
    if held_acc < 0.9:
        _fail(EXIT_CALIBRATION,
              f"classifier calibration failed: held-out accuracy {held_acc:.3f} < 0.9")

    if generated:
        gen_records = read_manifest(Path(generated) / "manifest.tsv", duration)
        gen_captions = [c.caption for _sid, c in gen_records]
        gen_captions_mels = load_audio_dataset(Path(generated) / "manifest.tsv",
                                               state.config.dsp, duration)
        gen_mels = gen_captions_mels[1]
    else:
        gen_captions, gen_mels = captions, mels

    gen_images = torch.stack([
        torch.from_numpy(normalize_global(m, stats_obj).values).float() for m in gen_mels
    ])
    with torch.no_grad():
        feats_ref = classifier.features(images).numpy()
        probs_ref = classifier(images).numpy()
        feats_gen = classifier.features(gen_images).numpy()
        probs_gen = classifier(gen_images).numpy()
    fd = frechet_distance(feats_gen, feats_ref)
    kl, is_score = kl_and_is(probs_gen, probs_ref if len(probs_gen) == len(probs_ref) else None)

    root = Path(generated or corpus_dir)
    accs = []
    for sample_id, clip in read_manifest(root / "manifest.tsv", duration):
        wav = read_wav(root / f"{sample_id}.wav")
        accs.append(event_accuracy_oracle(wav, clip.events))
    acc = float(np.mean(accs))
    report = (f"fd\t{fd:.6f}\nkl\t{0.0 if kl is None else kl:.6f}\n"
              f"is\t{is_score:.6f}\nacc\t{acc:.6f}\nclassifier_heldout\t{held_acc:.6f}\n")
    (state.run_dir / "eval.tsv").write_text(report, encoding="utf-8")
    state.log(report.strip())


@main.command("sweep")
@click.option("--workspace", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--w-list", default="0,1,3,7.5")
@click.option("--steps-list", default="25,100")
@click.option("--n-prompts", type=int, default=50)
@click.pass_obj
def sweep_cmd(state: AppState, workspace, corpus_dir, w_list, steps_list, n_prompts):
    """Guidance/steps grid; one TSV row per cell."""
    pipe = state.pipeline(Path(workspace), need=("stats", "unet"))
    duration = state.config.raw["clip_duration"]
    captions, mels = load_audio_dataset(Path(corpus_dir) / "manifest.tsv",
                                        state.config.dsp, duration)
    prompts = captions[:n_prompts]
    ws = [float(x) for x in w_list.split(",")]
    steps = [int(x) for x in steps_list.split(",")]
    rows = run_sweep(pipe, None, prompts, ws, steps,
                     seed=state.config.raw["guidance"]["seed"])
    write_sweep_tsv(rows, state.run_dir / "sweep.tsv")
    state.log(f"wrote sweep of {len(rows)} cells to {state.run_dir / 'sweep.tsv'}")


if __name__ == "__main__":
    main()
