"""Desk-scale text-to-audio latent diffusion toolkit.

Pipeline: procedural captioned audio corpus -> log-mel images ->
conv autoencoder latents -> cross-attention conditioned denoiser with
classifier-free guidance -> Griffin-Lim back to audio, plus attention
analysis, editing procedures and objective metrics.
"""

from .audio import (AudioClip, DEFAULT_DSP, DspConfig, MelSpectrogram, TEST_DSP,
                    TRAIN_DSP, compute_mel, invert_mel_griffin_lim, read_wav, write_wav)
from .config import DEFAULT_CONFIG, ConfigError, RunConfig, load_config, save_config
from .corpus import (CaptionedClip, EventSpec, GrammarConfig, build_corpus,
                     events_to_caption, parse_caption, read_manifest, render_audio)
from .diffusion import (GuidanceConfig, NoiseSchedule, ancestral_sample, build_schedule,
                        cfg_predict, q_sample, strided_deterministic_sample, training_loss)
from .edits import EditRequest, inpaint, reweight, style_transfer, word_swap
from .image import (MelStats, SpectroImage, compute_dataset_stats, denormalize_global,
                    normalize_global)
from .pipeline import Pipeline, PipelineConfig
from .text import ConditionEmbedding, TextEncoder, ensemble_encode, tokenize
from .unet import AttentionRecorder, UNet, UNetConfig

__version__ = "0.1.0"
