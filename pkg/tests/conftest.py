import numpy as np
import pytest
import torch

from specdiff.audio import DspConfig
from specdiff.pipeline import Pipeline, PipelineConfig


def pytest_configure(config):
    torch.set_num_threads(1)


MICRO_DSP = DspConfig(sample_rate=16000, n_fft=256, win_length=128, hop=64, n_mels=16)
MICRO_DURATION = 0.256  # -> mel (16, 64)


def micro_pipeline_config(**overrides) -> PipelineConfig:
    base = dict(dsp=MICRO_DSP, clip_duration=MICRO_DURATION, ae_scale=1,
                image_channels=3, unet_widths=(8, 16, 24), d_tau=16,
                T=50, gl_iters=4)
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture
def micro_pipe():
    from specdiff.image import MelStats

    pipe = Pipeline(micro_pipeline_config(), seed=0)
    pipe.stats = MelStats(mean=-5.0, std=3.0)
    return pipe


@pytest.fixture
def rng():
    return np.random.default_rng(0)
