import numpy as np
import pytest

from diffnam.logs import configure_logging
from diffnam.models import AudioBuffer
from diffnam.settings import PipelineConfig, load_config
from diffnam.synthdata import gen_corpus

configure_logging("warning")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def config():
    return PipelineConfig()


@pytest.fixture(scope="session")
def fast_config():
    """Small shapes so training-based tests stay quick."""
    return load_config(overrides={
        "n_utts": "12",
        "min_len": "4",
        "max_len": "8",
        "griffin_lim_iters": "8",
        "diffusion_train_steps": "20",
        "epochs": "2",
        "n_units": "8",
        "denoiser_hidden": "16",
        "model_dim": "16",
        "conv_hidden": "16",
        "encoder_layers": "1",
        "decoder_layers": "1",
    })


@pytest.fixture(scope="session")
def default_corpus(config):
    return gen_corpus(7, 50, config=config)


@pytest.fixture(scope="session")
def small_corpus(fast_config):
    return gen_corpus(3, 6, config=fast_config)


@pytest.fixture
def sine():
    def make(freq: float, seconds: float = 1.0, amplitude: float = 0.5, rate: int = 16000) -> AudioBuffer:
        t = np.arange(int(round(seconds * rate))) / rate
        return AudioBuffer(samples=amplitude * np.sin(2 * np.pi * freq * t), sample_rate=rate)
    return make
