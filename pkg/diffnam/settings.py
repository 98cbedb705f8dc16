import hashlib
import json
import os
from pathlib import Path
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .errors import ConfigError
from .models import Channel, NamInput, OptimizerKind, SampleVariance, ScheduleShape

load_dotenv()

# NAM_LOG is the only environment variable the pipeline reads.
LOG_LEVEL = os.getenv("NAM_LOG", "info").lower()


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)

    # Run
    seed: int = 7
    out_dir: str = "runs"

    # Audio / features
    sample_rate: int = 16000
    hop: int = 320
    window: int = 800
    n_fft: int = 1024
    n_mels: int = 80
    log_floor: float = 1e-5
    griffin_lim_iters: int = 60

    # Synthetic corpus
    n_utts: int = 50
    min_len: int = 10
    max_len: int = 20
    min_dur: int = 5
    max_dur: int = 9
    n_phonemes: int = 12
    n_speakers: int = 2
    feature_dim: int = 16
    template_distance: float = 5.0
    sigma_w: float = 0.5
    sigma_n: float = 1.5
    sigma_lip: float = 1.0
    mel_noise: float = 0.05

    # Forced alignment
    align_channel: Channel = Channel.WHISPER
    aligner_iterations: int = 10
    variance_floor: float = 1e-3
    per_speaker: bool = False

    # Speech units
    n_units: int = 100
    kmeans_iterations: int = 25

    # Diffusion
    diffusion_steps: int = 50
    beta_start: float = 0.002
    beta_end: float = 0.4
    schedule_shape: ScheduleShape = ScheduleShape.LINEAR
    sample_variance: SampleVariance = SampleVariance.BETA
    guidance_scale: float = 1.5
    drop_prob: float = 0.1
    text_dim: int = 16
    # Full-size conditioner width; stored in checkpoints, never used for shapes.
    reference_conditioner_dim: Optional[int] = None
    denoiser_hidden: int = 64
    denoiser_kernel: int = 3
    segment_frames: int = 50
    diffusion_train_steps: int = 1500
    diffusion_batch_size: int = 8

    # Seq2Seq
    model_dim: int = 32
    heads: int = 2
    conv_kernel: int = 3
    conv_hidden: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    lambda_ctc: float = 1.0
    lambda_units: float = 0.1
    epochs: int = 60
    nam_input: NamInput = NamInput.AUDIO

    # Learned simulation routes
    studio_utts: int = 50
    cross_attention_epochs: int = 40

    # Optimisation
    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 2e-3
    momentum: float = 0.9
    batch_size: int = 16
    grad_clip: float = 1.0

    @model_validator(mode="after")
    def _check_ranges(self) -> "PipelineConfig":
        if not 0 < self.hop <= self.window <= self.n_fft:
            raise ValueError("hop <= window <= n_fft is required")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("0 < beta_start <= beta_end < 1 is required")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 0 < self.sigma_w < self.sigma_n:
            raise ValueError("0 < sigma_w < sigma_n is required")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("1 <= min_len <= max_len is required")
        if not 1 <= self.min_dur <= self.max_dur:
            raise ValueError("1 <= min_dur <= max_dur is required")
        if self.n_phonemes < 2:
            raise ValueError("n_phonemes must be at least 2")
        if self.conv_kernel % 2 == 0 or self.denoiser_kernel % 2 == 0:
            raise ValueError("convolution kernels must have odd width")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")
        return self

    @property
    def conditioner_dim(self) -> int:
        # lip + nam + text streams
        return 2 * self.feature_dim + self.text_dim

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


PRESETS: Dict[str, Dict[str, object]] = {
    "desk": {},
    # Hyper-parameters stated for the full-size conversion network.
    "full": {
        "encoder_layers": 6,
        "decoder_layers": 6,
        "batch_size": 16,
        "learning_rate": 2e-4,
        "momentum": 0.9,
        "optimizer": OptimizerKind.MOMENTUM,
        "n_units": 100,
        "reference_conditioner_dim": 1536,
    },
}


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
    preset: str = "desk",
) -> PipelineConfig:
    """Build a config from a preset, a key=value file and CLI overrides (in that order)."""
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    values: Dict[str, object] = dict(PRESETS[preset])

    if path is not None:
        if not Path(path).is_file():
            raise ConfigError("--config", f"file not found: {path}")
        for key, value in dotenv_values(path).items():
            values[key.strip().lower()] = value
    for key, value in (overrides or {}).items():
        values[key.strip().lower()] = value

    known = set(PipelineConfig.model_fields)
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")

    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(key, first["msg"]) from e


settings = PipelineConfig()
