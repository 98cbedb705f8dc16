from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Channel(str, Enum):
    WHISPER = "whisper"
    NAM = "nam"


class ScheduleShape(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class SampleVariance(str, Enum):
    BETA = "beta"
    POSTERIOR = "posterior"


class OptimizerKind(str, Enum):
    ADAM = "adam"
    MOMENTUM = "momentum"


class SimulationMethod(str, Enum):
    DIFFUSION = "diffusion"
    TTS = "tts"
    UNITS = "units"
    DTW = "dtw"
    CROSS_ATTENTION = "cross-attention"


class NamInput(str, Enum):
    """What the converter reads: raw NAM feature vectors, or log-mels of rendered NAM audio."""

    FEATURES = "features"
    AUDIO = "audio"


class AudioBuffer(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray
    sample_rate: int = 16000

    @field_validator("samples", mode="before")
    @classmethod
    def _as_float(cls, value):
        return np.asarray(value, dtype=np.float64).reshape(-1)

    @model_validator(mode="after")
    def _check(self) -> "AudioBuffer":
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        return self

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


class MelSpectrogram(BaseModel):
    """T x n_mels natural-log mel energies plus the framing they were computed with."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    frames: np.ndarray
    hop: int = 320
    window: int = 800
    sample_rate: int = 16000
    n_mels: int = 80
    log_floor: float = 1e-5

    @field_validator("frames", mode="before")
    @classmethod
    def _as_matrix(cls, value):
        return np.atleast_2d(np.asarray(value, dtype=np.float64))

    @model_validator(mode="after")
    def _check(self) -> "MelSpectrogram":
        if self.hop > self.window:
            raise ValueError("hop must not exceed window")
        if self.frames.shape[1] != self.n_mels:
            raise ValueError(f"expected {self.n_mels} mel bins, got {self.frames.shape[1]}")
        if self.frames.size and self.frames.min() < np.log(self.log_floor) - 1e-9:
            raise ValueError("mel entries fall below log(floor)")
        return self

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


class PhonemeSeq(BaseModel):
    model_config = ConfigDict(frozen=True)

    ids: Tuple[int, ...]
    inventory_size: int

    @model_validator(mode="after")
    def _check(self) -> "PhonemeSeq":
        if not self.ids:
            raise ValueError("phoneme sequence must be non-empty")
        if min(self.ids) < 0 or max(self.ids) >= self.inventory_size:
            raise ValueError("phoneme id outside the inventory")
        return self

    def __len__(self) -> int:
        return len(self.ids)


class Durations(BaseModel):
    model_config = ConfigDict(frozen=True)

    frames: Tuple[int, ...]
    frame_rate: float = 50.0

    @model_validator(mode="after")
    def _check(self) -> "Durations":
        if any(d < 1 for d in self.frames):
            raise ValueError("every duration must be at least one frame")
        return self

    @property
    def total(self) -> int:
        return int(sum(self.frames))

    def __len__(self) -> int:
        return len(self.frames)


class DtwPath(BaseModel):
    model_config = ConfigDict(frozen=True)

    pairs: Tuple[Tuple[int, int], ...]
    cost: float

    @model_validator(mode="after")
    def _check(self) -> "DtwPath":
        if not self.pairs or self.pairs[0] != (0, 0):
            raise ValueError("path must start at (0, 0)")
        for (i0, j0), (i1, j1) in zip(self.pairs, self.pairs[1:]):
            if (i1 - i0, j1 - j0) not in {(1, 0), (0, 1), (1, 1)}:
                raise ValueError(f"illegal step from {(i0, j0)} to {(i1, j1)}")
        return self


class ManifestEntry(BaseModel):
    utt_id: str
    speaker: int = 0
    text: str
    phonemes: List[int]
    durations: List[int]
    n_frames: int
    files: Dict[str, str] = Field(default_factory=dict)


class RunRecord(BaseModel):
    command: str
    config_hash: str
    seed: int
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    wall_time: float = 0.0
    started_at: datetime = Field(default_factory=datetime.now)


class ErrorRates(BaseModel):
    wer: float
    cer: float
    n: int
    utt_id: Optional[str] = None
