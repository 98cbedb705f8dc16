"""
Deterministic toy parallel corpora.

Every utterance is a phoneme sequence with planted durations at 50 Hz. Its
channels are derived from one clean template stream:

    whisper = template stream + N(0, sigma_w^2)
    nam     = 5-frame moving average of whisper + N(0, sigma_n^2)
    lip     = pairwise frame average of the template stream (25 Hz) + N(0, sigma_lip^2)
    mel     = -6 + phoneme template @ projection + N(0, mel_noise^2), floored at log(1e-5)

NAM audio is rendered from -7 + nam @ projection, the same projection one nat
quieter, so the murmur channel has a waveform of its own.

All randomness flows from one root seed through numpy's SeedSequence: child 0
builds the inventory, child i + 1 builds utterance i.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.ndimage import uniform_filter1d

from . import dsp
from .errors import ConfigError, ContractError, FormatError
from .formats import read_checkpoint, read_features, read_jsonl, write_checkpoint, write_features, write_jsonl
from .models import AudioBuffer, Durations, ManifestEntry, MelSpectrogram, PhonemeSeq
from .settings import PipelineConfig, settings

logger = structlog.get_logger()

SYMBOLS = [
    "AA", "IY", "UW", "EH", "OW", "AE", "S", "T", "M", "N", "L", "K",
    "P", "B", "D", "G", "F", "V", "Z", "R", "W", "Y", "SH", "HH",
]
MEL_OFFSET = -6.0
NAM_SMOOTHING = 5
LIP_FACTOR = 2
# NAM audio sits this many nats below the speech level
NAM_ATTENUATION = 1.0
CHANNELS = ("whisper", "nam", "lip", "mel")
_MAX_TEMPLATE_DRAWS = 10000


@dataclass(eq=False)
class ToyInventory:
    symbols: List[str]
    templates: np.ndarray          # (P, D)
    speaker_offsets: np.ndarray    # (S, D)
    mel_projection: np.ndarray     # (D, n_mels)
    log_floor: float = 1e-5

    @property
    def size(self) -> int:
        return len(self.symbols)

    def mel_means(self) -> np.ndarray:
        """Planted noise-free mel frame for every phoneme, (P, n_mels)."""
        return np.maximum(MEL_OFFSET + self.templates @ self.mel_projection, np.log(self.log_floor))

    def text(self, phonemes: PhonemeSeq) -> str:
        return " ".join(self.symbols[i] for i in phonemes.ids)

    def parse(self, text: str) -> List[int]:
        lookup = {s.lower(): i for i, s in enumerate(self.symbols)}
        return [lookup[tok] for tok in text.lower().split() if tok in lookup]


class ParallelUtterance(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    utt_id: str
    speaker: int
    phonemes: PhonemeSeq
    durations: Durations
    text: str
    whisper: np.ndarray
    nam: np.ndarray
    lip: np.ndarray
    mel: np.ndarray
    clean: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check(self) -> "ParallelUtterance":
        n = self.durations.total
        if len(self.phonemes) != len(self.durations):
            raise ValueError("phonemes and durations differ in length")
        if self.whisper.shape[0] != n or self.nam.shape[0] != n or self.mel.shape[0] != n:
            raise ValueError("50 Hz channels must have sum(durations) frames")
        if self.lip.shape[0] != -(-n // LIP_FACTOR):
            raise ValueError("lip channel must have ceil(frames / 2) frames")
        return self

    @property
    def n_frames(self) -> int:
        return self.durations.total

    def channel(self, name: str) -> np.ndarray:
        if name not in CHANNELS:
            raise ContractError(f"unknown channel {name!r}")
        return getattr(self, name)


@dataclass(eq=False)
class Corpus:
    inventory: ToyInventory
    utterances: List[ParallelUtterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[ParallelUtterance]:
        return iter(self.utterances)

    def __getitem__(self, index: int) -> ParallelUtterance:
        return self.utterances[index]


# ============================================================================
# GENERATION
# ============================================================================

def build_inventory(rng: np.random.Generator, config: PipelineConfig) -> ToyInventory:
    if config.n_phonemes > len(SYMBOLS):
        raise ConfigError("n_phonemes", f"at most {len(SYMBOLS)} toy phonemes are available")
    dim = config.feature_dim
    templates: List[np.ndarray] = []
    for _ in range(_MAX_TEMPLATE_DRAWS):
        candidate = rng.normal(0.0, 2.0, dim)
        if all(np.linalg.norm(candidate - t) >= config.template_distance for t in templates):
            templates.append(candidate)
            if len(templates) == config.n_phonemes:
                break
    else:
        raise ConfigError("template_distance", "could not place templates this far apart")
    offsets = rng.normal(0.0, 0.5, (config.n_speakers, dim))
    offsets[0] = 0.0
    projection = rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, config.n_mels))
    return ToyInventory(
        symbols=SYMBOLS[: config.n_phonemes],
        templates=np.array(templates),
        speaker_offsets=offsets,
        mel_projection=projection,
        log_floor=config.log_floor,
    )


def _sample_phonemes(rng: np.random.Generator, length: int, inventory_size: int) -> List[int]:
    ids = [int(rng.integers(inventory_size))]
    for _ in range(1, length):
        step = int(rng.integers(1, inventory_size))
        ids.append((ids[-1] + step) % inventory_size)
    return ids


def pair_average(frames: np.ndarray, factor: int = LIP_FACTOR) -> np.ndarray:
    """Average consecutive groups of `factor` frames; a short tail group averages what it has."""
    n = frames.shape[0]
    out = -(-n // factor)
    padded = np.concatenate([frames, np.repeat(frames[-1:], out * factor - n, axis=0)])
    return padded.reshape(out, factor, -1).mean(axis=1)


def mel_from_utterance(
    inventory: ToyInventory,
    phonemes: PhonemeSeq,
    durations: Durations,
    noise: float = 0.05,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Mel target: planted per-phoneme projection, repeated by duration, plus small noise."""
    frames = np.repeat(MEL_OFFSET + inventory.templates[list(phonemes.ids)] @ inventory.mel_projection,
                       durations.frames, axis=0)
    if noise > 0:
        if rng is None:
            raise ContractError("a noise generator is required when noise > 0")
        frames = frames + rng.normal(0.0, noise, frames.shape)
    return np.maximum(frames, np.log(inventory.log_floor))


def make_utterance(
    index: int,
    rng: np.random.Generator,
    inventory: ToyInventory,
    config: PipelineConfig,
    sigma_w: float,
    sigma_n: float,
    min_len: int,
    max_len: int,
) -> ParallelUtterance:
    length = int(rng.integers(min_len, max_len + 1))
    phonemes = PhonemeSeq(ids=tuple(_sample_phonemes(rng, length, inventory.size)),
                          inventory_size=inventory.size)
    durations = Durations(frames=tuple(int(d) for d in rng.integers(config.min_dur, config.max_dur + 1, length)))
    speaker = int(rng.integers(config.n_speakers))

    clean = np.repeat(inventory.templates[list(phonemes.ids)] + inventory.speaker_offsets[speaker],
                      durations.frames, axis=0)
    whisper = clean + rng.normal(0.0, sigma_w, clean.shape)
    nam = uniform_filter1d(whisper, size=NAM_SMOOTHING, axis=0, mode="nearest")
    nam = nam + rng.normal(0.0, sigma_n, clean.shape)
    lip = pair_average(clean)
    lip = lip + rng.normal(0.0, config.sigma_lip, lip.shape)
    mel = mel_from_utterance(inventory, phonemes, durations, config.mel_noise, rng)

    return ParallelUtterance(
        utt_id=f"utt{index:05d}",
        speaker=speaker,
        phonemes=phonemes,
        durations=durations,
        text=inventory.text(phonemes),
        whisper=whisper,
        nam=nam,
        lip=lip,
        mel=mel,
        clean=clean,
    )


def gen_corpus(
    seed: int,
    n_utts: int,
    min_len: Optional[int] = None,
    max_len: Optional[int] = None,
    sigma_w: Optional[float] = None,
    sigma_n: Optional[float] = None,
    config: PipelineConfig = settings,
) -> Corpus:
    min_len = config.min_len if min_len is None else min_len
    max_len = config.max_len if max_len is None else max_len
    sigma_w = config.sigma_w if sigma_w is None else sigma_w
    sigma_n = config.sigma_n if sigma_n is None else sigma_n
    if not 0 < sigma_w < sigma_n:
        raise ConfigError("sigma_n", f"need 0 < sigma_w < sigma_n, got {sigma_w} and {sigma_n}")
    if not 1 <= min_len <= max_len:
        raise ConfigError("min_len", f"need 1 <= min_len <= max_len, got {min_len} and {max_len}")
    if n_utts < 0:
        raise ConfigError("n_utts", "must be non-negative")

    children = np.random.SeedSequence(seed).spawn(n_utts + 1)
    inventory = build_inventory(np.random.default_rng(children[0]), config)
    utterances = [
        make_utterance(i, np.random.default_rng(children[i + 1]), inventory, config,
                       sigma_w, sigma_n, min_len, max_len)
        for i in range(n_utts)
    ]
    logger.info("corpus_generated", seed=seed, n_utts=n_utts,
                frames=int(np.sum([u.n_frames for u in utterances])))
    return Corpus(inventory, utterances)


def nam_mel(inventory: ToyInventory, nam: np.ndarray) -> np.ndarray:
    """Log-mel frames of the murmur channel: the NAM vectors through the mel projection, attenuated."""
    frames = MEL_OFFSET - NAM_ATTENUATION + np.asarray(nam) @ inventory.mel_projection
    return np.maximum(frames, np.log(inventory.log_floor))


def render_audio(
    utt: ParallelUtterance,
    config: PipelineConfig = settings,
    channel: str = "mel",
    inventory: Optional[ToyInventory] = None,
) -> AudioBuffer:
    """Griffin-Lim rendering of the mel target (or of the NAM channel); exactly n_frames * hop samples."""
    if channel == "mel":
        frames = utt.mel
    elif channel == "nam":
        if inventory is None:
            raise ContractError("rendering NAM audio needs the inventory's mel projection")
        frames = nam_mel(inventory, utt.nam)
    else:
        raise ContractError(f"only the mel and nam channels can be rendered, got {channel!r}")
    mel = MelSpectrogram(frames=frames, hop=config.hop, window=config.window,
                         sample_rate=config.sample_rate, n_mels=config.n_mels, log_floor=config.log_floor)
    audio = dsp.griffin_lim(mel, config.griffin_lim_iters, config.n_fft)
    samples = audio.samples
    want = utt.n_frames * config.hop
    if samples.size < want:
        samples = np.pad(samples, (0, want - samples.size))
    return AudioBuffer(samples=samples[:want], sample_rate=config.sample_rate)


# ============================================================================
# DISK LAYOUT
# ============================================================================

def _channel_meta(name: str, n_cols: int, config: PipelineConfig):
    hop = config.hop * LIP_FACTOR if name == "lip" else config.hop
    return dsp.features_meta(n_cols, hop, config.window, config.sample_rate)


def write_corpus(corpus: Corpus, out_dir: Path, config: PipelineConfig = settings) -> Path:
    """Write features/<utt>.<channel>.namf, inventory.namc and manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)

    inv = corpus.inventory
    write_checkpoint(
        out_dir / "inventory.namc",
        {"kind": "toy_inventory", "symbols": inv.symbols, "log_floor": inv.log_floor},
        {"templates": inv.templates, "speaker_offsets": inv.speaker_offsets,
         "mel_projection": inv.mel_projection},
    )

    entries = []
    for utt in corpus:
        files: Dict[str, str] = {}
        for name in CHANNELS:
            matrix = utt.channel(name)
            rel = f"features/{utt.utt_id}.{name}.namf"
            write_features(out_dir / rel, matrix, _channel_meta(name, matrix.shape[1], config))
            files[name] = rel
        entries.append(ManifestEntry(
            utt_id=utt.utt_id, speaker=utt.speaker, text=utt.text,
            phonemes=list(utt.phonemes.ids), durations=list(utt.durations.frames),
            n_frames=utt.n_frames, files=files,
        ))
    manifest = out_dir / "manifest.jsonl"
    write_jsonl(manifest, entries)
    return manifest


def read_inventory(path: Path) -> ToyInventory:
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "toy_inventory":
        raise FormatError(f"{path} is not a toy inventory")
    return ToyInventory(
        symbols=list(meta["symbols"]),
        templates=tensors["templates"],
        speaker_offsets=tensors["speaker_offsets"],
        mel_projection=tensors["mel_projection"],
        log_floor=float(meta["log_floor"]),
    )


def read_manifest(path: Path) -> List[ManifestEntry]:
    return [ManifestEntry(**record) for record in read_jsonl(path)]


def read_corpus(data_dir: Path) -> Corpus:
    data_dir = Path(data_dir)
    inventory = read_inventory(data_dir / "inventory.namc")
    utterances = []
    for entry in read_manifest(data_dir / "manifest.jsonl"):
        channels = {name: read_features(data_dir / entry.files[name])[0] for name in CHANNELS}
        utterances.append(ParallelUtterance(
            utt_id=entry.utt_id,
            speaker=entry.speaker,
            phonemes=PhonemeSeq(ids=tuple(entry.phonemes), inventory_size=inventory.size),
            durations=Durations(frames=tuple(entry.durations)),
            text=entry.text,
            mel=np.maximum(channels.pop("mel"), np.log(inventory.log_floor)),
            **channels,
        ))
    return Corpus(inventory, utterances)
