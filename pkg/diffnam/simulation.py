"""
Ground-truth simulation routes.

Every route turns a corpus utterance into a simulated mel target with as many
frames as the utterance:

    diffusion        conditional DDPM over (lip, NAM, text)
    tts              per-phoneme mean mel table, length-regulated by durations
    units            whisper -> k-means unit ids -> per-unit mean mel
    dtw              studio reference of the same text warped onto the whisper timeline
    cross-attention  lip queries attend over phoneme keys; a decoder predicts mel units

The units and cross-attention routes learn from a separate studio corpus that
shares the inventory but none of the utterances.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from . import numerics as nx
from .align import PhonemeTTS, dtw, length_regulate
from .diffusion import DiffNamModel
from .errors import ContractError, DimensionError
from .models import Durations, DtwPath, PhonemeSeq, SimulationMethod
from .nn import LayerNorm, Linear, Module, make_optimizer, sinusoidal_encoding
from .numerics import Tape, Tensor
from .seq2seq import FftBlock, FftBlockConfig, MultiHeadAttention
from .settings import PipelineConfig, settings
from .synthdata import LIP_FACTOR, Corpus, ParallelUtterance, ToyInventory, make_utterance
from .units import Codebook, kmeans_fit

logger = structlog.get_logger()

Alignments = Dict[str, Tuple[PhonemeSeq, Durations]]

# spawn key that keeps studio draws apart from the corpus stream
_STUDIO_STREAM = 1


def studio_corpus(inventory: ToyInventory, config: PipelineConfig = settings, seed: int = 0,
                  n_utts: Optional[int] = None) -> Corpus:
    """Fresh utterances over the same inventory; the out-of-domain training set for learned routes."""
    n_utts = config.studio_utts if n_utts is None else n_utts
    if n_utts < 1:
        raise ContractError("the studio corpus needs at least one utterance")
    children = np.random.SeedSequence([seed, _STUDIO_STREAM]).spawn(n_utts)
    utterances = [
        make_utterance(i, np.random.default_rng(child), inventory, config,
                       config.sigma_w, config.sigma_n, config.min_len, config.max_len)
        for i, child in enumerate(children)
    ]
    return Corpus(inventory, utterances)


def _unit_count(frames: np.ndarray, n_units: int) -> int:
    if n_units < 1:
        raise ContractError("unit routes need n_units >= 1")
    return min(n_units, frames.shape[0])


# ============================================================================
# UNIT VOCODER
# ============================================================================

class UnitVocoder:
    """Whisper frames quantised to k-means units, each unit rendered as its mean mel frame."""

    def __init__(self, codebook: Codebook, mel_table: np.ndarray):
        mel_table = np.asarray(mel_table, dtype=np.float64)
        if mel_table.ndim != 2 or mel_table.shape[0] != codebook.size:
            raise DimensionError("UnitVocoder", mel_table.shape, (codebook.size, mel_table.shape[-1]))
        self.codebook = codebook
        self.mel_table = mel_table

    @classmethod
    def fit(cls, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], n_units: int,
            iterations: int = 25, seed: int = 0) -> "UnitVocoder":
        if not pairs:
            raise ContractError("the unit vocoder needs at least one (whisper, mel) pair")
        for whisper, mel in pairs:
            if whisper.shape[0] != mel.shape[0]:
                raise DimensionError("UnitVocoder.fit", whisper.shape, mel.shape)
        whisper = np.concatenate([w for w, _ in pairs])
        mels = np.concatenate([m for _, m in pairs])
        codebook = kmeans_fit(whisper, _unit_count(whisper, n_units), iterations, seed)
        ids = codebook.encode(whisper)
        sums = np.zeros((codebook.size, mels.shape[1]))
        counts = np.zeros(codebook.size)
        np.add.at(sums, ids, mels)
        np.add.at(counts, ids, 1.0)
        table = np.tile(mels.mean(axis=0), (codebook.size, 1))
        used = counts > 0
        table[used] = sums[used] / counts[used, None]
        return cls(codebook, table)

    def units(self, whisper: np.ndarray) -> np.ndarray:
        return self.codebook.encode(whisper)

    def synthesize(self, whisper: np.ndarray) -> np.ndarray:
        return self.mel_table[self.units(whisper)]


# ============================================================================
# DTW REFERENCE
# ============================================================================

def reference_durations(phonemes: PhonemeSeq, config: PipelineConfig = settings) -> Durations:
    """Studio pacing: every phoneme held for the middle of the duration range."""
    frames = int(round((config.min_dur + config.max_dur) / 2))
    return Durations(frames=(frames,) * len(phonemes))


def studio_reference(inventory: ToyInventory, phonemes: PhonemeSeq,
                     config: PipelineConfig = settings) -> Tuple[np.ndarray, np.ndarray]:
    """Clean (features, mel) recording of a text by the reference speaker."""
    durations = reference_durations(phonemes, config)
    ids = np.asarray(phonemes.ids)
    features = length_regulate(inventory.templates[ids], durations)
    mel = length_regulate(inventory.mel_means()[ids], durations)
    return features, mel


def warp_onto(path: DtwPath, frames: np.ndarray, n_source: int) -> np.ndarray:
    """Source-timeline copy of `frames` (the path's second sequence); many-to-one matches are averaged."""
    frames = np.asarray(frames, dtype=np.float64)
    sums = np.zeros((n_source, frames.shape[1]))
    counts = np.zeros(n_source)
    for i, j in path.pairs:
        sums[i] += frames[j]
        counts[i] += 1.0
    if np.any(counts == 0):
        raise ContractError("warping path does not cover every source frame")
    return sums / counts[:, None]


def dtw_simulate(inventory: ToyInventory, utt: ParallelUtterance, config: PipelineConfig = settings) -> np.ndarray:
    features, mel = studio_reference(inventory, utt.phonemes, config)
    path = dtw(utt.whisper, features)
    return warp_onto(path, mel, utt.n_frames)


# ============================================================================
# CROSS-ATTENTION UNIT PREDICTOR
# ============================================================================

def lip_upsampler(n_frames: int, n_lip: int) -> np.ndarray:
    """(n_frames, n_lip) selection matrix: speech frame f reads lip frame f // 2."""
    rows = np.arange(n_frames)
    cols = rows // LIP_FACTOR
    if n_frames and cols[-1] >= n_lip:
        raise DimensionError("lip_upsampler", (n_frames,), (n_lip,))
    matrix = np.zeros((n_frames, n_lip))
    matrix[rows, cols] = 1.0
    return matrix


@dataclass
class UnitExample:
    lip: np.ndarray
    phonemes: PhonemeSeq
    units: List[int]

    @property
    def n_frames(self) -> int:
        return len(self.units)


class CrossAttentionUnitPredictor(Module):
    """Visual and text encoders, lip-over-text attention, 2x upsampling and a unit decoder."""

    def __init__(self, lip_dim: int, n_phonemes: int, mel_codebook: Codebook,
                 config: PipelineConfig = settings, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.lip_dim = lip_dim
        self.n_phonemes = n_phonemes
        self.mel_codebook = mel_codebook
        block = FftBlockConfig.from_pipeline(config)
        self.model_dim = block.model_dim

        rng = np.random.default_rng(self.seed)
        self.visual_in = self.add_child("visual_in", Linear(lip_dim, block.model_dim, rng))
        self.visual = self.add_child("visual", FftBlock(block, rng))
        self.text_in = self.add_child("text_in", Linear(n_phonemes, block.model_dim, rng))
        self.text = self.add_child("text", FftBlock(block, rng))
        self.cross = self.add_child("cross", MultiHeadAttention(block.model_dim, block.heads, rng))
        self.cross_norm = self.add_child("cross_norm", LayerNorm(block.model_dim))
        self.decoder = self.add_child("decoder", FftBlock(block, rng))
        self.unit_head = self.add_child("unit_head", Linear(block.model_dim, mel_codebook.size, rng))
        self.history: List[float] = []

    def _positions(self, length: int) -> Tensor:
        return Tensor(sinusoidal_encoding(length, self.model_dim))

    def logits(self, lip: np.ndarray, phonemes: PhonemeSeq, n_frames: int) -> Tensor:
        lip = np.asarray(lip, dtype=np.float64)
        if lip.ndim != 2 or lip.shape[1] != self.lip_dim:
            raise DimensionError("cross-attention lip", lip.shape, (lip.shape[0] if lip.ndim else 0, self.lip_dim))
        if len(phonemes) == 0:
            raise ContractError("cross-attention needs at least one phoneme")
        visual = self.visual(self.visual_in(lip) + self._positions(lip.shape[0]))
        onehot = np.eye(self.n_phonemes)[np.asarray(phonemes.ids)]
        text = self.text(self.text_in(onehot) + self._positions(len(phonemes)))
        fused = self.cross_norm(visual + self.cross(visual, memory=text))
        upsampled = nx.matmul(lip_upsampler(n_frames, lip.shape[0]), fused)
        return self.unit_head(self.decoder(upsampled + self._positions(n_frames)))

    def loss(self, batch: Sequence[UnitExample]) -> Tuple[float, nx.Gradients]:
        if not batch:
            raise ContractError("empty batch")
        with Tape() as tape:
            total = None
            for example in batch:
                ce = nx.cross_entropy(self.logits(example.lip, example.phonemes, example.n_frames), example.units)
                total = ce if total is None else total + ce
            total = total * (1.0 / len(batch))
        return total.item(), nx.backward(tape, total)

    def fit(self, examples: Sequence[UnitExample], epochs: Optional[int] = None) -> List[float]:
        """Minibatch cross-entropy training; history holds per-epoch mean losses."""
        if not examples:
            raise ContractError("cannot train the cross-attention predictor on an empty corpus")
        config = self.config
        epochs = config.cross_attention_epochs if epochs is None else epochs
        optimizer = make_optimizer(config.optimizer, self, config.learning_rate, config.momentum, config.grad_clip)
        rng = np.random.default_rng(self.seed)
        for epoch in range(epochs):
            order = rng.permutation(len(examples))
            running = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = [examples[i] for i in order[start:start + config.batch_size]]
                loss, grads = self.loss(batch)
                optimizer.step(grads)
                running += loss * len(batch)
            self.history.append(running / len(examples))
            logger.debug("cross_attention_epoch", epoch=epoch, loss=self.history[-1])
        return self.history

    def predict_units(self, lip: np.ndarray, phonemes: PhonemeSeq, n_frames: int) -> np.ndarray:
        return self.logits(lip, phonemes, n_frames).data.argmax(axis=1)

    def synthesize(self, lip: np.ndarray, phonemes: PhonemeSeq, n_frames: int) -> np.ndarray:
        return self.mel_codebook.decode(self.predict_units(lip, phonemes, n_frames))


def train_cross_attention(studio: Corpus, config: PipelineConfig = settings, seed: int = 0,
                          epochs: Optional[int] = None) -> CrossAttentionUnitPredictor:
    mels = np.concatenate([u.mel for u in studio])
    mel_codebook = kmeans_fit(mels, _unit_count(mels, config.n_units), config.kmeans_iterations, seed)
    examples = [UnitExample(lip=u.lip, phonemes=u.phonemes, units=mel_codebook.encode(u.mel).tolist())
                for u in studio]
    model = CrossAttentionUnitPredictor(studio[0].lip.shape[1], studio.inventory.size, mel_codebook, config, seed)
    history = model.fit(examples, epochs)
    logger.info("cross_attention_trained", epochs=len(history), final_loss=history[-1] if history else None)
    return model


# ============================================================================
# DISPATCH
# ============================================================================

@dataclass
class SimulationResult:
    method: SimulationMethod
    mels: Dict[str, np.ndarray] = field(default_factory=dict)

    def mean_l1(self, corpus: Corpus) -> float:
        """Mean absolute error against the corpus mel targets, averaged over utterances."""
        return float(np.mean([np.abs(self.mels[u.utt_id] - u.mel).mean() for u in corpus]))


def durations_for(utt: ParallelUtterance, alignments: Optional[Alignments]) -> Durations:
    """Aligned durations when given, planted ones otherwise; must cover every frame."""
    if not alignments:
        return utt.durations
    if utt.utt_id not in alignments:
        raise ContractError(f"no alignment for {utt.utt_id}")
    durations = alignments[utt.utt_id][1]
    if durations.total != utt.n_frames:
        raise ContractError(f"{utt.utt_id}: aligned durations cover {durations.total} of {utt.n_frames} frames")
    return durations


def simulate(
    method: SimulationMethod,
    corpus: Corpus,
    config: PipelineConfig = settings,
    seed: int = 0,
    alignments: Optional[Alignments] = None,
    diffusion: Optional[DiffNamModel] = None,
    guidance: Optional[float] = None,
) -> SimulationResult:
    """Simulated mel targets for every utterance, floored at the log floor."""
    method = SimulationMethod(method)
    if len(corpus) == 0:
        raise ContractError("nothing to simulate: the corpus is empty")
    result = SimulationResult(method)
    floor = np.log(config.log_floor)

    if method is SimulationMethod.DIFFUSION:
        if diffusion is None:
            raise ContractError("the diffusion route needs a trained diffusion model")
        for i, utt in enumerate(corpus):
            cond = diffusion.conditioner(utt.lip, utt.nam, utt.phonemes, durations_for(utt, alignments))
            result.mels[utt.utt_id] = diffusion.generate(cond, seed=seed + i, w=guidance)
    elif method is SimulationMethod.TTS:
        examples = [(utt.mel, utt.phonemes, durations_for(utt, alignments)) for utt in corpus]
        tts = PhonemeTTS.fit(examples, corpus.inventory.size)
        for utt, (_, phonemes, durations) in zip(corpus, examples):
            result.mels[utt.utt_id] = tts.synthesize(phonemes, durations)
    elif method is SimulationMethod.UNITS:
        studio = studio_corpus(corpus.inventory, config, seed)
        vocoder = UnitVocoder.fit([(u.whisper, u.mel) for u in studio], config.n_units,
                                  config.kmeans_iterations, seed)
        for utt in corpus:
            result.mels[utt.utt_id] = vocoder.synthesize(utt.whisper)
    elif method is SimulationMethod.DTW:
        for utt in corpus:
            result.mels[utt.utt_id] = dtw_simulate(corpus.inventory, utt, config)
    else:
        predictor = train_cross_attention(studio_corpus(corpus.inventory, config, seed), config, seed)
        for utt in corpus:
            result.mels[utt.utt_id] = predictor.synthesize(utt.lip, utt.phonemes, utt.n_frames)

    for utt_id, mel in result.mels.items():
        result.mels[utt_id] = np.maximum(mel, floor)
    logger.info("simulated", method=method.value, utterances=len(result.mels))
    return result
