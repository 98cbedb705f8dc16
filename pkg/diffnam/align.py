"""
Forced alignment and duration handling.

A monophone HMM (one diagonal-Gaussian state per phoneme, left-to-right over
the utterance's phoneme sequence) is trained with hard Viterbi-EM and used to
read off per-phoneme frame durations. DTW, duration upsampling, the length
regulator and a duration-driven table TTS live here too.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import structlog
from scipy.spatial.distance import cdist

from .errors import ContractError, DimensionError
from .formats import read_checkpoint, write_checkpoint
from .models import Durations, DtwPath, PhonemeSeq

logger = structlog.get_logger()

PROB_CLIP = 1e-3
AlignItem = Tuple[np.ndarray, PhonemeSeq]


@dataclass(frozen=True, eq=False)
class MonophoneHMM:
    means: np.ndarray       # (P, D)
    variances: np.ndarray   # (P, D), >= variance floor
    self_logp: np.ndarray   # (P,)
    exit_logp: np.ndarray   # (P,), exp(self) + exp(exit) == 1
    log_likelihoods: List[float] = field(default_factory=list)

    @property
    def n_phonemes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def emission_logprob(self, features: np.ndarray, phonemes: PhonemeSeq) -> np.ndarray:
        """(T, N) log-density of every frame under every state of the utterance."""
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise DimensionError("emission_logprob", features.shape, self.means.shape)
        ids = np.asarray(phonemes.ids)
        mu, var = self.means[ids], self.variances[ids]
        sq = ((features[:, None, :] - mu[None]) ** 2 / var[None]).sum(axis=2)
        norm = np.log(2.0 * np.pi * var).sum(axis=1)
        return -0.5 * (sq + norm[None, :])

    def save(self, path: Path, metadata: Dict = None) -> None:
        meta = {"kind": "monophone_hmm", "n_phonemes": self.n_phonemes, "dim": self.dim,
                "log_likelihoods": self.log_likelihoods}
        meta.update(metadata or {})
        write_checkpoint(path, meta, {
            "means": self.means, "variances": self.variances,
            "self_logp": self.self_logp, "exit_logp": self.exit_logp,
        })

    @classmethod
    def load(cls, path: Path) -> "MonophoneHMM":
        meta, tensors = read_checkpoint(path)
        if meta.get("kind") != "monophone_hmm":
            raise ContractError(f"{path} is not an aligner checkpoint")
        return cls(tensors["means"], tensors["variances"], tensors["self_logp"],
                   tensors["exit_logp"], list(meta.get("log_likelihoods", [])))


# ============================================================================
# VITERBI
# ============================================================================

def viterbi_segment(hmm: MonophoneHMM, features: np.ndarray, phonemes: PhonemeSeq) -> Tuple[Durations, float]:
    """Best monotone segmentation and its log-likelihood (final exit included)."""
    features = np.asarray(features, dtype=np.float64)
    n_frames, n_states = features.shape[0], len(phonemes)
    if n_frames < n_states:
        raise ContractError(f"cannot align {n_states} phonemes to {n_frames} frames")
    emit = hmm.emission_logprob(features, phonemes)
    ids = np.asarray(phonemes.ids)
    stay, leave = hmm.self_logp[ids], hmm.exit_logp[ids]

    score = np.full(n_states, -np.inf)
    score[0] = emit[0, 0]
    advanced = np.zeros((n_frames, n_states), dtype=bool)
    for t in range(1, n_frames):
        from_self = score + stay
        from_prev = np.full(n_states, -np.inf)
        from_prev[1:] = score[:-1] + leave[:-1]
        advanced[t] = from_prev > from_self
        score = np.maximum(from_self, from_prev) + emit[t]

    total = float(score[-1] + leave[-1])
    counts = np.zeros(n_states, dtype=np.int64)
    state = n_states - 1
    for t in range(n_frames - 1, -1, -1):
        counts[state] += 1
        if t > 0 and advanced[t, state]:
            state -= 1
    return Durations(frames=tuple(int(c) for c in counts)), total


def viterbi_align(hmm: MonophoneHMM, features: np.ndarray, phonemes: PhonemeSeq) -> Durations:
    return viterbi_segment(hmm, features, phonemes)[0]


def segmentation_loglik(hmm: MonophoneHMM, features: np.ndarray, phonemes: PhonemeSeq,
                        durations: Durations) -> float:
    """Log-likelihood of one fixed segmentation under the model."""
    emit = hmm.emission_logprob(np.asarray(features, dtype=np.float64), phonemes)
    states = np.repeat(np.arange(len(phonemes)), durations.frames)
    ids = np.asarray(phonemes.ids)
    d = np.asarray(durations.frames)
    return float(
        emit[np.arange(states.size), states].sum()
        + ((d - 1) * hmm.self_logp[ids]).sum()
        + hmm.exit_logp[ids].sum()
    )


# ============================================================================
# TRAINING
# ============================================================================

def uniform_segmentation(n_frames: int, n_phonemes: int) -> Durations:
    bounds = np.floor(np.linspace(0, n_frames, n_phonemes + 1)).astype(np.int64)
    return Durations(frames=tuple(int(d) for d in np.diff(bounds)))


def estimate_hmm(
    corpus: Sequence[AlignItem],
    segmentations: Sequence[Durations],
    n_phonemes: int,
    variance_floor: float = 1e-3,
) -> MonophoneHMM:
    """M-step: per-phoneme Gaussian and self/exit probabilities from hard segmentations."""
    dim = corpus[0][0].shape[1]
    sums = np.zeros((n_phonemes, dim))
    squares = np.zeros((n_phonemes, dim))
    frames = np.zeros(n_phonemes)
    exits = np.zeros(n_phonemes)
    for (features, phonemes), durations in zip(corpus, segmentations):
        labels = np.repeat(np.asarray(phonemes.ids), durations.frames)
        np.add.at(sums, labels, features)
        np.add.at(squares, labels, features ** 2)
        np.add.at(frames, labels, 1.0)
        np.add.at(exits, np.asarray(phonemes.ids), 1.0)

    pooled = np.concatenate([f for f, _ in corpus])
    means = np.tile(pooled.mean(axis=0), (n_phonemes, 1))
    variances = np.tile(pooled.var(axis=0), (n_phonemes, 1))
    seen = frames > 0
    means[seen] = sums[seen] / frames[seen, None]
    variances[seen] = squares[seen] / frames[seen, None] - means[seen] ** 2
    variances = np.maximum(variances, variance_floor)

    p_self = np.full(n_phonemes, 0.5)
    p_self[seen] = (frames[seen] - exits[seen]) / frames[seen]
    p_self = np.clip(p_self, PROB_CLIP, 1.0 - PROB_CLIP)
    return MonophoneHMM(means, variances, np.log(p_self), np.log1p(-p_self))


def train_aligner(
    corpus: Sequence[AlignItem],
    iterations: int = 10,
    n_phonemes: int = None,
    variance_floor: float = 1e-3,
) -> MonophoneHMM:
    """
    Uniform-segmentation initialisation followed by hard Viterbi-EM.

    `log_likelihoods[i]` is the total Viterbi log-likelihood of the i-th
    model; the sequence is non-decreasing.
    """
    if not corpus:
        raise ContractError("cannot train an aligner on an empty corpus")
    for i, (features, phonemes) in enumerate(corpus):
        if features.shape[0] < len(phonemes):
            raise ContractError(
                f"utterance {i}: {features.shape[0]} frames for {len(phonemes)} phonemes"
            )
    if n_phonemes is None:
        n_phonemes = corpus[0][1].inventory_size

    segmentations = [uniform_segmentation(f.shape[0], len(p)) for f, p in corpus]
    hmm = estimate_hmm(corpus, segmentations, n_phonemes, variance_floor)
    history: List[float] = []
    for iteration in range(iterations):
        results = [viterbi_segment(hmm, f, p) for f, p in corpus]
        history.append(float(np.sum([score for _, score in results])))
        if len(history) > 1 and history[-1] < history[-2] - 1e-9 * max(1.0, abs(history[-2])):
            logger.warning("aligner_loglik_decreased", iteration=iteration,
                           previous=history[-2], current=history[-1])
        new_segmentations = [d for d, _ in results]
        logger.info("aligner_iteration", iteration=iteration, loglik=history[-1])
        if new_segmentations == segmentations:
            break
        segmentations = new_segmentations
        hmm = estimate_hmm(corpus, segmentations, n_phonemes, variance_floor)

    return MonophoneHMM(hmm.means, hmm.variances, hmm.self_logp, hmm.exit_logp, history)


# ============================================================================
# DTW
# ============================================================================

def dtw(features_a: np.ndarray, features_b: np.ndarray, distance: str = "euclidean") -> DtwPath:
    """Globally optimal warping path with steps (1,0), (0,1), (1,1); `distance` is any cdist metric."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("dtw needs two non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise DimensionError("dtw", a.shape, b.shape)

    try:
        local = cdist(a, b, distance)
    except ValueError as e:
        raise ContractError(f"unsupported dtw distance {distance!r}") from e
    rows, cols = local.shape
    acc = np.full((rows + 1, cols + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(rows):
        for j in range(cols):
            acc[i + 1, j + 1] = local[i, j] + min(acc[i, j], acc[i, j + 1], acc[i + 1, j])

    i, j = rows - 1, cols - 1
    pairs = [(i, j)]
    while i > 0 or j > 0:
        # diagonal wins ties
        step = int(np.argmin((acc[i, j], acc[i, j + 1], acc[i + 1, j])))
        if step == 0:
            i, j = i - 1, j - 1
        elif step == 1:
            i -= 1
        else:
            j -= 1
        pairs.append((i, j))
    pairs.reverse()
    return DtwPath(pairs=tuple(pairs), cost=float(acc[rows, cols]))


# ============================================================================
# DURATIONS
# ============================================================================

def upsample_durations(durations: Durations, factor: int = 2) -> Durations:
    if int(factor) != factor or factor < 1:
        raise ContractError(f"upsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    return Durations(frames=tuple(d * factor for d in durations.frames),
                     frame_rate=durations.frame_rate * factor)


def length_regulate(embeddings: np.ndarray, durations: Durations) -> np.ndarray:
    """Repeat row i of `embeddings` durations[i] times."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embeddings.shape[0] != len(durations):
        raise DimensionError("length_regulate", embeddings.shape, (len(durations),))
    return np.repeat(embeddings, durations.frames, axis=0)


def durations_to_json(phonemes: PhonemeSeq, durations: Durations) -> str:
    return json.dumps({
        "phonemes": list(phonemes.ids),
        "durations": list(durations.frames),
        "frame_rate": durations.frame_rate,
    })


def durations_from_json(text: str, inventory_size: int) -> Tuple[PhonemeSeq, Durations]:
    payload = json.loads(text)
    phonemes = PhonemeSeq(ids=tuple(payload["phonemes"]), inventory_size=inventory_size)
    durations = Durations(frames=tuple(payload["durations"]), frame_rate=payload.get("frame_rate", 50.0))
    if len(phonemes) != len(durations):
        raise ContractError("phoneme and duration lists differ in length")
    return phonemes, durations


class PhonemeTTS:
    """Duration-driven synthesis from a per-phoneme mean target-frame table."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)

    @classmethod
    def fit(cls, examples: Sequence[Tuple[np.ndarray, PhonemeSeq, Durations]], n_phonemes: int) -> "PhonemeTTS":
        if not examples:
            raise ContractError("PhonemeTTS needs at least one example")
        dim = examples[0][0].shape[1]
        sums = np.zeros((n_phonemes, dim))
        counts = np.zeros(n_phonemes)
        for frames, phonemes, durations in examples:
            if frames.shape[0] != durations.total:
                raise DimensionError("PhonemeTTS.fit", frames.shape, (durations.total,))
            labels = np.repeat(np.asarray(phonemes.ids), durations.frames)
            np.add.at(sums, labels, frames)
            np.add.at(counts, labels, 1.0)
        table = np.tile(sums.sum(axis=0) / counts.sum(), (n_phonemes, 1))
        seen = counts > 0
        table[seen] = sums[seen] / counts[seen, None]
        return cls(table)

    def synthesize(self, phonemes: PhonemeSeq, durations: Durations) -> np.ndarray:
        return length_regulate(self.table[np.asarray(phonemes.ids)], durations)
