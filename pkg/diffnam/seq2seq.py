"""
Non-autoregressive NAM-to-speech mapper.

Encoder and decoder are stacks of feed-forward transformer blocks, each made
of two multi-head self-attention sub-layers followed by a two-convolution
feed-forward sub-layer, every sub-layer wrapped in residual + layer norm.
A linear CTC head on the encoder output supplies the auxiliary text loss and
an optional unit head on the decoder predicts codebook ids.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import dsp
from . import numerics as nx
from .ctc import ctc_loss, ctc_loss_tensor, greedy_decode
from .errors import ContractError, DimensionError
from .formats import read_checkpoint, write_checkpoint
from .models import AudioBuffer, MelSpectrogram
from .nn import Conv1d, LayerNorm, Linear, Module, make_optimizer, sinusoidal_encoding
from .numerics import Gradients, Tape, Tensor
from .settings import PipelineConfig, settings

logger = structlog.get_logger()


class FftBlockConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_dim: int = 32
    heads: int = 2
    conv_kernel: int = 3
    conv_hidden: int = 64

    @model_validator(mode="after")
    def _check(self) -> "FftBlockConfig":
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        return self

    @classmethod
    def from_pipeline(cls, config: PipelineConfig) -> "FftBlockConfig":
        return cls(model_dim=config.model_dim, heads=config.heads,
                   conv_kernel=config.conv_kernel, conv_hidden=config.conv_hidden)


class Seq2SeqExample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    target: np.ndarray
    labels: List[int] = Field(default_factory=list)
    units: Optional[List[int]] = None
    utt_id: str = ""

    @model_validator(mode="after")
    def _check(self) -> "Seq2SeqExample":
        if self.features.shape[0] != self.target.shape[0]:
            raise ValueError(
                f"features ({self.features.shape[0]} frames) and target ({self.target.shape[0]}) are misaligned"
            )
        if self.units is not None and len(self.units) != self.target.shape[0]:
            raise ValueError("unit targets must have one id per frame")
        return self


class TrainHistory(BaseModel):
    total: List[float] = Field(default_factory=list)
    mse: List[float] = Field(default_factory=list)
    ctc: List[float] = Field(default_factory=list)
    units: List[float] = Field(default_factory=list)
    skipped: int = 0


# ============================================================================
# ATTENTION AND BLOCKS
# ============================================================================

def scaled_dot_attention(queries: nx.TensorLike, keys: nx.TensorLike, values: nx.TensorLike,
                         heads: int = 1, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated."""
    q, k, v = nx.as_tensor(queries), nx.as_tensor(keys), nx.as_tensor(values)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError("attention queries/keys", q.shape, k.shape)
    if v.ndim != 2 or v.shape[0] != k.shape[0]:
        raise DimensionError("attention keys/values", k.shape, v.shape)
    if heads < 1 or q.shape[1] % heads or v.shape[1] % heads:
        raise ContractError(f"dimensions {q.shape[1]}/{v.shape[1]} do not split into {heads} heads")

    dk, dv = q.shape[1] // heads, v.shape[1] // heads
    scale = 1.0 / np.sqrt(dk)
    outputs, weights = [], []
    for h in range(heads):
        qh = nx.slice_cols(q, h * dk, (h + 1) * dk)
        kh = nx.slice_cols(k, h * dk, (h + 1) * dk)
        vh = nx.slice_cols(v, h * dv, (h + 1) * dv)
        attn = nx.softmax(nx.matmul(qh, nx.transpose(kh)) * scale)
        if return_weights:
            weights.append(attn.numpy())
        outputs.append(nx.matmul(attn, vh))
    out = nx.concat_cols(outputs)
    if return_weights:
        return out, np.stack(weights)
    return out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.query = self.add_child("query", Linear(dim, dim, rng))
        self.key = self.add_child("key", Linear(dim, dim, rng))
        self.value = self.add_child("value", Linear(dim, dim, rng))
        self.proj = self.add_child("proj", Linear(dim, dim, rng))

    def __call__(self, x: Tensor, memory: Optional[Tensor] = None) -> Tensor:
        memory = x if memory is None else memory
        out = scaled_dot_attention(self.query(x), self.key(memory), self.value(memory), self.heads)
        return self.proj(out)


class FftBlock(Module):
    def __init__(self, config: FftBlockConfig, rng: np.random.Generator):
        super().__init__()
        dim = config.model_dim
        self.attn1 = self.add_child("attn1", MultiHeadAttention(dim, config.heads, rng))
        self.norm1 = self.add_child("norm1", LayerNorm(dim))
        self.attn2 = self.add_child("attn2", MultiHeadAttention(dim, config.heads, rng))
        self.norm2 = self.add_child("norm2", LayerNorm(dim))
        self.conv1 = self.add_child("conv1", Conv1d(dim, config.conv_hidden, config.conv_kernel, rng))
        self.conv2 = self.add_child("conv2", Conv1d(config.conv_hidden, dim, config.conv_kernel, rng))
        self.norm3 = self.add_child("norm3", LayerNorm(dim))

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn1(x))
        x = self.norm2(x + self.attn2(x))
        return self.norm3(x + self.conv2(nx.relu(self.conv1(x))))


# ============================================================================
# MODEL
# ============================================================================

class Seq2SeqModel(Module):
    def __init__(
        self,
        feature_dim: int,
        target_dim: int,
        vocab_size: int,
        n_units: int = 0,
        config: PipelineConfig = settings,
        seed: Optional[int] = None,
    ):
        super().__init__()
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.feature_dim = feature_dim
        self.target_dim = target_dim
        self.vocab_size = vocab_size
        self.n_units = n_units
        block = FftBlockConfig.from_pipeline(config)
        self.model_dim = block.model_dim
        self.heads = block.heads

        rng = np.random.default_rng(self.seed)
        self.in_proj = self.add_child("in_proj", Linear(feature_dim, block.model_dim, rng))
        self.encoder = [self.add_child(f"enc{i}", FftBlock(block, rng)) for i in range(config.encoder_layers)]
        self.ctc_head = self.add_child("ctc_head", Linear(block.model_dim, vocab_size + 1, rng))
        self.decoder = [self.add_child(f"dec{i}", FftBlock(block, rng)) for i in range(config.decoder_layers)]
        self.out_proj = self.add_child("out_proj", Linear(block.model_dim, target_dim, rng))
        self.unit_head = self.add_child("unit_head", Linear(block.model_dim, n_units, rng)) if n_units else None

        self.feature_mean = np.zeros(feature_dim)
        self.feature_std = np.ones(feature_dim)
        self.target_mean = np.zeros(target_dim)
        self.target_std = np.ones(target_dim)
        self.target_max: Optional[float] = None
        self.history = TrainHistory()
        self.metadata: dict = {}

    @property
    def trained(self) -> bool:
        return self.target_max is not None

    def _positions(self, length: int) -> Tensor:
        return Tensor(sinusoidal_encoding(length, self.model_dim))

    def encode(self, features: nx.TensorLike) -> Tensor:
        x = nx.as_tensor(features)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise DimensionError("encode", x.shape, (x.shape[0] if x.ndim else 0, self.feature_dim))
        if not isinstance(features, Tensor):
            x = Tensor((x.data - self.feature_mean) / self.feature_std)
        h = self.in_proj(x) + self._positions(x.shape[0])
        for block in self.encoder:
            h = block(h)
        return h

    def decode_hidden(self, latents: Tensor) -> Tensor:
        if latents.ndim != 2 or latents.shape[1] != self.model_dim:
            raise DimensionError("decode", latents.shape, (latents.shape[0], self.model_dim))
        h = latents + self._positions(latents.shape[0])
        for block in self.decoder:
            h = block(h)
        return h

    def decode(self, latents: Tensor) -> Tensor:
        return self.out_proj(self.decode_hidden(latents))

    def ctc_log_probs(self, latents: Tensor) -> Tensor:
        return nx.log_softmax(self.ctc_head(latents))

    def predict_units(self, latents: Tensor) -> Tensor:
        if self.unit_head is None:
            raise ContractError("model was built without a unit head")
        return self.unit_head(self.decode_hidden(latents))

    def fit_feature_stats(self, features: Sequence[np.ndarray]) -> None:
        stacked = np.concatenate(list(features))
        self.feature_mean = stacked.mean(axis=0)
        self.feature_std = np.maximum(stacked.std(axis=0), 1e-3)

    def fit_target_stats(self, targets: Sequence[np.ndarray]) -> None:
        stacked = np.concatenate(list(targets))
        self.target_mean = stacked.mean(axis=0)
        self.target_std = np.maximum(stacked.std(axis=0), 1e-3)
        self.target_max = float(stacked.max())

    def normalize(self, target: np.ndarray) -> np.ndarray:
        return (target - self.target_mean) / self.target_std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.target_std + self.target_mean

    def save(self, path: Path, metadata: Optional[dict] = None) -> None:
        if not self.trained:
            raise ContractError("refusing to save an untrained seq2seq model")
        meta = {
            "kind": "seq2seq",
            "config": self.config.model_dump(mode="json"),
            "config_hash": self.config.config_hash(),
            "dims": {"feature": self.feature_dim, "target": self.target_dim,
                     "vocab": self.vocab_size, "units": self.n_units},
            "seed": self.seed,
            "target_max": self.target_max,
            "history": self.history.model_dump(),
        }
        meta.update(metadata or {})
        tensors = {f"param.{k}": v for k, v in self.state_dict().items()}
        tensors.update({"target.mean": self.target_mean, "target.std": self.target_std,
                        "feature.mean": self.feature_mean, "feature.std": self.feature_std})
        write_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path: Path) -> "Seq2SeqModel":
        meta, tensors = read_checkpoint(path)
        if meta.get("kind") != "seq2seq":
            raise ContractError(f"{path} is not a seq2seq checkpoint")
        dims = meta["dims"]
        model = cls(dims["feature"], dims["target"], dims["vocab"], dims["units"],
                    PipelineConfig(**meta["config"]), seed=meta["seed"])
        model.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
        model.target_mean = tensors["target.mean"]
        model.target_std = tensors["target.std"]
        model.feature_mean = tensors.get("feature.mean", model.feature_mean)
        model.feature_std = tensors.get("feature.std", model.feature_std)
        model.target_max = meta["target_max"]
        model.history = TrainHistory(**meta.get("history", {}))
        model.metadata = meta
        return model


# ============================================================================
# TRAINING
# ============================================================================

def batch_loss(
    model: Seq2SeqModel,
    batch: Sequence[Seq2SeqExample],
    lambda_ctc: float,
    lambda_units: float = 0.0,
) -> Tuple[float, Gradients, dict]:
    """Mean over the batch of MSE + lambda_ctc * CTC (+ lambda_units * CE) and its gradients."""
    if not batch:
        raise ContractError("empty batch")
    parts = {"mse": 0.0, "ctc": 0.0, "units": 0.0, "skipped": 0}
    with Tape() as tape:
        total = None
        for example in batch:
            latents = model.encode(example.features)
            hidden = model.decode_hidden(latents)
            loss = nx.mse(model.out_proj(hidden), model.normalize(example.target))
            parts["mse"] += loss.item()
            if lambda_ctc > 0:
                ctc = ctc_loss_tensor(model.ctc_log_probs(latents), example.labels)
                if ctc is None:
                    parts["skipped"] += 1
                else:
                    parts["ctc"] += ctc.item()
                    loss = loss + ctc * lambda_ctc
            if lambda_units > 0 and model.unit_head is not None and example.units is not None:
                ce = nx.cross_entropy(model.unit_head(hidden), example.units)
                parts["units"] += ce.item()
                loss = loss + ce * lambda_units
            total = loss if total is None else total + loss
        total = total * (1.0 / len(batch))
    return total.item(), nx.backward(tape, total), parts


def train(
    model: Seq2SeqModel,
    examples: Sequence[Seq2SeqExample],
    lambda_ctc: Optional[float] = None,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
    lambda_units: Optional[float] = None,
) -> TrainHistory:
    """Minibatch training; history holds per-epoch mean losses."""
    if not examples:
        raise ContractError("cannot train on an empty corpus")
    config = model.config
    lambda_ctc = config.lambda_ctc if lambda_ctc is None else lambda_ctc
    lambda_units = config.lambda_units if lambda_units is None else lambda_units
    epochs = config.epochs if epochs is None else epochs
    seed = model.seed if seed is None else seed
    for example in examples:
        if example.features.shape[1] != model.feature_dim or example.target.shape[1] != model.target_dim:
            raise DimensionError("train", example.features.shape, example.target.shape)

    if not model.trained:
        model.fit_feature_stats([e.features for e in examples])
        model.fit_target_stats([e.target for e in examples])
    optimizer = make_optimizer(config.optimizer, model, config.learning_rate, config.momentum, config.grad_clip)
    rng = np.random.default_rng(seed)
    history = model.history
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        sums = {"total": 0.0, "mse": 0.0, "ctc": 0.0, "units": 0.0}
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            loss, grads, parts = batch_loss(model, batch, lambda_ctc, lambda_units)
            optimizer.step(grads)
            sums["total"] += loss * len(batch)
            for key in ("mse", "ctc", "units"):
                sums[key] += parts[key]
            if parts["skipped"]:
                history.skipped += parts["skipped"]
                logger.warning("ctc_infeasible", epoch=epoch, skipped=history.skipped)
        for key in sums:
            getattr(history, key).append(sums[key] / len(examples))
        logger.info("seq2seq_epoch", epoch=epoch, loss=history.total[-1], mse=history.mse[-1],
                    ctc=history.ctc[-1])
    return history


def evaluate_mse(model: Seq2SeqModel, examples: Sequence[Seq2SeqExample]) -> Tuple[float, float]:
    """(model MSE, predict-the-training-mean MSE) in normalised target space."""
    errors, baseline, count = 0.0, 0.0, 0
    for example in examples:
        target = model.normalize(example.target)
        predicted = model.decode(model.encode(example.features)).data
        errors += float(((predicted - target) ** 2).sum())
        baseline += float((target ** 2).sum())
        count += target.size
    return errors / count, baseline / count


def fit_probe_head(
    model: Seq2SeqModel,
    examples: Sequence[Seq2SeqExample],
    epochs: int = 30,
    seed: int = 0,
    lr: float = 1e-2,
) -> Linear:
    """Train a fresh CTC head on frozen encoder latents."""
    rng = np.random.default_rng(seed)
    probe = Linear(model.model_dim, model.vocab_size + 1, rng)
    latents = [Tensor(model.encode(e.features).data) for e in examples]
    optimizer = make_optimizer("adam", probe, lr, clip=model.config.grad_clip)
    for epoch in range(epochs):
        with Tape() as tape:
            total, used = None, 0
            for h, example in zip(latents, examples):
                loss = ctc_loss_tensor(nx.log_softmax(probe(h)), example.labels)
                if loss is None:
                    continue
                used += 1
                total = loss if total is None else total + loss
            if total is None:
                raise ContractError("no example fits its label sequence")
            total = total * (1.0 / used)
        optimizer.step(nx.backward(tape, total))
        logger.debug("probe_epoch", epoch=epoch, ctc=total.item())
    return probe


def probe_ctc_nll(model: Seq2SeqModel, probe: Linear, examples: Sequence[Seq2SeqExample]) -> float:
    values = []
    for example in examples:
        log_probs = nx.log_softmax(probe(model.encode(example.features))).data
        result = ctc_loss(log_probs, example.labels, normalized=False)
        if result.feasible:
            values.append(result.nll)
    return float(np.mean(values))


# ============================================================================
# INFERENCE
# ============================================================================

def transcribe(model: Seq2SeqModel, features: np.ndarray) -> List[int]:
    """Greedy CTC decode of the encoder output; label ids are phoneme id + 1."""
    return greedy_decode(model.ctc_log_probs(model.encode(features)).data)


def shuffled_copy(model: Seq2SeqModel, seed: int = 0) -> Seq2SeqModel:
    """Control model: every parameter tensor's entries randomly permuted."""
    rng = np.random.default_rng(seed)
    control = Seq2SeqModel(model.feature_dim, model.target_dim, model.vocab_size, model.n_units,
                           model.config, seed=model.seed)
    control.load_state_dict({
        name: rng.permutation(value.reshape(-1)).reshape(value.shape)
        for name, value in model.state_dict().items()
    })
    control.target_mean = model.target_mean.copy()
    control.target_std = model.target_std.copy()
    control.feature_mean = model.feature_mean.copy()
    control.feature_std = model.feature_std.copy()
    control.target_max = model.target_max
    return control


def convert_features(model: Seq2SeqModel, features: np.ndarray) -> np.ndarray:
    """NAM features -> predicted log-mel frames, clamped to the trained range."""
    if not model.trained:
        raise ContractError("seq2seq model is untrained")
    mel = model.denormalize(model.decode(model.encode(features)).data)
    return np.clip(mel, np.log(model.config.log_floor), model.target_max + 1.0)


def convert(model: Seq2SeqModel, nam_audio: AudioBuffer) -> AudioBuffer:
    """NAM audio -> mel analysis -> encode/decode -> Griffin-Lim."""
    config = model.config
    if model.feature_dim != config.n_mels:
        raise ContractError(
            f"model expects {model.feature_dim}-dim features, audio analysis gives {config.n_mels} mel bins"
        )
    audio = dsp.resample(nam_audio, config.sample_rate)
    analysed = dsp.mel_spectrogram(audio, config.n_mels, config.hop, config.window, config.n_fft, config.log_floor)
    predicted = MelSpectrogram(
        frames=convert_features(model, analysed.frames),
        hop=config.hop, window=config.window, sample_rate=config.sample_rate,
        n_mels=model.target_dim, log_floor=config.log_floor,
    )
    return dsp.griffin_lim(predicted, config.griffin_lim_iters, config.n_fft)
