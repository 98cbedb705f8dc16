"""
Conditional DDPM over log-mel segments with classifier-free guidance.

Timesteps run 1..T; alpha_bar(0) is 1. The denoiser predicts the noise that
produced x_t and is trained with an L1 loss. During training the conditioner
is swapped for a learned null token with probability drop_prob, which gives
the unconditional branch used by guidance.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
import structlog

from . import numerics as nx
from .align import length_regulate, upsample_durations
from .errors import ContractError, DimensionError
from .formats import read_checkpoint, write_checkpoint
from .models import Durations, PhonemeSeq, SampleVariance, ScheduleShape
from .nn import Conv1d, Linear, Module, Optimizer, make_optimizer, timestep_embedding
from .numerics import Tape, Tensor
from .settings import PipelineConfig, settings

logger = structlog.get_logger()

TIME_DIM = 16
COSINE_OFFSET = 0.008


# ============================================================================
# NOISE SCHEDULE
# ============================================================================

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return self.betas.size

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ContractError(f"timestep {t} outside [1, {self.steps}]")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])


def make_schedule(
    steps: int,
    beta_start: float,
    beta_end: float,
    shape: ScheduleShape = ScheduleShape.LINEAR,
) -> NoiseSchedule:
    if steps < 1:
        raise ContractError("schedule needs at least one step")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")

    if ScheduleShape(shape) is ScheduleShape.COSINE:
        grid = np.linspace(0.0, 1.0, steps + 1)
        f = np.cos((grid + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_start, beta_end)
    else:
        betas = np.linspace(beta_start, beta_end, steps)

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if np.any(np.diff(alpha_bars) >= 0.0) or alpha_bars[-1] <= 0.0:
        raise ContractError("alpha_bar must be positive and strictly decreasing")
    for array in (betas, alphas, alpha_bars):
        array.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars)


def schedule_from_config(config: PipelineConfig) -> NoiseSchedule:
    return make_schedule(config.diffusion_steps, config.beta_start, config.beta_end, config.schedule_shape)


def forward_diffuse(schedule: NoiseSchedule, x0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """Closed-form marginal sample of q(x_t | x_0)."""
    if t == 0:
        raise ContractError("timestep 0 is the data itself")
    ab = schedule.alpha_bar(t)
    if np.shape(noise) != np.shape(x0):
        raise DimensionError("forward_diffuse", np.shape(x0), np.shape(noise))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def diffuse_step(schedule: NoiseSchedule, x_prev: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """One application of q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    beta = schedule.beta(t)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise


def posterior_params(schedule: NoiseSchedule, x_t: np.ndarray, x0: np.ndarray, t: int) -> Tuple[np.ndarray, float]:
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    beta, alpha = schedule.beta(t), schedule.alpha(t)
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
    mean = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * x_t) / (1.0 - ab)
    variance = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean, variance


# ============================================================================
# DENOISERS
# ============================================================================

class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t: int, cond: Optional[np.ndarray]) -> np.ndarray:
        ...


class GaussianScoreDenoiser:
    """Exact E[noise | x_t] when x_0 ~ N(mu, sigma^2 I); ignores the conditioner."""

    def __init__(self, schedule: NoiseSchedule, mu: float, sigma: float):
        self.schedule = schedule
        self.mu = mu
        self.sigma = sigma

    def predict(self, x_t: np.ndarray, t: int, cond: Optional[np.ndarray] = None) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * self.mu) / (ab * self.sigma ** 2 + 1.0 - ab)


class DenoiserNet(Module):
    """
    conv(x_t | conditioner | t-embedding) -> relu -> conv + residual -> relu -> linear.

    A learned null token stands in for the conditioner on unconditional passes.
    """

    def __init__(self, n_mels: int, cond_dim: int, hidden: int = 64, kernel: int = 3, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.n_mels = n_mels
        self.cond_dim = cond_dim
        self.add_param("null_token", rng.normal(0.0, 0.1, cond_dim))
        self.conv_in = self.add_child("conv_in", Conv1d(n_mels + cond_dim + TIME_DIM, hidden, kernel, rng))
        self.conv_mid = self.add_child("conv_mid", Conv1d(hidden, hidden, kernel, rng))
        self.out = self.add_child("out", Linear(hidden, n_mels, rng))
        self.null_token_uses = 0

    def __call__(self, x_t: Tensor, t: int, cond: Optional[nx.TensorLike]) -> Tensor:
        frames = x_t.shape[0]
        if x_t.ndim != 2 or x_t.shape[1] != self.n_mels:
            raise DimensionError("denoiser", x_t.shape, (frames, self.n_mels))
        if cond is None:
            self.null_token_uses += 1
            cond = nx.repeat_rows(self.p("null_token"), frames)
        else:
            cond = nx.as_tensor(cond)
            if cond.shape != (frames, self.cond_dim):
                raise DimensionError("denoiser conditioner", cond.shape, (frames, self.cond_dim))
        t_embed = Tensor(np.tile(timestep_embedding(t, TIME_DIM), (frames, 1)))
        h = nx.relu(self.conv_in(nx.concat_cols([x_t, cond, t_embed])))
        h = nx.relu(self.conv_mid(h) + h)
        return self.out(h)

    def predict(self, x_t: np.ndarray, t: int, cond: Optional[np.ndarray]) -> np.ndarray:
        return self(Tensor(x_t), t, cond).numpy()


def cfg_predict(denoiser: Denoiser, x_t: np.ndarray, t: int, cond: Optional[np.ndarray], w: float) -> np.ndarray:
    """
    Guided noise estimate eps_u + w (eps_c - eps_u).

    w = 1 returns eps_c and w = 0 returns eps_u bit for bit; in between the
    result is affine in w up to two roundings per entry.
    """
    if w < 0:
        raise ContractError(f"guidance scale must be non-negative, got {w}")
    eps_c = denoiser.predict(x_t, t, cond)
    if w == 1.0:
        return eps_c.copy()
    eps_u = denoiser.predict(x_t, t, None)
    return eps_u + w * (eps_c - eps_u)


# ============================================================================
# TRAINING AND SAMPLING
# ============================================================================

def train_step(
    denoiser: DenoiserNet,
    optimizer: Optional[Optimizer],
    schedule: NoiseSchedule,
    x0_batch: Sequence[np.ndarray],
    cond_batch: Sequence[Optional[np.ndarray]],
    drop_prob: float = 0.1,
    seed: int = 0,
) -> float:
    """One L1 noise-prediction step; with optimizer=None the loss is only evaluated."""
    if not x0_batch:
        raise ContractError("train_step needs a non-empty batch")
    if len(cond_batch) != len(x0_batch):
        raise DimensionError("train_step", (len(x0_batch),), (len(cond_batch),))
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        total = None
        for x0, cond in zip(x0_batch, cond_batch):
            t = int(rng.integers(1, schedule.steps + 1))
            noise = rng.standard_normal(x0.shape)
            x_t = forward_diffuse(schedule, x0, t, noise)
            if cond is not None and rng.random() < drop_prob:
                cond = None
            pred = denoiser(Tensor(x_t), t, cond)
            item = nx.mean(nx.abs(pred - noise))
            total = item if total is None else total + item
        loss = total * (1.0 / len(x0_batch))
    if optimizer is not None:
        optimizer.step(nx.backward(tape, loss))
    return loss.item()


def sample(
    denoiser: Denoiser,
    cond: Optional[np.ndarray],
    schedule: NoiseSchedule,
    w: float,
    seed: int,
    shape: Tuple[int, int],
    clamp: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    variance: SampleVariance = SampleVariance.BETA,
) -> np.ndarray:
    """
    Ancestral sampling from x_T ~ N(0, I).

    Each step forms an x_0 estimate from the guided noise prediction, clamps it
    to `clamp` when given and moves to the posterior mean plus noise. The noise
    variance is beta_t (default) or the posterior variance.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for t in range(schedule.steps, 0, -1):
        ab = schedule.alpha_bar(t)
        eps = cfg_predict(denoiser, x, t, cond, w)
        x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clamp is not None:
            x0_hat = np.clip(x0_hat, clamp[0], clamp[1])
        mean, post_var = posterior_params(schedule, x, x0_hat, t)
        if t == 1:
            x = mean
            break
        var = schedule.beta(t) if SampleVariance(variance) is SampleVariance.BETA else post_var
        x = mean + np.sqrt(var) * rng.standard_normal(shape)
    return x


# ============================================================================
# CONDITIONER AND MODEL BUNDLE
# ============================================================================

def upsample_lip(lip: np.ndarray, n_frames: int) -> np.ndarray:
    """25 Hz lip frames to the 50 Hz mel rate, trimmed to n_frames."""
    doubled = upsample_durations(Durations(frames=(1,) * lip.shape[0]), 2)
    stream = length_regulate(lip, doubled)
    if stream.shape[0] < n_frames:
        raise DimensionError("upsample_lip", stream.shape, (n_frames,))
    return stream[:n_frames]


def build_conditioner(lip: np.ndarray, nam: np.ndarray, text: Optional[np.ndarray] = None) -> np.ndarray:
    """Concatenate the lip (upsampled), NAM and optional text streams per mel frame."""
    n_frames = nam.shape[0]
    parts = [upsample_lip(lip, n_frames), nam]
    if text is not None:
        if text.shape[0] != n_frames:
            raise DimensionError("build_conditioner", nam.shape, text.shape)
        parts.append(text)
    return np.concatenate(parts, axis=1)


class MelNormalizer:
    def __init__(self, mean: np.ndarray, std: np.ndarray, max_value: float, log_floor: float = 1e-5):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.max_value = float(max_value)
        self.log_floor = log_floor

    @classmethod
    def fit(cls, mels: Sequence[np.ndarray], log_floor: float = 1e-5) -> "MelNormalizer":
        stacked = np.concatenate(list(mels))
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-3), stacked.max(), log_floor)

    def normalize(self, mel: np.ndarray) -> np.ndarray:
        return (mel - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def clamp_range(self) -> Tuple[np.ndarray, np.ndarray]:
        """[log floor, max_train + 1] mapped into normalised space."""
        return self.normalize(np.log(self.log_floor)), self.normalize(self.max_value + 1.0)


class DiffNamModel:
    def __init__(self, config: PipelineConfig = settings, n_phonemes: Optional[int] = None, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.n_phonemes = config.n_phonemes if n_phonemes is None else n_phonemes
        self.schedule = schedule_from_config(config)
        self.denoiser = DenoiserNet(config.n_mels, config.conditioner_dim, config.denoiser_hidden,
                                    config.denoiser_kernel, seed=self.seed)
        self.text_table = np.random.default_rng(self.seed + 1).normal(0.0, 1.0, (self.n_phonemes, config.text_dim))
        self.normalizer: Optional[MelNormalizer] = None
        self.history: List[float] = []

    @property
    def trained(self) -> bool:
        return self.normalizer is not None

    def text_stream(self, phonemes: PhonemeSeq, durations: Durations) -> np.ndarray:
        return length_regulate(self.text_table[np.asarray(phonemes.ids)], durations)

    def conditioner(self, lip: np.ndarray, nam: np.ndarray,
                    phonemes: Optional[PhonemeSeq] = None, durations: Optional[Durations] = None) -> np.ndarray:
        text = None
        if self.config.text_dim:
            if phonemes is None or durations is None:
                text = np.zeros((nam.shape[0], self.config.text_dim))
            else:
                text = self.text_stream(phonemes, durations)
        cond = build_conditioner(lip, nam, text)
        if cond.shape[1] != self.config.conditioner_dim:
            raise DimensionError("conditioner", cond.shape, (nam.shape[0], self.config.conditioner_dim))
        return cond

    def fit(
        self,
        mels: Sequence[np.ndarray],
        conds: Sequence[np.ndarray],
        steps: Optional[int] = None,
        batch_size: Optional[int] = None,
    ) -> List[float]:
        """Train on random segment_frames-long crops of (mel, conditioner) pairs."""
        if not mels:
            raise ContractError("cannot train the diffusion model without data")
        for mel, cond in zip(mels, conds):
            if mel.shape[0] != cond.shape[0]:
                raise DimensionError("DiffNamModel.fit", mel.shape, cond.shape)
        config = self.config
        steps = config.diffusion_train_steps if steps is None else steps
        batch_size = config.diffusion_batch_size if batch_size is None else batch_size
        self.normalizer = MelNormalizer.fit(mels, config.log_floor)
        targets = [self.normalizer.normalize(m) for m in mels]
        optimizer = make_optimizer(config.optimizer, self.denoiser, config.learning_rate,
                                   config.momentum, config.grad_clip)
        rng = np.random.default_rng(self.seed)
        segment = config.segment_frames
        for step in range(steps):
            x0_batch, cond_batch = [], []
            for index in rng.integers(len(targets), size=batch_size):
                length = targets[index].shape[0]
                start = int(rng.integers(0, max(length - segment, 0) + 1))
                x0_batch.append(targets[index][start:start + segment])
                cond_batch.append(conds[index][start:start + segment])
            loss = train_step(self.denoiser, optimizer, self.schedule, x0_batch, cond_batch,
                              config.drop_prob, seed=int(rng.integers(2 ** 31)))
            self.history.append(loss)
            if step % 100 == 0 or step == steps - 1:
                logger.info("diffusion_step", step=step, loss=loss)
        return self.history

    def generate(self, cond: np.ndarray, seed: int, w: Optional[float] = None) -> np.ndarray:
        """Sample a log-mel sequence with as many frames as the conditioner."""
        if not self.trained:
            raise ContractError("diffusion model is untrained")
        w = self.config.guidance_scale if w is None else w
        x = sample(self.denoiser, cond, self.schedule, w, seed,
                   (cond.shape[0], self.config.n_mels), self.normalizer.clamp_range(),
                   self.config.sample_variance)
        mel = self.normalizer.denormalize(x)
        return np.clip(mel, np.log(self.config.log_floor), self.normalizer.max_value + 1.0)

    def save(self, path: Path) -> None:
        if not self.trained:
            raise ContractError("refusing to save an untrained diffusion model")
        config = self.config
        meta = {
            "kind": "diffnam",
            "config": config.model_dump(mode="json"),
            "config_hash": config.config_hash(),
            "schedule": {"steps": config.diffusion_steps, "beta_start": config.beta_start,
                         "beta_end": config.beta_end, "shape": config.schedule_shape.value},
            "dims": {"n_mels": config.n_mels, "conditioner": config.conditioner_dim,
                     "text": config.text_dim, "n_phonemes": self.n_phonemes,
                     "reference_conditioner": config.reference_conditioner_dim},
            "drop_prob": config.drop_prob,
            "seed": self.seed,
            "max_value": self.normalizer.max_value,
            "history": self.history,
        }
        tensors = {f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()}
        tensors.update({"norm.mean": self.normalizer.mean, "norm.std": self.normalizer.std,
                        "text_table": self.text_table})
        write_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path: Path) -> "DiffNamModel":
        meta, tensors = read_checkpoint(path)
        if meta.get("kind") != "diffnam":
            raise ContractError(f"{path} is not a diffusion checkpoint")
        config = PipelineConfig(**meta["config"])
        model = cls(config, n_phonemes=meta["dims"]["n_phonemes"], seed=meta["seed"])
        prefix = "denoiser."
        model.denoiser.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        model.normalizer = MelNormalizer(tensors["norm.mean"], tensors["norm.std"], meta["max_value"], config.log_floor)
        model.text_table = tensors["text_table"]
        model.history = list(meta.get("history", []))
        return model
