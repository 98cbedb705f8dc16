"""
Audio I/O, STFT / log-mel analysis and Griffin-Lim resynthesis.

Framing is centered: frame t covers samples [t*hop - n_fft/2, t*hop + n_fft/2)
of the reflect-padded signal, so an n-sample buffer yields ceil(n / hop) frames
(1 s at 16 kHz with hop 320 gives 50 frames).
"""

from functools import lru_cache
from math import gcd
from pathlib import Path
from typing import List, Optional

import librosa
import numpy as np
import structlog
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ContractError, FormatError
from .formats import FeatureMeta, read_features, write_features
from .models import AudioBuffer, MelSpectrogram

logger = structlog.get_logger()

DEFAULT_RATE = 16000
PCM_SCALE = 32768.0


# ============================================================================
# WAV I/O AND RESAMPLING
# ============================================================================

def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling (scipy's Kaiser-windowed FIR, beta 5)."""
    if target_rate <= 0:
        raise ContractError(f"target sample rate must be positive, got {target_rate}")
    if target_rate == buffer.sample_rate:
        return buffer
    g = gcd(target_rate, buffer.sample_rate)
    up, down = target_rate // g, buffer.sample_rate // g
    samples = resample_poly(buffer.samples, up, down)
    return AudioBuffer(samples=np.clip(samples, -1.0, 1.0), sample_rate=target_rate)


def load_wav(path: Path, target_rate: Optional[int] = DEFAULT_RATE) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV; resample to target_rate unless it is None."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise FormatError(f"{path}: malformed WAV ({e})") from e
    if data.dtype != np.int16:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}, need 16-bit PCM")
    if data.ndim != 1:
        raise FormatError(f"{path}: unsupported channel count {data.shape[1]}, need mono")
    buffer = AudioBuffer(samples=data.astype(np.float64) / PCM_SCALE, sample_rate=rate)
    if target_rate is not None and rate != target_rate:
        logger.debug("resampling", path=str(path), source_rate=rate, target_rate=target_rate)
        buffer = resample(buffer, target_rate)
    return buffer


def save_wav(buffer: AudioBuffer, path: Path) -> None:
    pcm = np.clip(np.round(buffer.samples * PCM_SCALE), -32768, 32767).astype(np.int16)
    wavfile.write(path, buffer.sample_rate, pcm)


# ============================================================================
# STFT
# ============================================================================

def frame_count(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def check_window(window: int, n_fft: int) -> None:
    # librosa zero-pads the periodic Hann of length `window` to the center of n_fft
    if window > n_fft:
        raise ContractError(f"window {window} exceeds n_fft {n_fft}")


def padded_length(n_frames: int, hop: int, n_fft: int) -> int:
    return (n_frames - 1) * hop + n_fft


def pad_signal(samples: np.ndarray, hop: int, n_fft: int) -> np.ndarray:
    n = samples.size
    left = n_fft // 2
    right = padded_length(frame_count(n, hop), hop, n_fft) - left - n
    if n <= max(left, right):
        raise ContractError(f"signal of {n} samples is too short to reflect-pad by {max(left, right)}")
    return np.pad(samples, (left, right), mode="reflect")


def stft_padded(padded: np.ndarray, hop: int, window: int, n_fft: int) -> np.ndarray:
    """STFT of an already padded signal; (T, n_fft//2 + 1) complex."""
    check_window(window, n_fft)
    spec = librosa.stft(padded, n_fft=n_fft, hop_length=hop, win_length=window,
                        window="hann", center=False)
    return spec.T


def stft(samples: np.ndarray, hop: int = 320, window: int = 800, n_fft: int = 1024) -> np.ndarray:
    spec = stft_padded(pad_signal(np.asarray(samples, dtype=np.float64), hop, n_fft), hop, window, n_fft)
    return spec[: frame_count(samples.size, hop)]


def istft_padded(spec: np.ndarray, hop: int, window: int, n_fft: int) -> np.ndarray:
    """Least-squares inverse: the padded signal whose STFT is closest to `spec`."""
    check_window(window, n_fft)
    return librosa.istft(spec.T, hop_length=hop, win_length=window, n_fft=n_fft,
                         window="hann", center=False,
                         length=padded_length(spec.shape[0], hop, n_fft))


def istft(spec: np.ndarray, hop: int = 320, window: int = 800, n_fft: int = 1024,
          length: Optional[int] = None) -> np.ndarray:
    padded = istft_padded(spec, hop, window, n_fft)
    start = n_fft // 2
    length = spec.shape[0] * hop if length is None else length
    return padded[start:start + length]


# ============================================================================
# MEL ANALYSIS
# ============================================================================

def mel_frequencies(n_mels: int, sample_rate: int = DEFAULT_RATE) -> np.ndarray:
    """The n_mels + 2 band edges; filter m is centered at edges[m + 1]."""
    return librosa.mel_frequencies(n_mels=n_mels + 2, fmin=0.0, fmax=sample_rate / 2.0, htk=True)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = 80, n_fft: int = 1024, sample_rate: int = DEFAULT_RATE) -> np.ndarray:
    """HTK-scale triangular filters over [0, sr/2], peak 1; (n_mels, n_fft//2 + 1)."""
    bank = librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=0.0,
                               fmax=sample_rate / 2.0, htk=True, norm=None, dtype=np.float64)
    bank.setflags(write=False)
    return bank


def mel_spectrogram(
    audio: AudioBuffer,
    n_mels: int = 80,
    hop: int = 320,
    window: int = 800,
    n_fft: int = 1024,
    log_floor: float = 1e-5,
) -> MelSpectrogram:
    if audio.samples.size < window:
        raise ContractError(f"audio of {audio.samples.size} samples is shorter than one window ({window})")
    if hop > window:
        raise ContractError(f"hop {hop} exceeds window {window}")
    power = np.abs(stft(audio.samples, hop, window, n_fft)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, audio.sample_rate).T
    return MelSpectrogram(
        frames=np.log(np.maximum(energies, log_floor)),
        hop=hop,
        window=window,
        sample_rate=audio.sample_rate,
        n_mels=n_mels,
        log_floor=log_floor,
    )


def mel_to_linear(mel: MelSpectrogram, n_fft: int = 1024) -> np.ndarray:
    """Magnitude spectrogram estimate via the pseudo-inverse filterbank."""
    basis = mel_filterbank(mel.n_mels, n_fft, mel.sample_rate)
    energies = np.maximum(np.exp(mel.frames) - mel.log_floor, 0.0)
    power = np.maximum(energies @ np.linalg.pinv(basis).T, 0.0)
    return np.sqrt(power)


def spectral_convergence(spec: np.ndarray, target: np.ndarray) -> float:
    """|| |spec| - target || / || target ||, with Parseval bin weights (interior bins count twice)."""
    weights = np.full(target.shape[1], 2.0)
    weights[0] = 1.0
    if target.shape[1] % 2 == 1:
        weights[-1] = 1.0
    num = np.sum(weights * (np.abs(spec) - target) ** 2)
    den = np.sum(weights * target ** 2)
    if den == 0.0:
        return float(np.sqrt(num))
    return float(np.sqrt(num / den))


def griffin_lim(
    mel: MelSpectrogram,
    iterations: int = 60,
    n_fft: int = 1024,
    seed: int = 0,
    return_history: bool = False,
):
    """
    Phase reconstruction from a log-mel spectrogram.

    Iterates entirely in the padded signal domain so every step is an exact
    least-squares projection; the spectral-convergence history is therefore
    non-increasing. Output has exactly T * hop samples.
    """
    if iterations < 1:
        raise ContractError("griffin_lim needs at least one iteration")
    hop, window = mel.hop, mel.window
    target = mel_to_linear(mel, n_fft)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))

    history: List[float] = []
    signal = istft_padded(target * phase, hop, window, n_fft)
    for _ in range(iterations):
        spec = stft_padded(signal, hop, window, n_fft)
        history.append(spectral_convergence(spec, target))
        phase = np.exp(1j * np.angle(spec))
        signal = istft_padded(target * phase, hop, window, n_fft)

    start = n_fft // 2
    samples = signal[start:start + mel.n_frames * hop]
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples * (0.999 / peak)
    logger.debug("griffin_lim", iterations=iterations, convergence=history[-1])
    audio = AudioBuffer(samples=samples, sample_rate=mel.sample_rate)
    if return_history:
        return audio, history
    return audio


# ============================================================================
# FEATURE FILES
# ============================================================================

def save_mel(mel: MelSpectrogram, path: Path) -> None:
    meta = FeatureMeta(sample_rate=mel.sample_rate, hop=mel.hop, window=mel.window, n_mels=mel.n_mels)
    write_features(path, mel.frames, meta)


def load_mel(path: Path, log_floor: float = 1e-5) -> MelSpectrogram:
    frames, meta = read_features(path)
    # f32 storage can round a floor entry just below log(floor)
    frames = np.maximum(frames, np.log(log_floor))
    return MelSpectrogram(
        frames=frames,
        hop=meta.hop,
        window=meta.window,
        sample_rate=int(meta.sample_rate),
        n_mels=meta.n_mels,
        log_floor=log_floor,
    )


def features_meta(n_cols: int, hop: int, window: int, sample_rate: int = DEFAULT_RATE) -> FeatureMeta:
    return FeatureMeta(sample_rate=sample_rate, hop=hop, window=window, n_mels=n_cols)

