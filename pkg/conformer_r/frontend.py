"""
PCM WAV input and 80-dimensional log-mel filterbank features.
"""
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from conformer_r.errors import FormatError
from conformer_r.models import FEATURE_DIMS, FrontendConfig

PathLike = Union[str, Path]


@dataclass
class FeatureMatrix:
    """Per-utterance [frames x 80] log-mel energies."""

    data: np.ndarray
    utt_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != FEATURE_DIMS:
            raise FormatError(f"feature matrix must be [frames x {FEATURE_DIMS}], got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise FormatError("feature matrix has no frames")
        if not np.all(np.isfinite(self.data)):
            raise FormatError(f"feature matrix for '{self.utt_id}' contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]


def load_pcm_wav(path: PathLike, expected_rate: int = 16000) -> Tuple[np.ndarray, int]:
    """Read mono 16-bit PCM; samples are int16 / 32768."""
    try:
        with wave.open(str(path), "rb") as fid:
            channels, width, rate, nframes = (
                fid.getnchannels(), fid.getsampwidth(), fid.getframerate(), fid.getnframes()
            )
            payload = fid.readframes(nframes)
    except wave.Error as exc:
        raise FormatError(f"{path}: audio_format: {exc}") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated RIFF header") from exc
    if channels != 1:
        raise FormatError(f"{path}: channels must be 1, got {channels}")
    if width != 2:
        raise FormatError(f"{path}: sample_width must be 2 bytes (PCM16), got {width}")
    if rate != expected_rate:
        raise FormatError(f"{path}: sample_rate must be {expected_rate}, got {rate}")
    samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_pcm_wav(path: PathLike, samples: np.ndarray, rate: int = 16000) -> None:
    """Write mono 16-bit PCM, clipping to the int16 range."""
    quantized = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fid:
        fid.setnchannels(1)
        fid.setsampwidth(2)
        fid.setframerate(rate)
        fid.writeframes(quantized.tobytes())


def hz_to_mel(hz):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Center frequency in Hz of each of the n_mels filters."""
    points = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(points[1:-1])


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters [n_fft//2 + 1 x n_mels] over linear FFT bin frequencies."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    bins = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate_hz / cfg.n_fft
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (bins[:, None] - lower) / (center - lower)
    falling = (upper - bins[:, None]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, cfg: FrontendConfig) -> int:
    return 1 + (n_samples - cfg.window_samples) // cfg.hop_samples


def compute_fbank(samples: np.ndarray, cfg: FrontendConfig, utt_id: str = "") -> FeatureMatrix:
    """Frame, pre-emphasize, Hamming-window, power FFT, mel-filter and log."""
    samples = np.asarray(samples, dtype=np.float64)
    win = cfg.window_samples
    if samples.size < win:
        raise FormatError(
            f"signal of {samples.size} samples is shorter than one window ({win} samples minimum)"
        )
    n = num_frames(samples.size, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[:: cfg.hop_samples][:n]
    emphasized = np.concatenate(
        [frames[:, :1] * (1.0 - cfg.preemphasis), frames[:, 1:] - cfg.preemphasis * frames[:, :-1]],
        axis=1,
    )
    windowed = emphasized * np.hamming(win)
    power = np.abs(np.fft.rfft(windowed, n=cfg.n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg)
    return FeatureMatrix(np.log(np.maximum(energies, cfg.log_floor)), utt_id=utt_id)


def utterance_cmvn(features: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance mean normalization; variance is left unscaled."""
    centered = features.data - features.data.mean(axis=0, keepdims=True)
    return FeatureMatrix(centered, utt_id=features.utt_id)
