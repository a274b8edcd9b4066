"""Log-mel front end: framing, 40-band filterbank, instance normalization, WAV IO."""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WINDOW_SEC = 0.025
HOP_SEC = 0.010
N_FFT = 512
N_MELS = 40
F_MIN = 0.0
F_MAX = 8000.0
LOG_EPS = 1e-10
NORM_EPS = 1e-5


class SignalTooShortError(ValueError):
    """Raised when a waveform cannot hold a single analysis window."""


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray  # T x F
    frame_shift: float = HOP_SEC
    already_normalized: bool = False

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def _seconds_to_samples(seconds: float, sample_rate: int) -> int:
    return int(round(seconds * sample_rate))


def frame_signal(
    w: Waveform, window_len: float = WINDOW_SEC, hop: float = HOP_SEC
) -> np.ndarray:
    """Split ``w`` into Hamming-windowed frames, shape ``(T, W)``.

    ``T = floor((L - W) / H) + 1`` with all lengths in samples.
    """
    if not (window_len >= hop > 0):
        raise ValueError(f"need window_len >= hop > 0, got {window_len}, {hop}")
    win = _seconds_to_samples(window_len, w.sample_rate)
    step = _seconds_to_samples(hop, w.sample_rate)
    n = len(w)
    if n < win:
        raise SignalTooShortError(
            f"waveform too short: {n} samples < one window of {win} samples"
        )
    count = (n - win) // step + 1
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::step][:count]
    return frames * np.hamming(win)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float, f_max: float):
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb, edges[1:-1]


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``."""
    return _filterbank(n_mels, n_fft, sample_rate, f_min, f_max)[0]


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX):
    return _filterbank(n_mels, N_FFT, SAMPLE_RATE, f_min, f_max)[1].copy()


def power_spectrum(frames: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2


def log_mel(frames: np.ndarray, frame_shift: float = HOP_SEC) -> FeatureMatrix:
    """Log filterbank energies of windowed frames (natural log, floored by 1e-10).

    Works on a leading batch axis too: ``(..., T, W) -> (..., T, 40)``.
    """
    energies = power_spectrum(frames) @ mel_filterbank().T
    return FeatureMatrix(np.log(energies + LOG_EPS), frame_shift=frame_shift)


def instance_normalize(f: FeatureMatrix) -> FeatureMatrix:
    """Standardize each coefficient over time using ``sqrt(var + 1e-5)``."""
    values = f.values
    mean = values.mean(axis=-2, keepdims=True)
    var = values.var(axis=-2, keepdims=True)
    out = (values - mean) / np.sqrt(var + NORM_EPS)
    return FeatureMatrix(out, frame_shift=f.frame_shift, already_normalized=True)


def extract_features(w: Waveform) -> FeatureMatrix:
    """Waveform -> normalized T x 40 network input."""
    return instance_normalize(log_mel(frame_signal(w)))


def batch_features(crops: np.ndarray) -> np.ndarray:
    """Normalized log-mel for equal-length crops, ``(B, L) -> (B, T, 40)``."""
    crops = np.asarray(crops, dtype=np.float64)
    win = _seconds_to_samples(WINDOW_SEC, SAMPLE_RATE)
    step = _seconds_to_samples(HOP_SEC, SAMPLE_RATE)
    if crops.shape[-1] < win:
        raise SignalTooShortError(f"crops of {crops.shape[-1]} samples are shorter than a window")
    count = (crops.shape[-1] - win) // step + 1
    frames = np.lib.stride_tricks.sliding_window_view(crops, win, axis=-1)[:, ::step][:, :count]
    frames = frames * np.hamming(win)
    return instance_normalize(log_mel(frames)).values


def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM WAV at 16 kHz into a float waveform in [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        channels = fh.getnchannels()
        width = fh.getsampwidth()
        rate = fh.getframerate()
        if channels != 1:
            raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
        if width != 2:
            raise WavFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
        if rate != SAMPLE_RATE:
            raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, w: Waveform) -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"only {SAMPLE_RATE} Hz output is supported")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(to_pcm16(w.samples).tobytes())


def write_features_csv(path: str | Path, f: FeatureMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"mel_{k}" for k in range(f.values.shape[1])])
        for row in f.values:
            writer.writerow([repr(float(v)) for v in row])
