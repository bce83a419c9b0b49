"""Time-frequency features: framing, power spectrogram, log-Mel and MFCC.

Defaults follow the 16 kHz / 40 ms window / 20 ms hop / 1024-point FFT /
128 Mel band / 40 coefficient setup. Everything is float64.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError

SAMPLE_RATE = 16000

KINDS = ("power", "log_mel", "mfcc")


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"audio must be mono 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise InvalidInputError("audio is empty")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("audio contains non-finite samples")
        if np.max(np.abs(samples)) > 1.0:
            raise InvalidInputError("audio samples must lie in [-1, 1]")
        if self.sample_rate_hz != SAMPLE_RATE:
            raise InvalidInputError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureConfig:
    win_len_samples: int = 640
    hop_samples: int = 320
    fft_size: int = 1024
    n_mels: int = 128
    n_mfcc: int = 40
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0
    log_floor: float = 1e-10
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if min(self.win_len_samples, self.hop_samples, self.fft_size, self.n_mels, self.n_mfcc) <= 0:
            raise ConfigError("feature sizes must be positive")
        if self.win_len_samples > self.fft_size:
            raise ConfigError("window longer than FFT size")
        if self.hop_samples > self.win_len_samples:
            raise ConfigError("hop longer than window")
        if self.n_mfcc > self.n_mels:
            raise ConfigError("n_mfcc exceeds n_mels")
        if not 0 <= self.f_min_hz < self.f_max_hz <= self.sample_rate_hz / 2:
            raise ConfigError("need 0 <= f_min < f_max <= Nyquist")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class FeatureMatrix:
    values: np.ndarray
    kind: str
    config: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown feature kind {self.kind!r}")
        expected = {"power": self.config.n_bins, "log_mel": self.config.n_mels,
                    "mfcc": self.config.n_mfcc}[self.kind]
        if self.values.ndim != 2 or self.values.shape[1] != expected:
            raise InvalidInputError(f"{self.kind} features need {expected} bins, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _as_samples(audio) -> np.ndarray:
    if isinstance(audio, AudioBuffer):
        return audio.samples
    return AudioBuffer(np.asarray(audio, dtype=np.float64)).samples


def num_frames(n_samples: int, cfg: FeatureConfig = FeatureConfig()) -> int:
    if n_samples <= 0:
        raise InvalidInputError("audio is empty")
    n = max(n_samples, cfg.win_len_samples)
    return 1 + (n - cfg.win_len_samples) // cfg.hop_samples


def frame_signal(audio, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Slice audio into overlapping frames, shape (frames, win_len).

    Audio shorter than one window is right-padded with zeros; trailing
    samples that do not fill a whole hop are dropped.
    """
    x = _as_samples(audio)
    win, hop = cfg.win_len_samples, cfg.hop_samples
    if x.size < win:
        x = np.concatenate([x, np.zeros(win - x.size)])
    count = 1 + (x.size - win) // hop
    starts = np.arange(count) * hop
    return x[starts[:, None] + np.arange(win)[None, :]]


MEL_SCALE = 1127.0


def hz_to_mel(f):
    """HTK mel scale: 1127 * ln(1 + f / 700), i.e. 2595 * log10(1 + f / 700) up to constant rounding."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise InvalidInputError("frequency must be non-negative")
    out = MEL_SCALE * np.log1p(f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise InvalidInputError("mel value must be non-negative")
    out = 700.0 * np.expm1(m / MEL_SCALE)
    return float(out) if out.ndim == 0 else out


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def mel_center_frequencies(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """The n_mels + 2 edge/center frequencies in Hz, equally spaced in mel."""
    mels = np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=8)
def _filterbank(cfg: FeatureConfig) -> np.ndarray:
    points = mel_center_frequencies(cfg)
    bin_hz = np.arange(cfg.n_bins) * cfg.sample_rate_hz / cfg.fft_size
    left, center, right = points[:-2, None], points[1:-1, None], points[2:, None]
    if np.any(np.diff(points) <= 0):
        raise ConfigError("mel points are not strictly increasing")
    rising = (bin_hz[None, :] - left) / (center - left)
    falling = (right - bin_hz[None, :]) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ConfigError(f"{empty.size} mel filters fall between FFT bins; "
                          f"reduce n_mels or raise fft_size")
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_mels, fft_size // 2 + 1)."""
    return _filterbank(cfg).copy()


def power_spectrogram(audio, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    frames = frame_signal(audio, cfg) * hann_window(cfg.win_len_samples)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    return FeatureMatrix(power, "power", cfg)


def mel_energies(audio, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Linear Mel-band energies before log compression."""
    power = power_spectrogram(audio, cfg).values
    return power @ _filterbank(cfg).T


def mel_spectrogram(audio, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """log(mel energies + log_floor), shape (frames, n_mels)."""
    return FeatureMatrix(np.log(mel_energies(audio, cfg) + cfg.log_floor), "log_mel", cfg)


@lru_cache(maxsize=8)
def _dct_basis(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    basis[0] *= np.sqrt(1.0 / n)
    basis[1:] *= np.sqrt(2.0 / n)
    basis.setflags(write=False)
    return basis


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k is the k-th cosine."""
    return _dct_basis(int(n)).copy()


def mfcc_from_log_mel(log_mel: np.ndarray, n_mfcc: int) -> np.ndarray:
    return log_mel @ _dct_basis(log_mel.shape[1])[:n_mfcc].T


def mfcc(audio, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    log_mel = mel_spectrogram(audio, cfg).values
    return FeatureMatrix(mfcc_from_log_mel(log_mel, cfg.n_mfcc), "mfcc", cfg)


def extract(audio, kind: str, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Dispatch on a CLI-style feature name: mel, mfcc or power."""
    if kind in ("mel", "log_mel"):
        return mel_spectrogram(audio, cfg)
    if kind == "mfcc":
        return mfcc(audio, cfg)
    if kind == "power":
        return power_spectrogram(audio, cfg)
    raise InvalidInputError(f"unknown feature kind {kind!r}")


def write_feature_csv(features: FeatureMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "bin", "value"])
        for i, row in enumerate(features.values):
            for j, v in enumerate(row):
                writer.writerow([i, j, repr(float(v))])


def read_feature_csv(path, kind: str, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["frame", "bin", "value"]:
            raise InvalidInputError(f"{path}: bad header {header}")
        rows = [(int(f), int(b), float(v)) for f, b, v in reader]
    n_frames = max(r[0] for r in rows) + 1
    n_bins = max(r[1] for r in rows) + 1
    values = np.zeros((n_frames, n_bins))
    for f, b, v in rows:
        values[f, b] = v
    return FeatureMatrix(values, kind, cfg)


def config_dict(cfg: FeatureConfig) -> dict:
    return asdict(cfg)


def write_feature_bin(features: FeatureMatrix, path) -> None:
    from .checkpoint import Checkpoint

    ckpt = Checkpoint(metadata={"kind": features.kind, "feature_config": config_dict(features.config)})
    ckpt.add(features.kind, features.values)
    ckpt.save(Path(path))
