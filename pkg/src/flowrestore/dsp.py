"""Audio I/O and the log-mel analysis/synthesis pair.

Everything here is a pure function of its inputs. Spectrograms are stored
time-major, ``frames.shape == (T, n_mels)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.optimize import nnls
from scipy.signal import resample_poly


class AudioError(Exception):
    """Base class for audio I/O failures."""


class AudioFileNotFound(AudioError, FileNotFoundError):
    pass


class UnsupportedAudioFormat(AudioError, ValueError):
    pass


class TruncatedAudioFile(AudioError, ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"need 0 < hop <= n_fft, got hop={self.hop} n_fft={self.n_fft}")
        if not 0 <= self.f_min_hz < self.f_max_hz <= self.sample_rate_hz / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")

    @property
    def log_min(self) -> float:
        """Value of a fully floored log-mel entry."""
        return float(np.log(self.log_floor))

    def num_frames(self, num_samples: int) -> int:
        return 1 + (num_samples - self.n_fft) // self.hop


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"expected a (T>=1, F) matrix, got shape {self.frames.shape}")
        if self.frames.shape[1] != self.config.n_mels:
            raise ValueError(
                f"frame width {self.frames.shape[1]} != n_mels {self.config.n_mels}"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def replace(self, frames: np.ndarray) -> "MelSpectrogram":
        return MelSpectrogram(frames, self.config)


# --------------------------------------------------------------------------
# WAV I/O

def load_wav(path) -> Waveform:
    """Read a 16-bit PCM or 32-bit float WAV file as a mono waveform.

    Stereo input is averaged down to mono.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise AudioFileNotFound(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        if len(head) < 12 and head[:4] == b"RIFF"[: len(head)] and head:
            raise TruncatedAudioFile(f"{path}: truncated RIFF header")
        raise UnsupportedAudioFormat(f"{path}: not a RIFF/WAVE file")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        msg = str(exc).lower()
        if "unexpected end" in msg or "truncat" in msg or "incomplete" in msg or "size" in msg:
            raise TruncatedAudioFile(f"{path}: {exc}") from exc
        raise UnsupportedAudioFormat(f"{path}: {exc}") from exc
    except (EOFError, struct.error) as exc:
        raise TruncatedAudioFile(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedAudioFormat(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise TruncatedAudioFile(f"{path}: no audio frames")
    return Waveform(samples, rate)


def save_wav(wave: Waveform, path) -> None:
    """Write ``wave`` as 16-bit mono PCM, clipping to [-1, 1]."""
    if len(wave) == 0:
        raise ValueError("cannot save an empty waveform")
    clipped = np.clip(wave.samples, -1.0, 1.0)
    pcm = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    try:
        wavfile.write(os.fspath(path), wave.sample_rate_hz, pcm)
    except OSError as exc:
        raise AudioError(f"cannot write {path}: {exc}") from exc


def resample(samples: np.ndarray, orig_hz: float, target_hz: float, max_denominator: int = 200) -> np.ndarray:
    """Polyphase windowed-sinc resampling by the rational ratio nearest ``target/orig``."""
    ratio = Fraction(float(target_hz) / float(orig_hz)).limit_denominator(max_denominator)
    if ratio == 1:
        return np.asarray(samples, dtype=np.float64).copy()
    return resample_poly(np.asarray(samples, dtype=np.float64), ratio.numerator, ratio.denominator)


def resample_wave(wave: Waveform, target_hz: int) -> Waveform:
    if wave.sample_rate_hz == target_hz:
        return wave
    return Waveform(resample(wave.samples, wave.sample_rate_hz, target_hz), target_hz)


# --------------------------------------------------------------------------
# Mel analysis

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of every mel filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz), cfg.n_mels + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate_hz)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann(n: int) -> np.ndarray:
    # periodic Hann; sums to a constant under 75% and 50% overlap
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Uncentered STFT, shape ``(T, n_fft // 2 + 1)``."""
    return np.fft.rfft(frame_signal(x, n_fft, hop) * hann(n_fft), axis=1)


def istft(spec: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; length ``(T - 1) * hop + n_fft``.

    The window-power normalizer is clamped at 1e-3 of its peak so the
    single-frame edges are tapered rather than blown up.
    """
    n_frames = spec.shape[0]
    window = hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    length = (n_frames - 1) * hop + n_fft
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        out[i * hop : i * hop + n_fft] += frames[i]
        norm[i * hop : i * hop + n_fft] += window**2
    return out / np.maximum(norm, 1e-3 * norm.max())


def mel_spectrogram(wave: Waveform, cfg: MelConfig | None = None) -> MelSpectrogram:
    cfg = cfg or MelConfig()
    if wave.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"sample rate mismatch: waveform {wave.sample_rate_hz} Hz, config {cfg.sample_rate_hz} Hz"
        )
    if len(wave) < cfg.n_fft:
        raise ValueError(f"audio shorter than one window ({len(wave)} < {cfg.n_fft} samples)")
    power = np.abs(stft(wave.samples, cfg.n_fft, cfg.hop)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg)


def mel_to_linear_power(mel: MelSpectrogram) -> np.ndarray:
    """Non-negative least-squares inverse of the mel filterbank, frame by frame.

    Returns linear-frequency power, shape ``(T, n_fft // 2 + 1)``.
    """
    cfg = mel.config
    power_mel = np.exp(mel.frames)
    # entries at the floor are treated as silence
    power_mel[mel.frames <= cfg.log_min] = 0.0
    fb = mel_filterbank(cfg)
    power = np.zeros((mel.num_frames, fb.shape[1]))
    for i, row in enumerate(power_mel):
        if row.any():
            power[i] = nnls(fb, row)[0]
    return power


def invert_mel(mel: MelSpectrogram, iterations: int = 32, seed: int = 0, momentum: float = 0.99) -> Waveform:
    """Griffin-Lim resynthesis from a log-mel spectrogram.

    Phase starts from a seeded uniform draw and is refined for
    ``iterations`` rounds of the accelerated (momentum) Griffin-Lim update.
    Output length is ``(T - 1) * hop + n_fft`` samples.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    cfg = mel.config
    magnitude = np.sqrt(mel_to_linear_power(mel))

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    signal = istft(magnitude * phase, cfg.n_fft, cfg.hop)
    previous = np.zeros_like(phase)
    for _ in range(iterations):
        rebuilt = stft(signal, cfg.n_fft, cfg.hop)
        accelerated = rebuilt - (momentum / (1.0 + momentum)) * previous
        previous = rebuilt
        phase = np.exp(1j * np.angle(accelerated))
        signal = istft(magnitude * phase, cfg.n_fft, cfg.hop)
    return Waveform(signal, cfg.sample_rate_hz)
