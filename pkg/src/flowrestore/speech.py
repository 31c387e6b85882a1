"""Synthetic speech-like signals and clean-audio sources for training.

The toy voice is a harmonic series on a drifting f0, shaped by three
moving formant resonances and gated into syllables. It is not speech, but
it has the structure the restoration model has to learn: harmonics,
formant envelopes, onsets and pauses.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .dsp import Waveform, load_wav, resample_wave

SPEECH_RMS = 0.1


def _syllable_gate(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    gate = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.08) * sr)
    while pos < n:
        length = int(rng.uniform(0.12, 0.32) * sr)
        seg = min(length, n - pos)
        ramp = np.sin(np.pi * np.arange(seg) / length) ** 0.5
        gate[pos : pos + seg] = ramp * rng.uniform(0.6, 1.0)
        pos += length + int(rng.uniform(0.03, 0.15) * sr)
    return gate


def synth_speech(duration_s: float, sample_rate_hz: int = 16000, seed: int = 0) -> Waveform:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    sr = int(sample_rate_hz)
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr

    base_f0 = rng.uniform(100.0, 220.0)
    f0 = base_f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi)))
    f0 *= 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    # formant tracks drift between random targets
    knots = max(2, int(duration_s * 5) + 2)
    knot_t = np.linspace(0.0, duration_s, knots)
    formants = [
        np.interp(t, knot_t, rng.uniform(lo, hi, knots))
        for lo, hi in ((300.0, 850.0), (900.0, 2300.0), (2400.0, 3200.0))
    ]
    bandwidths = (90.0, 140.0, 200.0)

    # spectral envelope evaluated on a coarse time grid; formants move slowly
    coarse = np.arange(0, n, 32)
    f0_c = f0[coarse]
    n_harm = int(0.45 * sr / base_f0)
    k = np.arange(1, n_harm + 1)[:, None]
    fk = k * f0_c[None, :]
    envelope = 0.02 + sum(
        w * np.exp(-0.5 * ((fk - fm[coarse][None, :]) / bw) ** 2)
        for fm, bw, w in zip(formants, bandwidths, (1.0, 0.6, 0.3))
    )
    amp_c = np.where(fk < 0.48 * sr, envelope / np.sqrt(k), 0.0)
    out = np.zeros(n)
    for i in range(n_harm):
        out += np.interp(np.arange(n), coarse, amp_c[i]) * np.sin((i + 1) * phase)

    out *= _syllable_gate(n, sr, rng)
    out += 1e-3 * rng.standard_normal(n)  # breath floor
    out *= SPEECH_RMS / np.sqrt(np.mean(out**2))
    return Waveform(out, sr)


class ToySpeechSource:
    """Clean-audio source producing a fresh synthetic utterance per seed."""

    def __init__(self, sample_rate_hz: int = 16000, min_duration_s: float = 0.8, max_duration_s: float = 1.2):
        self.sample_rate_hz = sample_rate_hz
        self.min_duration_s = min_duration_s
        self.max_duration_s = max_duration_s

    def __call__(self, seed: int) -> Waveform:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
        duration = rng.uniform(self.min_duration_s, self.max_duration_s)
        return synth_speech(duration, self.sample_rate_hz, seed)


class WavDirectorySource:
    """Clean-audio source drawing seeded random crops from a directory of WAV files."""

    def __init__(self, directory, sample_rate_hz: int = 16000, crop_s: float | None = 4.0):
        self.paths = sorted(Path(directory).glob("*.wav"))
        if not self.paths:
            raise FileNotFoundError(f"no .wav files in {os.fspath(directory)}")
        self.sample_rate_hz = sample_rate_hz
        self.crop_s = crop_s

    def __call__(self, seed: int) -> Waveform:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        wave = resample_wave(load_wav(self.paths[int(rng.integers(len(self.paths)))]), self.sample_rate_hz)
        if self.crop_s is None:
            return wave
        n = int(self.crop_s * self.sample_rate_hz)
        if len(wave) <= n:
            return wave
        start = int(rng.integers(0, len(wave) - n + 1))
        return Waveform(wave.samples[start : start + n], wave.sample_rate_hz)
