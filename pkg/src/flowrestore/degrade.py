"""Synthetic degradations applied to clean speech on the fly.

Every random operation takes an explicit integer seed; there is no global
random state. A :class:`DegradationChain` round-trips through a single JSON
line, so any degraded example can be rebuilt from its log entry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy import signal as sps

from .dsp import MelSpectrogram, Waveform, resample

# Order in which waveform-domain effects are applied: room, channel, codec, mixing.
CANONICAL_ORDER = ("reverb", "bandlimit", "bitcrush", "compress", "distort", "gain", "noise")
SPEC_KINDS = ("tf_mask",)


class NoiseKind(str, Enum):
    CITY = "city"
    CROWD = "crowd"
    BABBLE = "babble"
    NATURE = "nature"
    OFFICE = "office"
    RESTAURANT = "restaurant"
    WHITE = "white"
    PINK = "pink"


NOISE_RMS = 0.1


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


# --------------------------------------------------------------------------
# Noise synthesis

def _pink(n: int, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spectrum.size, dtype=np.float64)
    f[0] = 1.0
    spectrum /= np.sqrt(f)
    spectrum[0] = 0.0
    return np.fft.irfft(spectrum, n=n)


def _slow_envelope(n: int, sr: int, rate_lo: float, rate_hi: float, rng: np.random.Generator) -> np.ndarray:
    """Random smooth positive modulation built from a few low-frequency sinusoids."""
    t = np.arange(n) / sr
    env = np.ones(n)
    for _ in range(3):
        rate = rng.uniform(rate_lo, rate_hi)
        env += 0.3 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return np.maximum(env, 0.05)


def _babble(n: int, sr: int, rng: np.random.Generator, n_lo: int, n_hi: int) -> np.ndarray:
    out = np.zeros(n)
    t = np.arange(n) / sr
    hi_edge = min(3400.0, 0.45 * sr)
    for _ in range(int(rng.integers(n_lo, n_hi + 1))):
        center = rng.uniform(300.0, hi_edge)
        width = rng.uniform(0.1, 0.3) * center
        lo = max(300.0, center - width / 2)
        hi = min(hi_edge, center + width / 2)
        if hi <= lo:
            continue
        sos = sps.butter(2, [lo, hi], btype="bandpass", fs=sr, output="sos")
        stream = sps.sosfilt(sos, rng.standard_normal(n))
        # syllabic-rate amplitude modulation
        rate = rng.uniform(2.0, 6.0)
        am = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) ** 2
        out += stream * am
    return out


def _city(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    base = _pink(n, rng)
    base /= max(_rms(base), 1e-12)
    n_bursts = int(rng.poisson(max(1.0, 2.0 * n / sr)))
    for _ in range(n_bursts):
        start = int(rng.integers(0, n))
        length = int(rng.uniform(0.02, 0.2) * sr)
        seg = min(length, n - start)
        decay = np.exp(-np.arange(seg) / (0.25 * length + 1))
        base[start : start + seg] += rng.uniform(2.0, 6.0) * rng.standard_normal(seg) * decay
    return base


def _nature(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    base = _pink(n, rng)
    sos = sps.butter(4, min(2000.0, 0.45 * sr), btype="lowpass", fs=sr, output="sos")
    base = sps.sosfilt(sos, base)
    return base * _slow_envelope(n, sr, 0.1, 0.5, rng)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / max(_rms(x), 1e-12)


def synth_noise(kind, num_samples: int, sample_rate_hz: int, seed: int) -> Waveform:
    """Parametric ambient noise of the given kind, normalized to RMS 0.1."""
    if num_samples <= 0:
        raise ValueError(f"num_samples must be positive, got {num_samples}")
    kind = NoiseKind(kind)
    rng = _rng([seed, list(NoiseKind).index(kind)])
    n, sr = int(num_samples), int(sample_rate_hz)
    if kind is NoiseKind.WHITE:
        x = rng.standard_normal(n)
    elif kind is NoiseKind.PINK:
        x = _pink(n, rng)
    elif kind is NoiseKind.BABBLE:
        x = _babble(n, sr, rng, 8, 12)
    elif kind is NoiseKind.CROWD:
        x = _babble(n, sr, rng, 12, 16)
    elif kind is NoiseKind.CITY:
        x = _city(n, sr, rng)
    elif kind is NoiseKind.NATURE:
        x = _nature(n, sr, rng)
    elif kind is NoiseKind.OFFICE:
        x = 0.7 * _unit(_pink(n, rng)) + 0.3 * _unit(_babble(n, sr, rng, 8, 12))
    else:  # restaurant
        x = 0.4 * _unit(_pink(n, rng)) + 0.6 * _unit(_babble(n, sr, rng, 12, 16))
    if _rms(x) == 0.0:
        x = rng.standard_normal(n)
    return Waveform(x * (NOISE_RMS / _rms(x)), sr)


def add_noise_at_snr(speech: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Mix ``noise`` into ``speech`` so the result has the requested SNR.

    The noise is truncated to the speech length. The mixture is not clipped.
    """
    if speech.sample_rate_hz != noise.sample_rate_hz:
        raise ValueError("speech and noise sample rates differ")
    if len(noise) < len(speech):
        raise ValueError(f"noise too short ({len(noise)} < {len(speech)} samples)")
    n = noise.samples[: len(speech)]
    s_rms, n_rms = _rms(speech.samples), _rms(n)
    if s_rms == 0.0:
        raise ValueError("speech has zero energy")
    if n_rms == 0.0:
        raise ValueError("noise has zero energy")
    g = (s_rms / n_rms) * 10.0 ** (-snr_db / 20.0)
    return Waveform(speech.samples + g * n, speech.sample_rate_hz)


# --------------------------------------------------------------------------
# Effects

RT60_DECAY = 6.908  # ln(1000): amplitude falls to 1e-3 after one RT60


def rir_envelope(n, rt60_s: float, sample_rate_hz: int):
    return np.exp(-RT60_DECAY * np.asarray(n, dtype=np.float64) / (rt60_s * sample_rate_hz))


def synth_rir(rt60_s: float, sample_rate_hz: int, seed: int) -> Waveform:
    """Exponentially decaying Gaussian-noise room response with a unit direct path."""
    if not 0.05 <= rt60_s <= 3.0:
        raise ValueError(f"rt60 must lie in [0.05, 3.0] s, got {rt60_s}")
    length = int(round(rt60_s * sample_rate_hz))
    g = _rng(seed).standard_normal(length)
    h = rir_envelope(np.arange(length), rt60_s, sample_rate_hz) * g
    h[0] = 1.0
    return Waveform(h, sample_rate_hz)


def apply_reverb(speech: Waveform, rir: Waveform) -> Waveform:
    if speech.sample_rate_hz != rir.sample_rate_hz:
        raise ValueError("speech and rir sample rates differ")
    if len(rir) == 0:
        raise ValueError("empty impulse response")
    method = "direct" if len(rir) <= 64 else "fft"
    wet = sps.convolve(speech.samples, rir.samples, mode="full", method=method)[: len(speech)]
    peak_in, peak_out = np.max(np.abs(speech.samples)), np.max(np.abs(wet))
    if peak_out > 0:
        wet = wet * (peak_in / peak_out)
    return Waveform(wet, speech.sample_rate_hz)


def bandlimit(speech: Waveform, cutoff_hz: float) -> Waveform:
    """Emulate a band-limited channel by resampling down to ``2 * cutoff`` and back."""
    sr = speech.sample_rate_hz
    if not 0 < cutoff_hz < sr / 2:
        raise ValueError(f"cutoff must lie in (0, {sr / 2}) Hz, got {cutoff_hz}")
    low = resample(speech.samples, sr, 2.0 * cutoff_hz)
    back = resample(low, 2.0 * cutoff_hz, sr)
    n = len(speech)
    if back.size < n:
        back = np.pad(back, (0, n - back.size))
    return Waveform(back[:n], sr)


def bitcrush(speech: Waveform, bits: int) -> Waveform:
    """Uniform mid-rise quantizer with ``2**bits`` levels over [-1, 1]."""
    if not 2 <= int(bits) <= 16:
        raise ValueError(f"bits must lie in [2, 16], got {bits}")
    levels = 2 ** int(bits)
    step = 2.0 / levels
    idx = np.clip(np.floor(speech.samples / step), -levels // 2, levels // 2 - 1)
    return Waveform((idx + 0.5) * step, speech.sample_rate_hz)


def compress_dynamics(speech: Waveform, threshold_db: float, ratio: float) -> Waveform:
    """Static compressor on instantaneous level; sign-preserving and monotone."""
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if threshold_db > 0:
        raise ValueError(f"threshold must be <= 0 dBFS, got {threshold_db}")
    x = speech.samples
    if ratio == 1:
        return Waveform(x.copy(), speech.sample_rate_hz)
    mag = np.abs(x)
    with np.errstate(divide="ignore"):
        level_db = 20.0 * np.log10(mag)
    over = level_db > threshold_db
    out_db = threshold_db + (level_db[over] - threshold_db) / ratio
    y = x.copy()
    y[over] = np.sign(x[over]) * 10.0 ** (out_db / 20.0)
    return Waveform(y, speech.sample_rate_hz)


def distort(speech: Waveform, drive: float) -> Waveform:
    """Normalized tanh waveshaper, ``tanh(drive * x) / tanh(drive)``."""
    if not drive > 0:
        raise ValueError(f"drive must be positive, got {drive}")
    return Waveform(np.tanh(drive * speech.samples) / np.tanh(drive), speech.sample_rate_hz)


def gain(speech: Waveform, gain_db: float) -> Waveform:
    return Waveform(speech.samples * 10.0 ** (gain_db / 20.0), speech.sample_rate_hz)


def tf_mask(
    mel: MelSpectrogram,
    num_time_masks: int,
    num_freq_masks: int,
    max_time_frac: float,
    max_freq_frac: float,
    seed: int,
) -> MelSpectrogram:
    """Set random contiguous frame spans and bin spans to the log floor."""
    if not (0 < max_time_frac <= 1 and 0 < max_freq_frac <= 1):
        raise ValueError("mask fractions must lie in (0, 1]")
    if num_time_masks < 0 or num_freq_masks < 0:
        raise ValueError("mask counts must be >= 0")
    rng = _rng([seed, 7])
    frames = mel.frames.copy()
    T, F = frames.shape
    floor = mel.config.log_min
    for _ in range(num_time_masks):
        width = int(rng.integers(0, int(max_time_frac * T) + 1))
        start = int(rng.integers(0, T - width + 1))
        frames[start : start + width, :] = floor
    for _ in range(num_freq_masks):
        width = int(rng.integers(0, int(max_freq_frac * F) + 1))
        start = int(rng.integers(0, F - width + 1))
        frames[:, start : start + width] = floor
    return mel.replace(frames)


# --------------------------------------------------------------------------
# Chains

@dataclass
class DegradationSpec:
    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in CANONICAL_ORDER + SPEC_KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")


@dataclass
class DegradationChain:
    specs: list = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.specs)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "specs": [asdict(s) for s in self.specs]}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DegradationChain":
        rec = json.loads(line)
        return cls([DegradationSpec(s["kind"], dict(s["params"])) for s in rec["specs"]], int(rec["seed"]))


@dataclass
class RandomDegradationPolicy:
    """Inclusion probabilities and parameter ranges for random chains.

    Ranges are ``(low, high)`` pairs; integer-valued parameters are drawn
    inclusively.
    """

    p_reverb: float = 0.5
    p_bandlimit: float = 0.5
    p_bitcrush: float = 0.5
    p_compress: float = 0.5
    p_distort: float = 0.5
    p_gain: float = 0.5
    p_noise: float = 0.5
    rt60_s: tuple = (0.1, 1.2)
    cutoff_hz: tuple = (2000.0, 7000.0)
    bits: tuple = (4, 12)
    threshold_db: tuple = (-30.0, -10.0)
    ratio: tuple = (2.0, 8.0)
    drive: tuple = (1.0, 8.0)
    gain_db: tuple = (-12.0, 6.0)
    snr_db: tuple = (0.0, 25.0)
    noise_kinds: tuple = tuple(k.value for k in NoiseKind)
    max_chain_length: int = 7
    max_time_masks: int = 2
    max_freq_masks: int = 2
    max_time_frac: float = 0.1
    max_freq_frac: float = 0.1

    def __post_init__(self):
        for kind in CANONICAL_ORDER:
            p = getattr(self, f"p_{kind}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_{kind} must lie in [0, 1], got {p}")
        for name in ("rt60_s", "cutoff_hz", "bits", "threshold_db", "ratio", "drive", "gain_db", "snr_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        if not self.noise_kinds:
            raise ValueError("noise_kinds must be non-empty")
        self.noise_kinds = tuple(NoiseKind(k).value for k in self.noise_kinds)
        if self.max_chain_length < 1:
            raise ValueError("max_chain_length must be >= 1")

    @classmethod
    def none(cls) -> "RandomDegradationPolicy":
        """Policy that never degrades anything."""
        return cls(**{f"p_{k}": 0.0 for k in CANONICAL_ORDER}, max_time_masks=0, max_freq_masks=0)

    @classmethod
    def heavy(cls) -> "RandomDegradationPolicy":
        return cls(**{f"p_{k}": 1.0 for k in CANONICAL_ORDER})


def _draw_params(kind: str, policy: RandomDegradationPolicy, rng: np.random.Generator) -> dict:
    u = lambda name: float(rng.uniform(*getattr(policy, name)))  # noqa: E731
    if kind == "reverb":
        return {"rt60_s": u("rt60_s"), "seed": int(rng.integers(2**31))}
    if kind == "bandlimit":
        return {"cutoff_hz": u("cutoff_hz")}
    if kind == "bitcrush":
        return {"bits": int(rng.integers(policy.bits[0], policy.bits[1] + 1))}
    if kind == "compress":
        return {"threshold_db": u("threshold_db"), "ratio": u("ratio")}
    if kind == "distort":
        return {"drive": u("drive")}
    if kind == "gain":
        return {"gain_db": u("gain_db")}
    if kind == "noise":
        noise_kind = policy.noise_kinds[int(rng.integers(len(policy.noise_kinds)))]
        return {"noise_kind": noise_kind, "snr_db": u("snr_db"), "seed": int(rng.integers(2**31))}
    raise ValueError(kind)


def sample_chain(policy: RandomDegradationPolicy, seed: int) -> DegradationChain:
    """Independent coin flip per kind, then parameter draws, in canonical order."""
    rng = _rng([seed, 1])
    chosen = [k for k in CANONICAL_ORDER if rng.random() < getattr(policy, f"p_{k}")]
    if len(chosen) > policy.max_chain_length:
        keep = set(rng.choice(len(chosen), size=policy.max_chain_length, replace=False).tolist())
        chosen = [k for i, k in enumerate(chosen) if i in keep]
    specs = [DegradationSpec(k, _draw_params(k, policy, rng)) for k in chosen]
    return DegradationChain(specs, int(seed))


def apply_spec(speech: Waveform, spec: DegradationSpec) -> Waveform:
    p = spec.params
    sr = speech.sample_rate_hz
    if spec.kind == "reverb":
        return apply_reverb(speech, synth_rir(p["rt60_s"], sr, p["seed"]))
    if spec.kind == "bandlimit":
        return bandlimit(speech, min(p["cutoff_hz"], 0.49 * sr))
    if spec.kind == "bitcrush":
        return bitcrush(speech, p["bits"])
    if spec.kind == "compress":
        return compress_dynamics(speech, p["threshold_db"], p["ratio"])
    if spec.kind == "distort":
        return distort(speech, p["drive"])
    if spec.kind == "gain":
        return gain(speech, p["gain_db"])
    if spec.kind == "noise":
        noise = synth_noise(p["noise_kind"], len(speech), sr, p["seed"])
        return add_noise_at_snr(speech, noise, p["snr_db"])
    raise ValueError(f"{spec.kind!r} is not a waveform-domain degradation")


def apply_chain(speech: Waveform, chain: DegradationChain) -> Waveform:
    out = speech
    for spec in chain.specs:
        out = apply_spec(out, spec)
    return out


def sample_mask_params(policy: RandomDegradationPolicy, seed: int) -> dict:
    """Draw time/frequency mask counts for one training item."""
    rng = _rng([seed, 2])
    return {
        "num_time_masks": int(rng.integers(0, policy.max_time_masks + 1)),
        "num_freq_masks": int(rng.integers(0, policy.max_freq_masks + 1)),
        "max_time_frac": policy.max_time_frac,
        "max_freq_frac": policy.max_freq_frac,
        "seed": int(rng.integers(2**31)),
    }
