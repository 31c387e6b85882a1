"""Objective metrics: log-spectral distance, waveform SNR and STOI."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dsp import MelConfig, MelSpectrogram, Waveform, mel_spectrogram, resample

SNR_CAP_DB = 99.0


def log_spectral_distance(a, b) -> float:
    """RMS of elementwise log-mel differences."""
    a = a.frames if isinstance(a, MelSpectrogram) else np.asarray(a, dtype=np.float64)
    b = b.frames if isinstance(b, MelSpectrogram) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def waveform_snr(reference: Waveform, estimate: Waveform) -> float:
    if len(reference) != len(estimate) or reference.sample_rate_hz != estimate.sample_rate_hz:
        raise ValueError("reference and estimate must share length and sample rate")
    signal = float(np.sum(reference.samples**2))
    if signal == 0.0:
        raise ValueError("reference has zero energy")
    error = float(np.sum((reference.samples - estimate.samples) ** 2))
    if error == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * np.log10(signal / error))


# --------------------------------------------------------------------------
# STOI (Taal et al. short-time objective intelligibility)

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames, 384 ms at 10 kHz with hop 128
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, num_bands: int = STOI_BANDS, min_freq: float = STOI_MIN_FREQ):
    """Binary one-third-octave band matrix ``(num_bands, nfft // 2 + 1)`` and band centers."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    centers = 2.0 ** (k / 3.0) * min_freq
    lows = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    highs = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        lo = int(np.argmin((f - lows[i]) ** 2))
        hi = int(np.argmin((f - highs[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm, centers


def _stoi_window(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    starts = range(0, len(x) - n + 1, hop)
    w = _stoi_window(n)
    return np.array([w * x[s : s + n] for s in starts]).reshape(-1, n)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, n = frames.shape
    out = np.zeros((n_frames - 1) * hop + n) if n_frames else np.zeros(0)
    for i in range(n_frames):
        out[i * hop : i * hop + n] += frames[i]
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE_DB, n: int = STOI_FRAME, hop: int = STOI_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest frame of ``x``."""
    xf, yf = _frames(x, n, hop), _frames(y, n, hop)
    energies = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energies > energies.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2), n=STOI_NFFT, axis=1)
    return np.sqrt(np.abs(spec) ** 2 @ obm.T).T  # (bands, frames)


def stoi(clean: Waveform, processed: Waveform) -> float:
    """Short-time objective intelligibility of ``processed`` against ``clean``."""
    if len(clean) != len(processed):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(processed)}")
    if clean.sample_rate_hz != processed.sample_rate_hz:
        raise ValueError("sample rate mismatch")
    x = resample(clean.samples, clean.sample_rate_hz, STOI_FS)
    y = resample(processed.samples, processed.sample_rate_hz, STOI_FS)
    x, y = remove_silent_frames(x, y)
    if len(x) < STOI_FRAME:
        raise ValueError("signal too short (or silent) for one 384 ms STOI segment")
    obm, _ = third_octave_bands()
    X, Y = _band_envelopes(x, obm), _band_envelopes(y, obm)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError("signal too short for one 384 ms STOI segment")

    clip = 10.0 ** (-STOI_BETA_DB / 20.0)
    scores = []
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs, ys = X[:, m - STOI_SEGMENT : m], Y[:, m - STOI_SEGMENT : m]
        gain = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        yp = np.minimum(ys * gain, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + _EPS
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + _EPS
        scores.append(np.sum(xc * yc, axis=1))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Set evaluation

@dataclass
class ItemScores:
    lsd: float
    snr_db: float
    stoi: float


def _scores(clean: Waveform, other: Waveform, mel_cfg: MelConfig) -> ItemScores:
    return ItemScores(
        log_spectral_distance(mel_spectrogram(clean, mel_cfg), mel_spectrogram(other, mel_cfg)),
        waveform_snr(clean, other),
        stoi(clean, other),
    )


def evaluate_set(triples: list, mel_cfg: MelConfig | None = None, names: list | None = None) -> dict:
    """Score ``(clean, degraded, restored)`` waveform triples.

    Deltas are signed improvements: positive means the restored audio is
    closer to clean (LSD delta is ``degraded - restored``; SNR and STOI
    deltas are ``restored - degraded``).
    """
    if not triples:
        raise ValueError("nothing to evaluate")
    mel_cfg = mel_cfg or MelConfig(sample_rate_hz=triples[0][0].sample_rate_hz, f_max_hz=triples[0][0].sample_rate_hz / 2)
    names = names or [f"item{i:04d}" for i in range(len(triples))]
    items = []
    for name, (clean, degraded, restored) in zip(names, triples):
        if not len(clean) == len(degraded) == len(restored):
            raise ValueError(f"{name}: clean/degraded/restored lengths differ ({len(clean)}, {len(degraded)}, {len(restored)})")
        d = _scores(clean, degraded, mel_cfg)
        r = _scores(clean, restored, mel_cfg)
        items.append(
            {
                "name": name,
                "degraded": {"lsd": d.lsd, "snr_db": d.snr_db, "stoi": d.stoi},
                "restored": {"lsd": r.lsd, "snr_db": r.snr_db, "stoi": r.stoi},
                "delta": {"lsd": d.lsd - r.lsd, "snr_db": r.snr_db - d.snr_db, "stoi": r.stoi - d.stoi},
            }
        )
    summary = {
        group: {key: float(np.mean([it[group][key] for it in items])) for key in ("lsd", "snr_db", "stoi")}
        for group in ("degraded", "restored", "delta")
    }
    return {"items": items, "summary": summary, "count": len(items)}


def format_report(report: dict) -> str:
    """One JSON record per item, then a summary record, with stable key order."""
    lines = [json.dumps({"type": "item", **item}, sort_keys=True) for item in report["items"]]
    lines.append(json.dumps({"type": "summary", "count": report["count"], **report["summary"]}, sort_keys=True))
    return "\n".join(lines) + "\n"
