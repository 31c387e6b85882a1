"""Chunked restoration of arbitrarily long recordings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import VectorFieldTransformer, model_field
from .cfm import SamplerConfig, sample_ode
from .dsp import MelConfig, MelSpectrogram, Waveform, invert_mel, mel_spectrogram


@dataclass(frozen=True)
class ChunkPlan:
    segments: tuple
    window: int
    overlap: int

    @property
    def num_frames(self) -> int:
        return self.segments[-1][1]


def chunk_plan(T: int, window: int, overlap: int) -> ChunkPlan:
    """Windows of ``window`` frames at stride ``window - overlap``; the last one is right-aligned."""
    if not 0 <= overlap < window:
        raise ValueError(f"need 0 <= overlap < window, got overlap={overlap} window={window}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if T <= window:
        return ChunkPlan(((0, T),), window, overlap)
    stride = window - overlap
    segments = []
    start = 0
    while start + window < T:
        segments.append((start, start + window))
        start += stride
    segments.append((T - window, T))
    return ChunkPlan(tuple(segments), window, overlap)


def crossfade_merge(chunks: list, plan: ChunkPlan) -> np.ndarray:
    """Blend overlapping chunks with complementary linear ramps.

    Inside each overlap the earlier chunk fades out as ``1 - w`` while the
    later one fades in as ``w``, with ``w`` rising linearly across the
    overlap; elsewhere frames are copied.
    """
    if len(chunks) != len(plan.segments):
        raise ValueError(f"{len(chunks)} chunks for {len(plan.segments)} segments")
    F = None
    for chunk, (a, b) in zip(chunks, plan.segments):
        if chunk.ndim != 2 or chunk.shape[0] != b - a or (F is not None and chunk.shape[1] != F):
            raise ValueError(f"chunk shape {chunk.shape} does not fit segment [{a}, {b})")
        F = chunk.shape[1]
    out = np.asarray(chunks[0], dtype=np.float64).copy()
    end = plan.segments[0][1]
    for chunk, (a, b) in zip(chunks[1:], plan.segments[1:]):
        chunk = np.asarray(chunk, dtype=np.float64)
        n = end - a  # overlap with what has been merged so far
        w = (np.arange(1, n + 1) / (n + 1))[:, None]
        # written as out + w * (chunk - out) so agreeing chunks merge exactly
        blended = out[a:end] + w * (chunk[:n] - out[a:end])
        out = np.concatenate([out[:a], blended, chunk[n:]], axis=0)
        end = b
    return out


def restore_mel(
    model: VectorFieldTransformer,
    y: np.ndarray,
    sampler: SamplerConfig | None = None,
    window: int | None = None,
    overlap: int = 32,
    floor: float | None = None,
) -> np.ndarray:
    """Restore a ``(T, F)`` degraded log-mel matrix, chunking when ``T > window``.

    With ``floor`` set, the result is clamped from below to that log value.
    """
    sampler = sampler or SamplerConfig()
    window = window or model.config.max_frames
    if window > model.config.max_frames:
        raise ValueError(f"window {window} exceeds model max_frames {model.config.max_frames}")
    dtype = next(model.parameters()).dtype
    model.eval()
    field_fn = model_field(model)
    plan = chunk_plan(y.shape[0], window, min(overlap, window - 1))
    chunks = []
    for a, b in plan.segments:
        y_chunk = torch.as_tensor(np.ascontiguousarray(y[a:b]), dtype=dtype)
        chunks.append(sample_ode(field_fn, y_chunk, sampler).double().numpy())
    merged = crossfade_merge(chunks, plan)
    return merged if floor is None else np.maximum(merged, floor)


def restore_waveform(
    wave: Waveform,
    model,
    sampler: SamplerConfig | None = None,
    window: int | None = None,
    overlap: int = 32,
    gl_iterations: int = 32,
    seed: int = 0,
    mel_cfg: MelConfig | None = None,
) -> tuple:
    """Full pipeline: analysis, chunked sampling, Griffin-Lim resynthesis.

    ``model`` is a :class:`VectorFieldTransformer` or a training
    checkpoint; a checkpoint also supplies the mel configuration.
    Returns ``(restored_waveform, restored_mel, num_chunks)``. The output
    is padded or trimmed to the input length.
    """
    if hasattr(model, "build_model"):
        mel_cfg = mel_cfg or model.training_config.mel
        model = model.build_model()
    mel_cfg = mel_cfg or MelConfig()
    if wave.sample_rate_hz != mel_cfg.sample_rate_hz:
        raise ValueError(f"input is {wave.sample_rate_hz} Hz, model expects {mel_cfg.sample_rate_hz} Hz")
    y = mel_spectrogram(wave, mel_cfg)
    window = window or model.config.max_frames
    restored = restore_mel(model, y.frames, sampler, window, overlap, floor=mel_cfg.log_min)
    n_chunks = len(chunk_plan(y.num_frames, window, min(overlap, window - 1)).segments)
    mel = MelSpectrogram(restored, mel_cfg)
    out = invert_mel(mel, gl_iterations, seed).samples
    if out.size < len(wave):
        out = np.pad(out, (0, len(wave) - out.size))
    return Waveform(out[: len(wave)], wave.sample_rate_hz), mel, n_chunks
