"""Conditional flow matching between degraded and clean spectrograms.

The path runs from the degraded spectrogram ``y`` at ``t = 0`` to the clean
spectrogram ``x`` at ``t = 1``::

    x_t = (1 - alpha(t)) * y + alpha(t) * x
    u_t = alpha_dot(t) * (x - y)

All functions here accept numpy arrays or torch tensors interchangeably;
only elementwise arithmetic and reductions are used. Shapes are ``(T, F)``
or batched ``(B, T, F)``; ``t`` is a scalar or a length-``B`` vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


def _is_torch(a) -> bool:
    return torch is not None and isinstance(a, torch.Tensor)


def _cos(a):
    return torch.cos(a) if _is_torch(a) else np.cos(a)


def _sin(a):
    return torch.sin(a) if _is_torch(a) else np.sin(a)


def _as_time(t, like):
    """Broadcast ``t`` against a ``(T, F)`` or ``(B, T, F)`` array."""
    if _is_torch(like):
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    else:
        t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def _check_t(t):
    lo = float(t.min()) if hasattr(t, "min") else float(t)
    hi = float(t.max()) if hasattr(t, "max") else float(t)
    if not (0.0 <= lo and hi <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got range [{lo}, {hi}]")


def _check_shapes(*arrays):
    shape = tuple(arrays[0].shape)
    for a in arrays[1:]:
        if tuple(a.shape) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {tuple(a.shape)}")


@dataclass(frozen=True)
class FlowSchedule:
    """Interpolation schedule ``alpha(t)`` together with its derivative."""

    alpha: Callable
    alpha_dot: Callable
    name: str = "custom"


def linear_schedule() -> FlowSchedule:
    return FlowSchedule(lambda t: t, lambda t: t * 0 + 1, "linear")


def quadratic_schedule() -> FlowSchedule:
    return FlowSchedule(lambda t: t * t, lambda t: 2 * t, "quadratic")


def cosine_schedule() -> FlowSchedule:
    return FlowSchedule(
        lambda t: 0.5 - 0.5 * _cos(math.pi * t),
        lambda t: 0.5 * math.pi * _sin(math.pi * t),
        "cosine",
    )


SCHEDULES = {"linear": linear_schedule, "quadratic": quadratic_schedule, "cosine": cosine_schedule}


def get_schedule(name: str) -> FlowSchedule:
    try:
        return SCHEDULES[name]()
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None


def interpolate(x, y, t, schedule: FlowSchedule | None = None):
    schedule = schedule or linear_schedule()
    _check_shapes(x, y)
    _check_t(t)
    a = schedule.alpha(_as_time(t, x))
    return (1 - a) * y + a * x


def target_field(x, y, t, schedule: FlowSchedule | None = None):
    schedule = schedule or linear_schedule()
    _check_shapes(x, y)
    _check_t(t)
    return schedule.alpha_dot(_as_time(t, x)) * (x - y)


def cfm_loss(v_pred, x, y, t, mask=None, schedule: FlowSchedule | None = None):
    """Masked squared error between the predicted and target fields.

    Each item's error is averaged over its valid frames and all bins; a
    batch is the mean of its items. ``mask`` is boolean with shape ``(T,)``
    or ``(B, T)``; ``None`` means every frame is valid.
    """
    _check_shapes(v_pred, x, y)
    sq = (target_field(x, y, t, schedule) - v_pred) ** 2
    if mask is None:
        shape = tuple(sq.shape[:-1])
        valid = torch.ones(shape, dtype=torch.bool) if _is_torch(sq) else np.ones(shape, dtype=bool)
    else:
        if tuple(mask.shape) != tuple(x.shape[:-1]):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(x.shape[:-1])}")
        valid = mask
    counts = valid.sum(axis=-1) * sq.shape[-1]
    if (counts == 0).any():
        raise ValueError("mask has no valid frames")
    # select rather than multiply so NaN/Inf on padded frames cannot leak in
    where = torch.where if _is_torch(sq) else np.where
    sq = where(valid[..., None], sq, 0.0)
    return (sq.sum(axis=(-2, -1)) / counts).mean()


def cfg_combine(v_cond, v_uncond, strength: float):
    """Classifier-free guidance: ``v_cond + s * (v_cond - v_uncond)``."""
    _check_shapes(v_cond, v_uncond)
    if strength < 0:
        raise ValueError(f"guidance strength must be >= 0, got {strength}")
    return v_cond + strength * (v_cond - v_uncond)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 16
    cfg_strength: float = 0.5
    schedule: FlowSchedule = field(default_factory=linear_schedule)
    method: str = "euler"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_strength < 0:
            raise ValueError(f"cfg_strength must be >= 0, got {self.cfg_strength}")
        if self.method not in ("euler", "midpoint"):
            raise ValueError(f"unknown integrator {self.method!r}")


@dataclass
class FlowState:
    x_t: object
    t: float


def _all_finite(a) -> bool:
    return bool(torch.isfinite(a).all()) if _is_torch(a) else bool(np.all(np.isfinite(a)))


def guided_velocity(field_fn, x_t, t: float, y, strength: float):
    v_cond = field_fn(x_t, t, y)
    if tuple(v_cond.shape) != tuple(x_t.shape):
        raise ValueError(f"field returned shape {tuple(v_cond.shape)}, expected {tuple(x_t.shape)}")
    if not _all_finite(v_cond):
        raise FloatingPointError(f"non-finite field output at t={t}")
    if strength == 0:
        return v_cond
    v_uncond = field_fn(x_t, t, None)
    if tuple(v_uncond.shape) != tuple(x_t.shape):
        raise ValueError(f"field returned shape {tuple(v_uncond.shape)}, expected {tuple(x_t.shape)}")
    if not _all_finite(v_uncond):
        raise FloatingPointError(f"non-finite unconditional field output at t={t}")
    return cfg_combine(v_cond, v_uncond, strength)


def sample_ode(field_fn, y, config: SamplerConfig | None = None, return_trajectory: bool = False):
    """Integrate the guided field from ``x_0 = y`` to ``t = 1``.

    ``field_fn(x_t, t, cond)`` is called with ``cond=None`` for the
    unconditional branch; with ``cfg_strength == 0`` that branch is skipped.
    """
    config = config or SamplerConfig()
    h = 1.0 / config.steps
    x = y * 1.0
    trajectory = [FlowState(x, 0.0)]
    for k in range(config.steps):
        t = k * h
        v = guided_velocity(field_fn, x, t, y, config.cfg_strength)
        if config.method == "midpoint":
            x_mid = x + 0.5 * h * v
            v = guided_velocity(field_fn, x_mid, t + 0.5 * h, y, config.cfg_strength)
        x = x + h * v
        if return_trajectory:
            trajectory.append(FlowState(x, (k + 1) * h))
    return (x, trajectory) if return_trajectory else x
