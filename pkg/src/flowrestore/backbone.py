"""Transformer vector field ``v(x_t, t, y)`` over mel frames."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    head_dim: int = 16
    n_mels: int = 80
    max_frames: int = 256
    cond_dropout_p: float = 0.15
    ff_mult: int = 4
    # fixed affine normalization of log-mel inputs; outputs are rescaled back
    feature_shift: float = -4.0
    feature_scale: float = 4.0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2 (the long skip needs a first and a last block)")
        for name in ("dim", "heads", "head_dim", "n_mels", "max_frames", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1)")
        if self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def tiny(cls, n_mels: int = 80) -> "ModelConfig":
        return cls(dim=64, depth=2, heads=4, head_dim=16, n_mels=n_mels)

    @classmethod
    def full_scale(cls, n_mels: int = 80) -> "ModelConfig":
        return cls(dim=768, depth=20, heads=16, head_dim=64, n_mels=n_mels, max_frames=2000)


def sinusoidal_features(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved ``(sin, cos)`` features at geometrically spaced frequencies.

    ``positions`` has shape ``(N,)``; the result has shape ``(N, dim)`` with
    ``out[:, 2i] = sin(p * w_i)`` and ``out[:, 2i + 1] = cos(p * w_i)``.
    """
    half = (dim + 1) // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(positions.shape[0], 2 * half)
    return out[:, :dim]


def raw_time_features(t, dim: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    return sinusoidal_features(1000.0 * t, dim)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t) -> torch.Tensor:
        feats = raw_time_features(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(feats)))


class Block(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.attn_dim)
        self.proj = nn.Linear(cfg.attn_dim, cfg.dim)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ff1 = nn.Linear(cfg.dim, cfg.ff_mult * cfg.dim)
        self.ff2 = nn.Linear(cfg.ff_mult * cfg.dim, cfg.dim)

    def attention(self, h: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        B, T, _ = h.shape
        q, k, v = self.qkv(h).view(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, T, -1))

    def forward(self, h: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        h = h + self.attention(self.norm1(h), key_mask)
        return h + self.ff2(F.gelu(self.ff1(self.norm2(h))))


class VectorFieldTransformer(nn.Module):
    """Conditional vector field on ``(T, n_mels)`` log-mel frames.

    ``x_t`` and the condition ``y`` are concatenated on the feature axis and
    projected to the model width; a missing condition is an all-zeros slot.
    The first block's output is added to the input of the last block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.in_proj = nn.Linear(2 * cfg.n_mels, cfg.dim)
        self.time_embed = TimeEmbedding(cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        self.out_proj = nn.Linear(cfg.dim, cfg.n_mels)
        self.register_buffer(
            "pos_enc",
            sinusoidal_features(torch.arange(cfg.max_frames), cfg.dim).to(torch.float32),
            persistent=False,
        )
        self.use_long_skip = True

    def forward(self, x_t, y=None, t=0.0, mask=None) -> torch.Tensor:
        squeeze = x_t.dim() == 2
        if squeeze:
            x_t = x_t[None]
            y = None if y is None else y[None]
            mask = None if mask is None else mask[None]
        B, T, n_mels = x_t.shape
        cfg = self.config
        if T > cfg.max_frames:
            raise ValueError(f"{T} frames exceeds max_frames={cfg.max_frames}")
        if n_mels != cfg.n_mels:
            raise ValueError(f"expected {cfg.n_mels} mel bins, got {n_mels}")
        if y is not None and tuple(y.shape) != tuple(x_t.shape):
            raise ValueError(f"condition shape {tuple(y.shape)} != input shape {tuple(x_t.shape)}")
        if mask is None:
            mask = torch.ones(B, T, dtype=torch.bool, device=x_t.device)
        elif tuple(mask.shape) != (B, T):
            raise ValueError(f"mask shape {tuple(mask.shape)} != {(B, T)}")
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        if float(t.min()) < 0.0 or float(t.max()) > 1.0:
            raise ValueError("t must lie in [0, 1]")
        if t.numel() == 1:
            t = t.expand(B)

        x_in = (x_t - cfg.feature_shift) / cfg.feature_scale
        y_in = torch.zeros_like(x_in) if y is None else (y - cfg.feature_shift) / cfg.feature_scale
        h = self.in_proj(torch.cat([x_in, y_in], dim=-1))
        h = h + self.pos_enc[:T].to(h.dtype)[None]
        h = h + self.time_embed(t)[:, None, :]

        first = None
        for i, block in enumerate(self.blocks):
            if i == len(self.blocks) - 1 and self.use_long_skip:
                h = h + first
            h = block(h, mask)
            if i == 0:
                first = h
        out = self.out_proj(self.norm(h)) * cfg.feature_scale
        return out[0] if squeeze else out


def init_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> VectorFieldTransformer:
    """Build a model with seeded initialization and a zero output projection.

    Linear weights and biases are drawn uniformly from ``+-1/sqrt(fan_in)``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    model = VectorFieldTransformer(config)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.copy_(torch.empty_like(module.weight).uniform_(-bound, bound, generator=gen))
                module.bias.copy_(torch.empty_like(module.bias).uniform_(-bound, bound, generator=gen))
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        model.out_proj.weight.zero_()
        model.out_proj.bias.zero_()
    return model.to(dtype)


def count_params(config: ModelConfig) -> int:
    d, a, f, m = config.dim, config.attn_dim, config.n_mels, config.ff_mult * config.dim
    linear = lambda fan_in, fan_out: fan_in * fan_out + fan_out  # noqa: E731
    block = 2 * (2 * d) + linear(d, 3 * a) + linear(a, d) + linear(d, m) + linear(m, d)
    return linear(2 * f, d) + 2 * linear(d, d) + config.depth * block + 2 * d + linear(d, f)


def enumerate_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_field(model: VectorFieldTransformer, mask=None):
    """Wrap ``model`` as a ``field_fn(x_t, t, cond)`` for :func:`flowrestore.cfm.sample_ode`."""

    def field_fn(x_t, t, cond):
        with torch.no_grad():
            return model(x_t, cond, t, mask)

    return field_fn
