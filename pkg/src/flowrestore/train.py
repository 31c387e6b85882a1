"""Self-supervised training: on-the-fly degradation, masked batching, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import cfm
from .backbone import ModelConfig, VectorFieldTransformer, init_model
from .degrade import RandomDegradationPolicy, apply_chain, sample_chain, sample_mask_params, tf_mask
from .dsp import MelConfig, Waveform, mel_spectrogram
from .speech import ToySpeechSource

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"FLOWCKPT"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, chain_log: list):
        super().__init__(f"{message}; chains: {chain_log}")
        self.chain_log = chain_log


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainingConfig:
    learning_rate: float = 3e-4
    warmup_steps: int = 1000
    grad_accum: int = 1
    max_frames: int = 256
    batch_size: int = 8
    total_steps: int = 2000
    cond_dropout_p: float = 0.15
    weight_decay: float = 0.01
    seed: int = 0
    schedule: str = "linear"
    corpus_size: int = 0
    min_duration_s: float = 0.8
    max_duration_s: float = 1.2
    checkpoint_every: int = 500
    policy: RandomDegradationPolicy = field(default_factory=RandomDegradationPolicy)
    mel: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = RandomDegradationPolicy(**self.policy)
        if isinstance(self.mel, dict):
            self.mel = MelConfig(**self.mel)
        for name in ("grad_accum", "max_frames", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("learning_rate, weight_decay, warmup_steps and total_steps must be non-negative")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1)")
        cfm.get_schedule(self.schedule)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "policy" in d and isinstance(d["policy"], dict):
            d["policy"] = RandomDegradationPolicy(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["policy"].items()})
        return cls(**d)


# --------------------------------------------------------------------------
# Data

@dataclass
class TrainingPair:
    x: np.ndarray  # clean log-mel, (T, F)
    y: np.ndarray  # degraded log-mel, (T, F)
    chain_log: str


def make_training_pair(
    clean: Waveform,
    policy: RandomDegradationPolicy,
    mel_cfg: MelConfig,
    seed: int,
    max_frames: int = 2000,
    tf_mask_cfg: dict | None = None,
) -> TrainingPair:
    """Degrade ``clean`` with a seeded random chain and return aligned spectrograms.

    Both spectrograms are cropped to ``max_frames`` at the same seeded offset.
    """
    if len(clean) < mel_cfg.n_fft:
        raise ValueError(f"clean audio shorter than one analysis window ({len(clean)} samples)")
    if clean.rms() == 0.0:
        raise ValueError("clean audio is silent")
    chain = sample_chain(policy, seed)
    x = mel_spectrogram(clean, mel_cfg)
    y = mel_spectrogram(apply_chain(clean, chain), mel_cfg)
    masks = tf_mask_cfg if tf_mask_cfg is not None else sample_mask_params(policy, seed)
    if masks.get("num_time_masks", 0) or masks.get("num_freq_masks", 0):
        y = tf_mask(y, **masks)
    T = x.num_frames
    offset = 0
    if T > max_frames:
        offset = int(np.random.default_rng(np.random.SeedSequence([seed, 3])).integers(0, T - max_frames + 1))
    sl = slice(offset, offset + max_frames)
    record = json.loads(chain.to_json())
    record["masks"] = masks
    record["offset"] = offset
    return TrainingPair(x.frames[sl].copy(), y.frames[sl].copy(), json.dumps(record, sort_keys=True))


@dataclass
class Batch:
    x: torch.Tensor  # (B, T, F)
    y: torch.Tensor  # (B, T, F)
    t: torch.Tensor  # (B,)
    mask: torch.Tensor  # (B, T) bool
    drop_cond: torch.Tensor  # (B,) bool; True means the condition slot is nulled
    chain_log: list

    @property
    def condition(self) -> torch.Tensor:
        return torch.where(self.drop_cond[:, None, None], torch.zeros_like(self.y), self.y)

    def to(self, dtype) -> "Batch":
        return dataclasses.replace(self, x=self.x.to(dtype), y=self.y.to(dtype), t=self.t.to(dtype))


def collate(pairs: list, cond_dropout_p: float, seed: int, pad_value: float) -> Batch:
    """Pad to the longest item with ``pad_value``; draw ``t`` and condition dropout per item."""
    if not pairs:
        raise ValueError("cannot collate an empty list")
    T = max(p.x.shape[0] for p in pairs)
    F = pairs[0].x.shape[1]
    x = np.full((len(pairs), T, F), pad_value, dtype=np.float32)
    y = np.full((len(pairs), T, F), pad_value, dtype=np.float32)
    mask = np.zeros((len(pairs), T), dtype=bool)
    for i, p in enumerate(pairs):
        n = p.x.shape[0]
        x[i, :n], y[i, :n], mask[i, :n] = p.x, p.y, True
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    t = rng.random(len(pairs))
    drop = rng.random(len(pairs)) < cond_dropout_p
    return Batch(
        torch.from_numpy(x),
        torch.from_numpy(y),
        torch.from_numpy(t.astype(np.float32)),
        torch.from_numpy(mask),
        torch.from_numpy(drop),
        [p.chain_log for p in pairs],
    )


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class PairStream:
    """Deterministic stream of training pairs keyed by ``(seed, step, micro, index)``.

    Clean utterances come from ``source`` (a callable ``seed -> Waveform``)
    drawn from a finite corpus of ``corpus_size`` seeds; each draw gets a
    fresh degradation. ``corpus_size == 0`` makes every clean item new.
    """

    def __init__(self, config: TrainingConfig, source=None):
        self.config = config
        self.source = source or ToySpeechSource(config.mel.sample_rate_hz, config.min_duration_s, config.max_duration_s)
        self._cache: dict[int, Waveform] = {}

    def clean(self, clean_seed: int) -> Waveform:
        if clean_seed not in self._cache:
            self._cache[clean_seed] = self.source(clean_seed)
        return self._cache[clean_seed]

    def pair(self, step: int, micro: int, index: int) -> TrainingPair:
        c = self.config
        item_seed = derive_seed(c.seed, step, micro, index)
        if c.corpus_size:
            clean = self.clean(item_seed % c.corpus_size)
        else:
            clean = self.source(item_seed)
        return make_training_pair(clean, c.policy, c.mel, item_seed, c.max_frames)

    def batch(self, step: int, micro: int) -> Batch:
        c = self.config
        pairs = [self.pair(step, micro, i) for i in range(c.batch_size)]
        return collate(pairs, c.cond_dropout_p, derive_seed(c.seed, step, micro, 2**20), c.mel.log_min)


# --------------------------------------------------------------------------
# Optimization

def lr_at(step: int, config: TrainingConfig) -> float:
    """Linear warmup to ``learning_rate`` then constant; ``step`` counts updates from 1."""
    if config.warmup_steps == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


def make_optimizer(model: torch.nn.Module, config: TrainingConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.learning_rate,
        betas=(0.9, 0.99),
        eps=1e-8,
    )


def batch_loss(model: VectorFieldTransformer, batch: Batch, schedule: cfm.FlowSchedule | None = None) -> torch.Tensor:
    schedule = schedule or cfm.linear_schedule()
    x_t = cfm.interpolate(batch.x, batch.y, batch.t, schedule)
    v = model(x_t, batch.condition, batch.t, batch.mask)
    return cfm.cfm_loss(v, batch.x, batch.y, batch.t, batch.mask, schedule)


def train_step(model, optimizer, micro_batches: list, config: TrainingConfig, step: int) -> float:
    """Accumulate gradients over ``micro_batches`` and apply one update.

    ``step`` is the 1-based index of this update and sets the warmup lr.
    Returns the mean micro-batch loss.
    """
    schedule = cfm.get_schedule(config.schedule)
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for mb in micro_batches:
        loss = batch_loss(model, mb, schedule)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss at step {step}", mb.chain_log)
        (loss / len(micro_batches)).backward()
        total += float(loss.detach())
    lr = lr_at(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return total / len(micro_batches)


class Trainer:
    def __init__(self, model_config: ModelConfig, config: TrainingConfig, source=None, model=None, optimizer=None, step: int = 0):
        self.model_config = model_config
        self.config = config
        self.model = model if model is not None else init_model(model_config, config.seed)
        self.optimizer = optimizer if optimizer is not None else make_optimizer(self.model, config)
        self.step = step
        self.stream = PairStream(config, source)

    def micro_batches(self, step: int) -> list:
        return [self.stream.batch(step, m) for m in range(self.config.grad_accum)]

    def train_step(self) -> float:
        step = self.step + 1
        loss = train_step(self.model, self.optimizer, self.micro_batches(step), self.config, step)
        self.step = step
        return loss

    def run(self, num_steps: int | None = None, log_file=None, checkpoint_dir=None) -> list:
        """Run ``num_steps`` updates (default: up to ``total_steps``) and return the losses."""
        if num_steps is None:
            num_steps = max(0, self.config.total_steps - self.step)
        losses = []
        for _ in range(num_steps):
            loss = self.train_step()
            losses.append(loss)
            record = {"step": self.step, "loss": loss, "lr": lr_at(self.step, self.config), "seed": self.config.seed}
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if self.step % 100 == 0:
                log.info("step %d loss %.5f", self.step, loss)
            if checkpoint_dir is not None and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"step{self.step:07d}.ckpt"), self.checkpoint())
        return losses

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint.from_training(self.model_config, self.config, self.step, self.model, self.optimizer)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", source=None) -> "Trainer":
        model = ckpt.build_model()
        optimizer = make_optimizer(model, ckpt.training_config)
        ckpt.restore_optimizer(model, optimizer)
        return cls(ckpt.model_config, ckpt.training_config, source, model, optimizer, ckpt.step)


# --------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    training_config: TrainingConfig
    step: int
    parameters: dict
    optimizer_state: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_training(cls, model_config, training_config, step, model, optimizer=None) -> "Checkpoint":
        params = {k: v.detach().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
        opt = {}
        if optimizer is not None:
            names = {id(p): n for n, p in model.named_parameters()}
            for p, state in optimizer.state.items():
                for key, value in state.items():
                    opt[f"{names[id(p)]}/{key}"] = torch.as_tensor(value).detach().to(torch.float32).numpy().copy()
        return cls(model_config, training_config, int(step), params, opt)

    def build_model(self) -> VectorFieldTransformer:
        model = VectorFieldTransformer(self.model_config)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.parameters.items()})
        return model

    def restore_optimizer(self, model, optimizer) -> None:
        by_name = dict(model.named_parameters())
        for key, value in self.optimizer_state.items():
            name, slot = key.rsplit("/", 1)
            tensor = torch.from_numpy(value.copy())
            optimizer.state[by_name[name]][slot] = tensor.reshape(()) if slot == "step" else tensor


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary container: magic, header length, JSON header, then float32 LE blobs."""
    tensors, blobs, offset = [], [], 0
    for group, named in (("param", ckpt.parameters), ("optim", ckpt.optimizer_state)):
        for name in sorted(named):
            arr = np.asarray(named[name], dtype="<f4")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes(order="C"))
            offset += arr.nbytes
    header = {
        "format_version": ckpt.format_version,
        "model_config": dataclasses.asdict(ckpt.model_config),
        "training_config": ckpt.training_config.to_dict(),
        "step": ckpt.step,
        "tensors": tensors,
        "data_bytes": offset,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    body = data[start + hlen :]
    if len(body) != header["data_bytes"] or sum(t["nbytes"] for t in header["tensors"]) != len(body):
        raise CheckpointError(f"{path}: tensor data length {len(body)} disagrees with manifest ({header['data_bytes']})")
    params, opt = {}, {}
    for t in header["tensors"]:
        count = math.prod(t["shape"])
        if count * 4 != t["nbytes"] or t["offset"] + t["nbytes"] > len(body):
            raise CheckpointError(f"{path}: manifest entry {t['name']} is inconsistent")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"]).astype(np.float32)
        (params if t["group"] == "param" else opt)[t["name"]] = arr
    return Checkpoint(
        ModelConfig(**header["model_config"]),
        TrainingConfig.from_dict(header["training_config"]),
        int(header["step"]),
        params,
        opt,
        header["format_version"],
    )
