"""Command-line interface.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 config, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import ModelConfig
from .cfm import SamplerConfig, get_schedule
from .degrade import DegradationChain, RandomDegradationPolicy, apply_chain, sample_chain
from .dsp import AudioError, MelConfig, Waveform, load_wav, mel_spectrogram, resample_wave, save_wav
from .evalkit import evaluate_set, format_report
from .train import CheckpointError, NonFiniteLossError, Trainer, TrainingConfig, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("flowrestore")


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Config files: INI sections [mel], [model], [train], [policy], [restore]

@dataclasses.dataclass
class RestoreDefaults:
    steps: int = 16
    cfg_strength: float = 0.5
    window: int = 128
    overlap: int = 32
    gl_iterations: int = 32
    schedule: str = "linear"


SECTIONS = {
    "mel": MelConfig,
    "model": ModelConfig,
    "train": TrainingConfig,
    "policy": RandomDegradationPolicy,
    "restore": RestoreDefaults,
}
NESTED = {"policy", "mel"}  # TrainingConfig fields filled from their own sections


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if default and isinstance(default[0], str):
            return tuple(parts)
        cast = int if default and all(isinstance(v, int) for v in default) else float
        return tuple(cast(p) for p in parts)
    return raw


def _section_kwargs(parser: configparser.ConfigParser, section: str, cls) -> dict:
    if not parser.has_section(section):
        return {}
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)} - (NESTED if cls is TrainingConfig else set())
    out = {}
    for key, raw in parser.items(section):
        if key not in names:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        try:
            out[key] = _parse_value(raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for '{section}.{key}': {exc}") from exc
    return out


def load_config(path=None) -> dict:
    """Parse an INI config file into the dataclass configs it describes."""
    parser = configparser.ConfigParser()
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section '[{section}]'")
    try:
        mel = MelConfig(**_section_kwargs(parser, "mel", MelConfig))
        policy = RandomDegradationPolicy(**_section_kwargs(parser, "policy", RandomDegradationPolicy))
        model_kw = {"n_mels": mel.n_mels, **_section_kwargs(parser, "model", ModelConfig)}
        model = ModelConfig(**model_kw)
        train = TrainingConfig(**_section_kwargs(parser, "train", TrainingConfig), policy=policy, mel=mel)
        restore = RestoreDefaults(**_section_kwargs(parser, "restore", RestoreDefaults))
        get_schedule(restore.schedule)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if model.n_mels != mel.n_mels:
        raise ConfigError(f"model.n_mels={model.n_mels} disagrees with mel.n_mels={mel.n_mels}")
    return {"mel": mel, "model": model, "train": train, "policy": policy, "restore": restore}


def format_config(cfg: dict) -> str:
    lines = []
    for section in SECTIONS:
        obj = cfg[section]
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            if section == "train" and f.name in NESTED:
                continue
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Subcommands

def cmd_degrade(args) -> int:
    wave = load_wav(args.input)
    if args.replay:
        try:
            with open(args.replay) as fh:
                chain = DegradationChain.from_json(fh.readline())
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad chain log {args.replay}: {exc}") from exc
    else:
        chain = sample_chain(load_config(args.policy)["policy"], args.seed)
    out = apply_chain(wave, chain)
    save_wav(out, args.output)
    if args.chain_log:
        with open(args.chain_log, "w") as fh:
            fh.write(chain.to_json() + "\n")
    print(chain.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        trainer = Trainer.from_checkpoint(ckpt)
        if args.config:
            log.warning("--config ignored when resuming; configuration comes from the checkpoint")
    else:
        cfg = load_config(args.config)
        trainer = Trainer(cfg["model"], cfg["train"])
    if args.steps is not None:
        trainer.config = dataclasses.replace(trainer.config, total_steps=args.steps)
        trainer.stream.config = trainer.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    with open(out / "train_log.jsonl", "a") as fh:
        losses = trainer.run(log_file=fh, checkpoint_dir=str(out))
    final = out / "final.ckpt"
    save_checkpoint(final, trainer.checkpoint())
    if losses:
        print(f"trained {len(losses)} steps to step {trainer.step} in {time.time() - t0:.1f}s; "
              f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; checkpoint {final}")
    else:
        print(f"nothing to do: already at step {trainer.step}; checkpoint {final}")
    return EXIT_OK


def cmd_restore(args) -> int:
    from .restore import restore_waveform

    ckpt = load_checkpoint(args.ckpt)
    mel_cfg = ckpt.training_config.mel
    wave = load_wav(args.input)
    if wave.sample_rate_hz != mel_cfg.sample_rate_hz:
        if not args.resample:
            raise UsageError(
                f"input is {wave.sample_rate_hz} Hz but the checkpoint expects {mel_cfg.sample_rate_hz} Hz "
                "(pass --resample to convert)"
            )
        wave = resample_wave(wave, mel_cfg.sample_rate_hz)
    window = args.window or min(128, ckpt.model_config.max_frames)
    if window > ckpt.model_config.max_frames:
        raise UsageError(f"--window {window} exceeds the model's max_frames {ckpt.model_config.max_frames}")
    overlap = args.overlap if args.overlap is not None else window // 4
    if not 0 <= overlap < window:
        raise UsageError(f"--overlap must lie in [0, {window})")
    sampler = SamplerConfig(steps=args.steps, cfg_strength=args.cfg, schedule=get_schedule(ckpt.training_config.schedule))
    t0 = time.time()
    out, _, n_chunks = restore_waveform(wave, ckpt, sampler, window, overlap, args.gl_iterations, args.seed)
    save_wav(out, args.output)
    print(f"restored {wave.duration_s:.2f}s in {time.time() - t0:.2f}s using {n_chunks} chunk(s) "
          f"(steps={args.steps}, cfg={args.cfg})")
    return EXIT_OK


def _wav_names(directory) -> set:
    d = Path(directory)
    if not d.is_dir():
        raise AudioError(f"not a directory: {directory}")
    return {p.name for p in d.glob("*.wav")}


def cmd_eval(args) -> int:
    dirs = {"clean": args.clean, "degraded": args.degraded, "restored": args.restored}
    names = {k: _wav_names(v) for k, v in dirs.items()}
    common = names["clean"] & names["degraded"] & names["restored"]
    unpaired = sorted((names["clean"] | names["degraded"] | names["restored"]) - common)
    if unpaired:
        raise AudioError(f"unpaired files: {', '.join(unpaired)}")
    if not common:
        raise AudioError("no .wav files to evaluate")
    mel_cfg = load_config(args.config)["mel"]
    triples = []
    order = sorted(common)
    for name in order:
        waves = [load_wav(Path(dirs[k]) / name) for k in ("clean", "degraded", "restored")]
        n = min(len(w) for w in waves)
        waves = [resample_wave(Waveform(w.samples[:n], w.sample_rate_hz), mel_cfg.sample_rate_hz) for w in waves]
        triples.append(tuple(waves))
    report = format_report(evaluate_set(triples, mel_cfg, order))
    with open(args.report, "w") as fh:
        fh.write(report)
    print(report.splitlines()[-1])
    return EXIT_OK


def spectrogram_image(frames: np.ndarray, log_min: float) -> np.ndarray:
    """Map log-mel values linearly onto 0..255; rows are mel bins, highest bin on top."""
    top = float(frames.max())
    if top <= log_min:
        pixels = np.zeros(frames.shape)
    else:
        pixels = (frames - log_min) / (top - log_min) * 255.0
    return np.clip(np.round(pixels), 0, 255).astype(np.uint8).T[::-1]


def write_pgm(path, image: np.ndarray) -> None:
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def cmd_spectrogram(args) -> int:
    mel_cfg = load_config(args.config)["mel"]
    wave = load_wav(args.input)
    if wave.sample_rate_hz != mel_cfg.sample_rate_hz:
        wave = resample_wave(wave, mel_cfg.sample_rate_hz)
    mel = mel_spectrogram(wave, mel_cfg)
    write_pgm(args.output, spectrogram_image(mel.frames, mel_cfg.log_min))
    print(f"wrote {mel.num_frames}x{mel_cfg.n_mels} image to {args.output}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowrestore", description="Speech restoration with conditional flow matching.")
    p.add_argument("--show-config", nargs="?", const="", metavar="CONFIG",
                   help="print the effective configuration (defaults, or CONFIG merged over them) and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("degrade", help="apply a random (or replayed) degradation chain to a WAV file")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--policy", help="config file whose [policy] section defines the random policy")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--chain-log", help="write the serialized chain here")
    d.add_argument("--replay", help="apply the chain stored in this log instead of sampling one")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train a model on synthetic speech")
    t.add_argument("--config", help="INI config with [mel] [model] [train] [policy] sections")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--out", required=True, help="output directory for checkpoints and train_log.jsonl")
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore a WAV file with a trained checkpoint")
    r.add_argument("input")
    r.add_argument("output")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--steps", type=_positive_int, default=16, help="ODE steps (default 16)")
    r.add_argument("--cfg", type=_non_negative_float, default=0.5, help="guidance strength (default 0.5)")
    r.add_argument("--window", type=_positive_int, help="chunk length in frames (default min(128, max_frames))")
    r.add_argument("--overlap", type=int, help="chunk overlap in frames (default window/4)")
    r.add_argument("--gl-iterations", type=int, default=32)
    r.add_argument("--seed", type=int, default=0, help="Griffin-Lim phase seed")
    r.add_argument("--resample", action="store_true", help="resample input to the model rate")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="score restored audio against clean and degraded references")
    e.add_argument("--clean", required=True)
    e.add_argument("--degraded", required=True)
    e.add_argument("--restored", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="config file with a [mel] section")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("spectrogram", help="write a log-mel spectrogram as a PGM image")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--config", help="config file with a [mel] section")
    s.set_defaults(func=cmd_spectrogram)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.show_config is not None:
            print(format_config(load_config(args.show_config or None)))
            return EXIT_OK
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AudioError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
