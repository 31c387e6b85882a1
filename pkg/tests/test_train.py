import dataclasses
import io
import json

import numpy as np
import pytest
import torch

from flowrestore import cfm
from flowrestore.backbone import ModelConfig, init_model
from flowrestore.degrade import RandomDegradationPolicy
from flowrestore.dsp import MelConfig
from flowrestore.evalkit import log_spectral_distance
from flowrestore.speech import synth_speech
from flowrestore.train import (
    CheckpointError,
    CheckpointVersionError,
    NonFiniteLossError,
    PairStream,
    Trainer,
    TrainingConfig,
    TrainingPair,
    batch_loss,
    collate,
    load_checkpoint,
    lr_at,
    make_optimizer,
    make_training_pair,
    save_checkpoint,
    train_step,
)

SMALL_MEL = MelConfig(n_fft=256, hop=128, n_mels=16)
SMALL_MODEL = ModelConfig(dim=16, depth=2, heads=2, head_dim=8, n_mels=16, max_frames=64)


def small_config(**kw):
    base = dict(mel=SMALL_MEL, max_frames=64, batch_size=2, warmup_steps=2, corpus_size=4, min_duration_s=0.3, max_duration_s=0.5)
    base.update(kw)
    return TrainingConfig(**base)


def _pair(T, F=16, seed=0):
    rng = np.random.default_rng(seed)
    return TrainingPair(rng.normal(-4, 1, (T, F)), rng.normal(-4, 1, (T, F)), "{}")


# -- pairs and batching ------------------------------------------------------

def test_empty_policy_pair_is_identity(speech):
    pair = make_training_pair(speech, RandomDegradationPolicy.none(), MelConfig(), seed=0)
    np.testing.assert_array_equal(pair.x, pair.y)


def test_pair_reproducible_and_logged(speech):
    policy = RandomDegradationPolicy()
    a = make_training_pair(speech, policy, MelConfig(), seed=9, max_frames=20)
    b = make_training_pair(speech, policy, MelConfig(), seed=9, max_frames=20)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.chain_log == b.chain_log
    assert a.x.shape == (20, 80)
    record = json.loads(a.chain_log)
    assert {"masks", "offset"} <= set(record)


def test_crop_is_aligned(speech):
    full = make_training_pair(speech, RandomDegradationPolicy.none(), MelConfig(), seed=3)
    crop = make_training_pair(speech, RandomDegradationPolicy.none(), MelConfig(), seed=3, max_frames=10)
    off = json.loads(crop.chain_log)["offset"]
    np.testing.assert_array_equal(crop.x, full.x[off : off + 10])


def test_heavy_policy_distorts(speech):
    lsd = [
        log_spectral_distance(*(lambda p: (p.x, p.y))(make_training_pair(synth_speech(1.0, 16000, s), RandomDegradationPolicy.heavy(), MelConfig(), s)))
        for s in range(10)
    ]
    assert np.mean(lsd) > 0.5


def test_degenerate_clean_rejected():
    from flowrestore.dsp import Waveform

    with pytest.raises(ValueError):
        make_training_pair(Waveform(np.zeros(4000), 16000), RandomDegradationPolicy(), MelConfig(), 0)
    with pytest.raises(ValueError):
        make_training_pair(Waveform(np.ones(100), 16000), RandomDegradationPolicy(), MelConfig(), 0)


def test_collate_padding_and_masks():
    b = collate([_pair(10), _pair(20, seed=1)], 0.0, seed=0, pad_value=-11.5)
    assert b.x.shape == (2, 20, 16)
    assert b.mask.sum(dim=1).tolist() == [10, 20]
    assert torch.all(b.x[0, 10:] == -11.5)
    assert torch.all((b.t >= 0) & (b.t <= 1))
    single = collate([_pair(7)], 0.0, 0, -11.5)
    assert bool(single.mask.all())
    with pytest.raises(ValueError):
        collate([], 0.0, 0, 0.0)


def test_collate_condition_dropout():
    pairs = [_pair(5, seed=i) for i in range(16)]
    full = collate(pairs, 0.999999, 0, 0.0)
    assert bool(full.drop_cond.all())
    assert torch.count_nonzero(full.condition) == 0
    none = collate(pairs, 0.0, 0, 0.0)
    assert torch.equal(none.condition, none.y)


def test_stream_deterministic():
    cfg = small_config()
    a, b = PairStream(cfg).batch(3, 0), PairStream(cfg).batch(3, 0)
    assert torch.equal(a.x, b.x) and torch.equal(a.y, b.y) and torch.equal(a.t, b.t)
    c = PairStream(cfg).batch(4, 0)
    assert not torch.equal(a.t, c.t)


# -- optimization ------------------------------------------------------------

def test_warmup_schedule():
    cfg = TrainingConfig(learning_rate=3e-4, warmup_steps=1000)
    assert lr_at(500, cfg) == pytest.approx(1.5e-4)
    assert lr_at(1000, cfg) == pytest.approx(3e-4)
    assert lr_at(5000, cfg) == pytest.approx(3e-4)
    assert lr_at(1, dataclasses.replace(cfg, warmup_steps=0)) == 3e-4


def test_weight_decay_groups():
    model = init_model(SMALL_MODEL)
    opt = make_optimizer(model, TrainingConfig(weight_decay=0.1))
    decay, no_decay = opt.param_groups
    assert decay["weight_decay"] == 0.1 and no_decay["weight_decay"] == 0.0
    assert all(p.dim() >= 2 for p in decay["params"])
    assert all(p.dim() == 1 for p in no_decay["params"])


def test_zero_lr_leaves_parameters():
    cfg = small_config(learning_rate=0.0, weight_decay=0.0)
    trainer = Trainer(SMALL_MODEL, cfg)
    before = {k: v.clone() for k, v in trainer.model.state_dict().items()}
    loss = trainer.train_step()
    assert np.isfinite(loss) and loss > 0
    for k, v in trainer.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_first_loss_is_mean_square_target():
    cfg = small_config()
    trainer = Trainer(SMALL_MODEL, cfg)
    batch = trainer.stream.batch(1, 0)
    u = cfm.target_field(batch.x, batch.y, batch.t)
    per_item = [(u[i][batch.mask[i]] ** 2).mean() for i in range(len(u))]
    expected = float(torch.stack(per_item).mean())
    assert trainer.train_step() == pytest.approx(expected, abs=1e-6)


def _batch64(pairs, t, drop):
    b = collate(pairs, 0.0, 0, -11.5).to(torch.float64)
    return dataclasses.replace(b, t=torch.tensor(t, dtype=torch.float64), drop_cond=torch.tensor(drop))


def test_grad_accum_matches_large_batch():
    cfg = TrainingConfig(learning_rate=1e-3, warmup_steps=0)
    pairs = [_pair(12, seed=i) for i in range(4)]
    t, drop = [0.1, 0.4, 0.6, 0.9], [False, True, False, False]
    big = _batch64(pairs, t, drop)
    micro = [_batch64(pairs[:2], t[:2], drop[:2]), _batch64(pairs[2:], t[2:], drop[2:])]

    def update(batches, accum):
        model = init_model(SMALL_MODEL, seed=0, dtype=torch.float64)
        with torch.no_grad():
            model.out_proj.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(1))
        opt = make_optimizer(model, dataclasses.replace(cfg, grad_accum=accum))
        train_step(model, opt, batches, cfg, step=1)
        return torch.cat([p.detach().flatten() for p in model.parameters()])

    a, b = update([big], 1), update(micro, 2)
    assert float((a - b).abs().max()) <= 1e-6


def test_padding_does_not_leak_into_loss_or_grads():
    pair = _pair(9, seed=5)
    t = torch.tensor([0.35], dtype=torch.float64)
    model = init_model(SMALL_MODEL, seed=0, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=torch.Generator().manual_seed(p.numel()), dtype=torch.float64))

    def loss_and_grad(batch):
        model.zero_grad()
        loss = batch_loss(model, batch)
        loss.backward()
        return float(loss.detach()), torch.cat([p.grad.flatten() for p in model.parameters()])

    short = collate([pair], 0.0, 0, 0.0).to(torch.float64)
    short = dataclasses.replace(short, t=t)
    longer = dataclasses.replace(short, x=torch.cat([short.x, 50 + torch.zeros(1, 7, 16, dtype=torch.float64)], 1),
                                 y=torch.cat([short.y, -50 + torch.zeros(1, 7, 16, dtype=torch.float64)], 1),
                                 mask=torch.cat([short.mask, torch.zeros(1, 7, dtype=torch.bool)], 1))
    la, ga = loss_and_grad(short)
    lb, gb = loss_and_grad(longer)
    assert lb == pytest.approx(la, rel=1e-10)
    assert float((ga - gb).abs().max()) <= 1e-10


def test_non_finite_loss_reports_chain():
    model = init_model(SMALL_MODEL)
    batch = collate([_pair(5)], 0.0, 0, 0.0)
    batch = dataclasses.replace(batch, x=torch.full_like(batch.x, float("nan")), chain_log=['{"specs": []}'])
    with pytest.raises(NonFiniteLossError) as info:
        train_step(model, make_optimizer(model, TrainingConfig()), [batch], TrainingConfig(), 1)
    assert info.value.chain_log == ['{"specs": []}']


def test_training_reduces_loss_quickly():
    cfg = small_config(learning_rate=3e-3, warmup_steps=5)
    losses = Trainer(SMALL_MODEL, cfg).run(40)
    assert np.mean(losses[-10:]) < np.mean(losses[:5])


def test_runs_are_reproducible():
    cfg = small_config()
    assert Trainer(SMALL_MODEL, cfg).run(4) == Trainer(SMALL_MODEL, cfg).run(4)
    assert Trainer(SMALL_MODEL, cfg).run(4) != Trainer(SMALL_MODEL, dataclasses.replace(cfg, seed=1)).run(4)


def test_run_writes_step_log(tmp_path):
    buf = io.StringIO()
    Trainer(SMALL_MODEL, small_config(checkpoint_every=2)).run(3, log_file=buf, checkpoint_dir=tmp_path)
    records = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["step"] for r in records] == [1, 2, 3]
    assert set(records[0]) == {"step", "loss", "lr", "seed"}
    assert (tmp_path / "step0000002.ckpt").exists()


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    trainer = Trainer(SMALL_MODEL, small_config())
    trainer.run(2)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, trainer.checkpoint())
    back = load_checkpoint(path)
    assert back.step == 2
    assert back.model_config == SMALL_MODEL
    assert back.training_config == trainer.config
    for k, v in trainer.model.state_dict().items():
        assert np.array_equal(back.parameters[k], v.numpy()), k
    ckpt = trainer.checkpoint()
    for k, v in ckpt.optimizer_state.items():
        assert back.optimizer_state[k].shape == v.shape, k
        assert np.array_equal(back.optimizer_state[k], v), k
    rebuilt = back.build_model()
    for (k, v), (_, w) in zip(trainer.model.state_dict().items(), rebuilt.state_dict().items()):
        assert torch.equal(v, w), k


def test_truncated_and_corrupt_checkpoints(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, Trainer(SMALL_MODEL, small_config()).checkpoint())
    raw = path.read_bytes()
    for cut in (5, 20, len(raw) - 4):
        (tmp_path / "cut.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_version_mismatch_rejected(tmp_path):
    ckpt = Trainer(SMALL_MODEL, small_config()).checkpoint()
    ckpt = dataclasses.replace(ckpt, format_version=99)
    save_checkpoint(tmp_path / "v.ckpt", ckpt)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.ckpt")


def test_resume_matches_uninterrupted(tmp_path):
    cfg = small_config()
    straight = Trainer(SMALL_MODEL, cfg).run(5)
    first = Trainer(SMALL_MODEL, cfg)
    head = first.run(3)
    save_checkpoint(tmp_path / "r.ckpt", first.checkpoint())
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "r.ckpt"))
    assert head + resumed.run(2) == straight


def test_config_dict_roundtrip():
    cfg = small_config(policy=RandomDegradationPolicy.heavy())
    assert TrainingConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainingConfig(cond_dropout_p=1.0)
    with pytest.raises(ValueError):
        TrainingConfig(schedule="bogus")
