import numpy as np
import pytest
import torch
from hypothesis import settings

from flowrestore.backbone import ModelConfig, init_model
from flowrestore.dsp import MelConfig, Waveform
from flowrestore.speech import synth_speech

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

SR = 16000


@pytest.fixture
def mel_cfg():
    return MelConfig()


@pytest.fixture(scope="session")
def speech():
    return synth_speech(1.0, SR, seed=0)


def tone(freq_hz, n=SR, amp=0.5, sr=SR):
    return Waveform(amp * np.sin(2 * np.pi * freq_hz * np.arange(n) / sr), sr)


def perturbed_model(config=None, seed=0, dtype=torch.float32, scale=0.1):
    """Model with every parameter jittered so the output is non-zero."""
    model = init_model(config or ModelConfig.tiny(n_mels=8), seed, dtype=dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype))
    return model


def gradient_check(seed=0, probes=5, h=1e-5, frames=12):
    """Largest relative error, per named parameter, between autograd and
    central differences of the masked flow loss along random directions."""
    from flowrestore.cfm import cfm_loss

    cfg = ModelConfig.tiny(n_mels=80)
    model = perturbed_model(cfg, seed=seed, dtype=torch.float64, scale=0.05)
    gen = torch.Generator().manual_seed(seed + 7)
    x = torch.randn(2, frames, 80, generator=gen, dtype=torch.float64) - 4
    y = torch.randn(2, frames, 80, generator=gen, dtype=torch.float64) - 4
    t = torch.tensor([0.3, 0.8], dtype=torch.float64)
    mask = torch.ones(2, frames, dtype=torch.bool)
    mask[1, frames - 3 :] = False

    def loss():
        x_t = (1 - t[:, None, None]) * y + t[:, None, None] * x
        return cfm_loss(model(x_t, y, t, mask), x, y, t, mask)

    model.zero_grad()
    loss().backward()
    errors = {}
    for name, p in model.named_parameters():
        worst = 0.0
        for _ in range(probes):
            d = torch.randn(p.shape, generator=gen, dtype=torch.float64)
            d /= d.norm()
            analytic = float((p.grad * d).sum())
            with torch.no_grad():
                p.add_(h * d)
                up = float(loss())
                p.sub_(2 * h * d)
                down = float(loss())
                p.add_(h * d)
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / scale)
        errors[name] = worst
    return errors


@pytest.fixture(scope="session")
def desk_run():
    """Default desk-scale training run (2000 steps), shared across modules."""
    import time

    from flowrestore.train import Trainer, TrainingConfig

    config = TrainingConfig()
    trainer = Trainer(ModelConfig(), config)
    start = time.time()
    losses = trainer.run()
    return trainer, losses, time.time() - start


@pytest.fixture(scope="session")
def desk_model(desk_run):
    trainer = desk_run[0]
    return trainer.model, trainer.config
