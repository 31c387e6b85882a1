import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import SR
from flowrestore.degrade import add_noise_at_snr, synth_noise
from flowrestore.dsp import MelConfig, MelSpectrogram, Waveform
from flowrestore.evalkit import (
    SNR_CAP_DB,
    evaluate_set,
    format_report,
    log_spectral_distance,
    stoi,
    third_octave_bands,
    waveform_snr,
)

pystoi = pytest.importorskip("pystoi")


def test_lsd_closed_forms():
    a = np.zeros((5, 4))
    assert log_spectral_distance(a, a) == 0.0
    assert log_spectral_distance(a, a + 2.0) == pytest.approx(2.0)
    cfg = MelConfig(n_mels=4)
    assert log_spectral_distance(MelSpectrogram(a, cfg), MelSpectrogram(a + 1, cfg)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        log_spectral_distance(a, np.zeros((5, 3)))


@given(st.integers(0, 1000))
def test_lsd_symmetric_and_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.standard_normal((6, 5)) for _ in range(3))
    assert log_spectral_distance(a, b) == pytest.approx(log_spectral_distance(b, a))
    assert log_spectral_distance(a, c) <= log_spectral_distance(a, b) + log_spectral_distance(b, c) + 1e-12


def test_snr_closed_forms(speech):
    assert waveform_snr(speech, speech) == SNR_CAP_DB
    half = Waveform(0.5 * speech.samples, SR)
    assert waveform_snr(speech, half) == pytest.approx(20 * np.log10(2.0))
    with pytest.raises(ValueError):
        waveform_snr(Waveform(np.zeros(10), SR), Waveform(np.ones(10), SR))
    with pytest.raises(ValueError):
        waveform_snr(speech, Waveform(speech.samples[:-1], SR))


def test_third_octave_bands_shape():
    obm, centers = third_octave_bands()
    assert obm.shape == (15, 257)
    assert centers[0] == pytest.approx(150.0)
    assert np.all(obm.sum(axis=1) > 0)


def test_stoi_self_and_gain_invariance(speech):
    assert stoi(speech, speech) >= 0.99
    assert stoi(speech, Waveform(3.0 * speech.samples, SR)) == pytest.approx(stoi(speech, speech), abs=1e-9)


def _noisy(speech, snr, seed=0):
    return add_noise_at_snr(speech, synth_noise("white", len(speech), SR, seed), snr)


def test_stoi_decreases_with_noise(speech):
    scores = [stoi(speech, _noisy(speech, snr)) for snr in (20, 10, 0, -10)]
    assert all(a - b > 0.02 for a, b in zip(scores, scores[1:])), scores


@pytest.mark.parametrize("snr", [20, 5, -5])
def test_stoi_matches_reference_implementation(speech, snr):
    noisy = _noisy(speech, snr, seed=snr + 50)
    ours = stoi(speech, noisy)
    ref = pystoi.stoi(speech.samples, noisy.samples, SR, extended=False)
    assert ours == pytest.approx(ref, abs=2e-3)


def test_stoi_errors(speech):
    with pytest.raises(ValueError):
        stoi(speech, Waveform(speech.samples[:-5], SR))
    short = Waveform(speech.samples[:2000], SR)
    with pytest.raises(ValueError):
        stoi(short, short)


def _triples(speech, n=2):
    out = []
    for i in range(n):
        degraded = _noisy(speech, 0.0, seed=i)
        restored = _noisy(speech, 15.0, seed=i + 10)
        out.append((speech, degraded, restored))
    return out


def test_evaluate_set_signs(speech):
    report = evaluate_set(_triples(speech))
    assert report["count"] == 2
    for item in report["items"]:
        assert item["delta"]["lsd"] > 0
        assert item["delta"]["snr_db"] == pytest.approx(15.0, abs=1e-6)
        assert item["delta"]["stoi"] > 0
    assert report["summary"]["delta"]["snr_db"] == pytest.approx(15.0, abs=1e-6)


def test_identical_inputs_give_zero_deltas(speech):
    report = evaluate_set([(speech, speech, speech)])
    assert report["summary"]["delta"] == {"lsd": 0.0, "snr_db": 0.0, "stoi": 0.0}


def test_report_is_byte_stable(speech):
    a = format_report(evaluate_set(_triples(speech), names=["a", "b"]))
    b = format_report(evaluate_set(_triples(speech), names=["a", "b"]))
    assert a == b
    lines = [json.loads(line) for line in a.splitlines()]
    assert [r["type"] for r in lines] == ["item", "item", "summary"]
    assert lines[0]["name"] == "a"


def test_evaluate_set_errors(speech):
    with pytest.raises(ValueError):
        evaluate_set([])
    with pytest.raises(ValueError):
        evaluate_set([(speech, speech, Waveform(speech.samples[:-1], SR))])
