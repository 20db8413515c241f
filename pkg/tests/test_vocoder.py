import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnnsvs.corpus import phoneme_template
from cnnsvs.vocoder import (
    PADE_RANGE,
    AcousticLayout,
    AcousticSequence,
    MLSAConfig,
    apply_vibrato,
    make_excitation,
    mc2b,
    mlsa_synthesize,
    read_wav,
    stage_magnitudes,
    synthesize,
    write_wav,
)

from oracles import warped_spectrum_db


def impulse_response_db(mcep, config, n=4096):
    frames = n // config.hop
    x = np.zeros(frames * config.hop)
    x[0] = 1.0
    y = mlsa_synthesize(np.tile(mcep, (frames, 1)), x, config)
    spec = np.fft.rfft(y)
    freqs = np.fft.rfftfreq(len(y), 1.0 / config.sample_rate)
    return freqs, 20 * np.log10(np.abs(spec))


def max_band_error(mcep, config):
    freqs, got = impulse_response_db(mcep, config)
    band = (freqs >= 100) & (freqs <= 6000)
    want = warped_spectrum_db(mcep, config.alpha, freqs[band], config.sample_rate)
    return np.max(np.abs(got[band] - want))


def test_layout():
    lay = AcousticLayout(4, 2)
    assert lay.dim == 11
    assert lay.names[4:6] == ("lf0", "vuv")
    assert lay.flag_channels == (5, 10)
    assert AcousticLayout.from_names(lay.names) == lay
    with pytest.raises(ValueError):
        AcousticLayout.from_names(("lf0",))
    with pytest.raises(ValueError):
        AcousticSequence(np.zeros((3, 5)), lay)


def test_zero_cepstrum_is_identity():
    cfg = MLSAConfig()
    x = np.random.default_rng(0).standard_normal(10 * cfg.hop)
    assert np.array_equal(mlsa_synthesize(np.zeros((10, 20)), x, cfg), x)


def test_c0_is_pure_gain():
    cfg = MLSAConfig()
    x = np.random.default_rng(1).standard_normal(5 * cfg.hop)
    mc = np.zeros((5, 8))
    mc[:, 0] = 0.7
    assert np.allclose(mlsa_synthesize(mc, x, cfg), math.exp(0.7) * x)


def test_mc2b_inverse_recursion():
    rng = np.random.default_rng(2)
    mc = rng.standard_normal(10)
    b = mc2b(mc, 0.42)
    rebuilt = b.copy()
    rebuilt[:-1] += 0.42 * b[1:]
    assert np.allclose(rebuilt, mc)


@pytest.mark.parametrize("symbol", ["a", "i", "k", "s", "sil"])
@pytest.mark.parametrize("rate", [16000, 48000])
def test_mlsa_matches_fft_oracle(symbol, rate):
    cfg = MLSAConfig.for_rate(rate)
    mc = phoneme_template(symbol, 20)
    f1, f2 = stage_magnitudes(mc, cfg.alpha)
    assert max(f1, f2) < PADE_RANGE[cfg.pade_order]
    assert max_band_error(mc, cfg) <= 0.5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mlsa_matches_fft_oracle_random(seed):
    rng = np.random.default_rng(seed)
    m = np.arange(1, 16)
    mc = np.concatenate([[rng.uniform(-2, 2)], rng.standard_normal(15) * 0.5 / m])
    cfg = MLSAConfig()
    assert max_band_error(mc, cfg) <= 0.5


def test_mlsa_input_errors():
    cfg = MLSAConfig()
    with pytest.raises(ValueError):
        mlsa_synthesize(np.zeros((2, 4)), np.zeros(10), cfg)
    with pytest.raises(ValueError):
        mlsa_synthesize(np.full((1, 4), np.nan), np.zeros(cfg.hop), cfg)
    with pytest.raises(ValueError):
        MLSAConfig(alpha=1.0)
    with pytest.raises(ValueError):
        MLSAConfig.for_rate(22050)


def test_excitation_frames_have_unit_power():
    T = 20
    f0 = np.full(T, 200.0)
    vuv = np.r_[np.zeros(5), np.ones(15)]
    ap = np.full((T, 5), 0.3)
    e = make_excitation(f0, vuv, ap, seed=3).reshape(T, -1)
    assert np.allclose(np.mean(e * e, axis=1), 1.0)
    e2 = make_excitation(f0, vuv, np.zeros(T), seed=3).reshape(T, -1)
    # a = 0: voiced frames are pure pulse trains with period 80 samples at 16 kHz
    assert np.count_nonzero(e2[5:]) == 15 and np.all(np.diff(np.flatnonzero(e2[5:].ravel())) == 80)
    with pytest.raises(ValueError):
        make_excitation(np.zeros(2), np.ones(2), np.zeros(2))


def test_excitation_is_seeded():
    args = (np.full(4, 150.0), np.ones(4), np.full(4, 0.5))
    assert np.array_equal(make_excitation(*args, seed=1), make_excitation(*args, seed=1))
    assert not np.array_equal(make_excitation(*args, seed=1), make_excitation(*args, seed=2))


def test_vibrato():
    T = 400
    lf0 = np.full(T, 5.0)
    flag = np.r_[np.zeros(100), np.ones(300)]
    out = apply_vibrato(lf0, np.full(T, 50.0), np.full(T, 5.0), flag)
    assert np.array_equal(out[:100], lf0[:100])
    assert out[100] == 5.0  # phase restarts at zero on the rising edge
    dev = (out - 5.0) * 1200 / math.log(2)
    assert np.max(dev) == pytest.approx(50.0, abs=0.1)
    # 5 Hz at 200 frames/s: one period every 40 frames
    assert dev[110] == pytest.approx(50.0, abs=1e-9)
    assert dev[120] == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        apply_vibrato(lf0, lf0[:3], lf0, flag)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(4).uniform(-0.9, 0.9, 1600)
    p = tmp_path / "a.wav"
    write_wav(x, 16000, p)
    y, sr = read_wav(p)
    assert sr == 16000 and y.shape == x.shape
    assert np.max(np.abs(y - x)) * 32767 <= 1.0
    write_wav(y, 16000, tmp_path / "b.wav")
    assert (tmp_path / "b.wav").read_bytes() == p.read_bytes()


def test_wav_rescales_only_when_clipping(tmp_path):
    write_wav(np.array([0.0, 4.0, -2.0]), 48000, tmp_path / "c.wav")
    y, sr = read_wav(tmp_path / "c.wav")
    assert sr == 48000
    assert np.max(np.abs(y)) == pytest.approx(10 ** (-1 / 20), abs=1e-4)
    with pytest.raises(ValueError):
        write_wav(np.array([np.inf]), 16000, tmp_path / "d.wav")


def test_synthesize_smoke():
    lay = AcousticLayout(10, 3)
    T = 40
    v = np.zeros((T, lay.dim))
    v[:, lay.index("lf0")] = math.log(220.0)
    v[:, lay.index("vuv")] = 1
    v[:, lay.index("vib_freq")] = 5.5
    y = synthesize(AcousticSequence(v, lay))
    assert y.shape == (T * 80,) and np.all(np.isfinite(y))
    assert np.allclose(np.mean(y.reshape(T, -1) ** 2, axis=1), 1.0)
