import numpy as np
import pytest
import scipy.io.wavfile
from hypothesis import given, settings, strategies as st

from deep_mfmvdr.audio import (MixtureSpec, Waveform, make_mixture, measured_snr_db, mix_at_snr,
                               read_wav, synth_noise, synth_speech, write_wav)
from deep_mfmvdr.errors import WavFormatError


def test_pcm16_silence(tmp_path):
    scipy.io.wavfile.write(tmp_path / "s.wav", 16000, np.zeros(16000, dtype=np.int16))
    w = read_wav(tmp_path / "s.wav")
    assert len(w) == 16000 and w.sample_rate == 16000
    assert not w.samples.any()


def test_pcm16_full_scale(tmp_path):
    scipy.io.wavfile.write(tmp_path / "f.wav", 16000, np.array([32767, -32768], dtype=np.int16))
    w = read_wav(tmp_path / "f.wav")
    assert w.samples[0] == 32767 / 32768
    assert w.samples[1] == -1.0


def test_stereo_rejected(tmp_path):
    scipy.io.wavfile.write(tmp_path / "st.wav", 16000, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(WavFormatError, match="channels"):
        read_wav(tmp_path / "st.wav")


def test_unsupported_encoding(tmp_path):
    scipy.io.wavfile.write(tmp_path / "i32.wav", 16000, np.zeros(10, dtype=np.int32))
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "i32.wav")


def test_corrupt_file(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF\x00\x00garbage")
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "bad.wav")


def test_float_roundtrip_bit_identical(tmp_path):
    t = np.arange(1600) / 16000
    x = (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32).astype(np.float64)
    write_wav(tmp_path / "f.wav", Waveform(x), "float32")
    assert np.array_equal(read_wav(tmp_path / "f.wav").samples, x)


def test_pcm16_roundtrip_quantization(tmp_path):
    t = np.arange(1600) / 16000
    x = 0.9 * np.sin(2 * np.pi * 440 * t)
    write_wav(tmp_path / "p.wav", Waveform(x))
    assert np.max(np.abs(read_wav(tmp_path / "p.wav").samples - x)) <= 2.0 ** -15


def test_nan_rejected(tmp_path):
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


def test_mix_unit_energies():
    s = Waveform(np.array([1.0, 0.0]))
    n = Waveform(np.array([0.0, 1.0]))
    noisy, scaled = mix_at_snr(s, n, 0.0)
    assert np.array_equal(noisy.samples, [1.0, 1.0])
    assert np.array_equal(scaled.samples, [0.0, 1.0])


def test_mix_20db_gain():
    s = Waveform(np.array([1.0, 0.0]))
    n = Waveform(np.array([0.0, 1.0]))
    _, scaled = mix_at_snr(s, n, 20.0)
    assert scaled.samples[1] == pytest.approx(0.1, rel=1e-15)


def test_mix_zero_noise():
    with pytest.raises(ValueError, match="noise"):
        mix_at_snr(Waveform(np.ones(4)), Waveform(np.zeros(4)), 0.0)


def test_mix_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        mix_at_snr(Waveform(np.ones(4)), Waveform(np.ones(5)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 40), st.integers(0, 2 ** 31))
def test_mix_snr_and_additivity(snr_db, seed):
    rng = np.random.default_rng(seed)
    s = Waveform(rng.standard_normal(400))
    n = Waveform(rng.standard_normal(400) * rng.uniform(0.01, 10))
    noisy, scaled = mix_at_snr(s, n, snr_db)
    assert abs(measured_snr_db(s, scaled) - snr_db) <= 1e-9
    resid = noisy.samples - scaled.samples - s.samples
    assert np.all(np.abs(resid) <= np.spacing(np.abs(noisy.samples)) + np.spacing(np.abs(s.samples)))


def test_generators_deterministic():
    a = make_mixture(MixtureSpec(0.0, 5, 0.3, "tonal"))
    b = make_mixture(MixtureSpec(0.0, 5, 0.3, "tonal"))
    for x, y in zip(a, b):
        assert np.array_equal(x.samples, y.samples)
    assert abs(measured_snr_db(a[1], a[2])) < 1e-9


def test_speech_has_pauses_and_lead_silence():
    s = synth_speech(1.0, 3).samples
    assert not s[:1600].any()
    frames = s[: len(s) // 160 * 160].reshape(-1, 160)
    assert (np.abs(frames).max(1) == 0).sum() >= 10


def test_unknown_noise_kind():
    with pytest.raises(ValueError):
        synth_noise("pink", 0.1, 0)
