import numpy as np
import scipy.special
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_psd
from deep_mfmvdr.errors import DegeneratePowerError
from deep_mfmvdr.estimators import (SmoothingConfig, assemble_hermitian, decision_directed_snr,
                                    log_magnitude, model_based_estimate, neural_estimate,
                                    oracle_correlation, oracle_estimate, oracle_snr,
                                    psd_from_factor, snr_activation, stsa_gain,
                                    unpack_hermitian)
from deep_mfmvdr.multiframe import XI_CEIL, XI_FLOOR, is_psd
from deep_mfmvdr.tcn import TcnArch, TcnModel, expected_shapes, init_model


def test_smoothing_fixed_point():
    v = np.array([1.0, 0.5j, -0.25])
    track = np.tile(v, (200, 1))
    phi = oracle_correlation(track, SmoothingConfig(0.9)).numpy()
    assert np.abs(phi[-1] - np.outer(v, v.conj())).max() <= 0.9 ** 200 * 2


def test_smoothing_zero_input():
    assert not oracle_correlation(np.zeros((10, 3))).abs().any()


def test_smoothing_direct_recursion(rng):
    track = rng.standard_normal((30, 4)) + 1j * rng.standard_normal((30, 4))
    got = oracle_correlation(track, SmoothingConfig(0.7)).numpy()
    phi = np.zeros((4, 4), dtype=complex)
    for l in range(30):
        phi = 0.7 * phi + 0.3 * np.outer(track[l], track[l].conj())
        assert np.allclose(got[l], phi, atol=1e-13)


def test_smoothing_white_noise_converges(rng):
    track = (rng.standard_normal((20000, 3)) + 1j * rng.standard_normal((20000, 3))) / np.sqrt(2)
    phi = oracle_correlation(track, SmoothingConfig(0.999)).numpy()
    off = lambda m: np.abs(m - np.diag(np.diag(m))).max()
    assert np.allclose(np.diag(phi[-1]).real, 1.0, atol=0.15)
    assert off(phi[-1]) < 0.15
    short = oracle_correlation(track[:50], SmoothingConfig(0.999)).numpy()[-1]
    assert off(phi[-1]) < off(short / np.trace(short).real * 3)


def test_smoothing_bad_lambda():
    with pytest.raises(ValueError):
        SmoothingConfig(1.0)


def test_oracle_snr_cases(rng):
    x = np.ones(20)
    assert torch.allclose(oracle_snr(x, x), torch.ones(20, dtype=torch.float64))
    assert torch.all(oracle_snr(np.zeros(20), x) == XI_FLOOR)
    xt = rng.standard_normal(40) + 1j * rng.standard_normal(40)
    nt = rng.standard_normal(40) + 1j * rng.standard_normal(40)
    got = oracle_snr(xt, nt, SmoothingConfig(0.8)).numpy()
    px = pn = 0.0
    for l in range(40):
        px = 0.8 * px + 0.2 * abs(xt[l]) ** 2
        pn = 0.8 * pn + 0.2 * abs(nt[l]) ** 2
        assert got[l] == pytest.approx(np.clip(px / pn, XI_FLOOR, XI_CEIL), rel=1e-12)


def test_oracle_estimate_additive(rng):
    x = rng.standard_normal((3, 30)) + 1j * rng.standard_normal((3, 30))
    n = rng.standard_normal((3, 30)) + 1j * rng.standard_normal((3, 30))
    est = oracle_estimate(x, n, 4)
    assert est.phi_y.shape == (3, 30, 4, 4) and est.xi.shape == (3, 30)
    phi_x = oracle_correlation(np.stack([np.pad(x, ((0, 0), (k, 0)))[:, :30] for k in range(4)], -1))
    assert torch.allclose(est.phi_y - est.phi_n, phi_x, atol=1e-13)


def test_dd_limits(rng):
    y = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    got = decision_directed_snr(y, np.full(50, 2.0), beta=0.0).numpy()
    assert np.allclose(got, np.clip(np.maximum(np.abs(y) ** 2 / 2 - 1, 0), XI_FLOOR, XI_CEIL))
    got = decision_directed_snr(y, np.full(50, 2.0), prev_estimate=np.zeros(50), beta=1.0)
    assert torch.all(got == XI_FLOOR)
    with pytest.raises(DegeneratePowerError):
        decision_directed_snr(y, np.zeros(50))
    with pytest.raises(ValueError):
        decision_directed_snr(y, np.ones(50), beta=1.5)


def _tone_scene(snr_db, frames=600, bins=64):
    rng = np.random.default_rng(int(snr_db))
    amp = np.sqrt(10 ** (snr_db / 10))
    x = np.tile(amp * np.exp(1j * 0.3 * np.arange(frames)), (bins, 1))
    n = (rng.standard_normal((bins, frames)) + 1j * rng.standard_normal((bins, frames))) / np.sqrt(2)
    return x, n


def _mean_db(xi):
    return 10 * np.log10(xi[:, 200:].mean())


@pytest.mark.parametrize("snr_db", [0.0, 10.0, 20.0])
def test_dd_recursion_tracks_oracle_given_clean_history(snr_db):
    x, n = _tone_scene(snr_db)
    dd = decision_directed_snr(x + n, np.ones(x.shape), prev_estimate=x, beta=0.98).numpy()
    oracle = oracle_snr(x, n, SmoothingConfig(0.98)).numpy()
    assert abs(_mean_db(dd) - _mean_db(oracle)) < 1.0


@pytest.mark.parametrize("snr_db", [10.0, 20.0])
def test_dd_self_fed_tracks_oracle(snr_db):
    x, n = _tone_scene(snr_db)
    dd = decision_directed_snr(x + n, np.ones(x.shape), beta=0.98).numpy()
    oracle = oracle_snr(x, n, SmoothingConfig(0.98)).numpy()
    assert abs(_mean_db(dd) - _mean_db(oracle)) < 1.0


def test_dd_self_fed_underestimates_at_0db():
    # the decision-directed recursion fed with its own amplitude estimates is
    # biased low at 0 dB; keep the size of that bias pinned
    x, n = _tone_scene(0.0)
    dd = decision_directed_snr(x + n, np.ones(x.shape), beta=0.98).numpy()
    oracle = oracle_snr(x, n, SmoothingConfig(0.98)).numpy()
    bias = _mean_db(dd) - _mean_db(oracle)
    assert -8.0 < bias < -5.0


def test_stsa_gain_against_hypergeometric_form(rng):
    xi = rng.uniform(0.01, 100, 200)
    post = rng.uniform(0.05, 200, 200)
    v = xi * post / (1 + xi)
    ref = np.sqrt(np.pi) / 2 * np.sqrt(v) / post * scipy.special.hyp1f1(-0.5, 1.0, -v)
    assert np.allclose(stsa_gain(xi, post), ref, rtol=1e-10)
    # high-SNR limit is the Wiener gain
    assert stsa_gain(1e4, 1e4) == pytest.approx(1e4 / (1 + 1e4), rel=1e-4)


def test_model_based_shapes_and_validity():
    from deep_mfmvdr.audio import MixtureSpec, make_mixture
    from deep_mfmvdr.stft import analyze
    noisy, _, _ = make_mixture(MixtureSpec(5.0, 1, 0.5))
    est = model_based_estimate(analyze(noisy.samples), 5)
    assert bool(is_psd(est.phi_n[:, 50]).all()) and bool(is_psd(est.phi_y[:, 50], 1e-10).all())
    assert torch.all(est.xi >= XI_FLOOR)


def test_assemble_examples():
    assert torch.equal(assemble_hermitian([1.0, 1.0, 0.0, 0.0]), torch.eye(2, dtype=torch.complex128))
    a, d, b, c = 0.3, -1.2, 0.7, 2.5
    expect = torch.tensor([[a, b + 1j * c], [b - 1j * c, d]], dtype=torch.complex128)
    assert torch.equal(assemble_hermitian([a, d, b, c]), expect)
    with pytest.raises(ValueError):
        assemble_hermitian(np.zeros(5))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31))
def test_pack_bijection(n, seed):
    rng = np.random.default_rng(seed)
    h = torch.from_numpy(rng.standard_normal(n * n))
    a = assemble_hermitian(h)
    assert torch.equal(a, a.conj().T)
    assert torch.equal(unpack_hermitian(a), h)
    m = torch.from_numpy(random_psd(rng, n))
    m = (m + m.conj().T) / 2
    assert torch.equal(assemble_hermitian(unpack_hermitian(m)), m)


def test_psd_from_factor_examples(rng):
    eye = torch.eye(3, dtype=torch.complex128)
    assert torch.equal(psd_from_factor(eye), eye)
    assert not psd_from_factor(torch.zeros(3, 3, dtype=torch.complex128)).abs().any()
    h = rng.standard_normal((5, 5)) + 1j * rng.standard_normal((5, 5))
    eig = np.linalg.eigvalsh(psd_from_factor(torch.from_numpy(h)).numpy())
    sv = np.linalg.svd(h, compute_uv=False)
    assert np.allclose(np.sort(eig), np.sort(sv ** 2), rtol=1e-10)


def test_psd_invariant_many(rng):
    h = torch.from_numpy(rng.standard_normal((10000, 25)) * rng.uniform(0.01, 100, (10000, 1)))
    phi = psd_from_factor(assemble_hermitian(h))
    eig = torch.linalg.eigvalsh(phi)
    trace = torch.diagonal(phi, dim1=-2, dim2=-1).real.sum(-1)
    assert bool((eig[:, 0] >= -1e-12 * trace).all())


def test_snr_activation():
    assert float(snr_activation(0.0)) == pytest.approx(np.log(2.0), abs=1e-15)
    assert float(snr_activation(-1e4)) == XI_FLOOR
    assert float(snr_activation(1e9)) == XI_CEIL
    grid = torch.sort(torch.from_numpy(np.random.default_rng(0).uniform(-50, 50, 500))).values
    assert bool((torch.diff(snr_activation(grid)) >= 0).all())


def test_log_magnitude_floor():
    v = log_magnitude(torch.tensor([0.0, 1e-30, 1.0], dtype=torch.complex128))
    assert torch.equal(v, torch.tensor([-8.0, -8.0, 0.0], dtype=torch.float64))


def _zero_model(arch):
    return TcnModel(arch, {k: np.zeros(s, np.float32) for k, s in expected_shapes(arch).items()})


def test_zero_network_degenerate(rng):
    from deep_mfmvdr.filters import enhance
    spec = torch.from_numpy(rng.standard_normal((4, 20)) + 1j * rng.standard_normal((4, 20)))
    models = {"y": _zero_model(TcnArch(2, 9, hidden_dim=4, bottleneck_dim=3)),
              "n": _zero_model(TcnArch(2, 9, hidden_dim=4, bottleneck_dim=3)),
              "xi": _zero_model(TcnArch(1, 1, hidden_dim=4, bottleneck_dim=3))}
    est = neural_estimate(spec, models)
    assert not est.phi_y.abs().any()
    with pytest.raises(DegeneratePowerError):
        enhance(spec, est, strict=True)


def test_neural_outputs_valid(rng):
    spec = torch.from_numpy(rng.standard_normal((6, 40)) + 1j * rng.standard_normal((6, 40)))
    models = {k: init_model(TcnArch(i, o, hidden_dim=8, bottleneck_dim=4), s)
              for s, (k, i, o) in enumerate([("y", 2, 16), ("n", 2, 16), ("xi", 1, 1)])}
    est = neural_estimate(spec, models)
    assert est.phi_y.shape == (6, 40, 4, 4)
    assert bool(is_psd(est.phi_y).all() and is_psd(est.phi_n).all())
    assert bool((est.xi >= XI_FLOOR).all())
