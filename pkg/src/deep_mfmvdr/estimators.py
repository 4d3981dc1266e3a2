"""Estimators for the noisy/noise correlation matrices and the a-priori SNR.

Three families produce an :class:`EstimatorOutput` per time-frequency bin:

* oracle: recursive smoothing of the true speech and noise components;
* model-based: recursive smoothing of the noisy signal, a stationary noise
  correlation taken from a leading noise-only segment, and decision-directed
  SNR estimation;
* neural: shared-across-bins TCN heads whose outputs are mapped to Hermitian
  PSD matrices (``H H^H``) and a softplus SNR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal
import scipy.special
import torch

from .errors import DegeneratePowerError
from .multiframe import (EPS_DIV, XI_CEIL, XI_FLOOR, as_complex, hermitize,
                         stack_frames)
from .tcn import TcnModel, tcn_apply

LOG_FLOOR = 1e-8

__all__ = [
    "SmoothingConfig", "EstimatorOutput", "oracle_correlation", "oracle_snr",
    "oracle_estimate", "decision_directed_snr", "model_based_estimate",
    "assemble_hermitian", "unpack_hermitian", "psd_from_factor",
    "snr_activation", "log_magnitude", "neural_features", "neural_estimate",
    "LOG_FLOOR", "stsa_gain",
]


@dataclass(frozen=True)
class SmoothingConfig:
    lam: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"smoothing constant must lie in (0, 1), got {self.lam}")


@dataclass
class EstimatorOutput:
    """Per-bin quantities: ``phi_y``/``phi_n`` of shape ``(..., K, L, N, N)``
    and ``xi`` of shape ``(..., K, L)``."""

    phi_y: torch.Tensor
    phi_n: torch.Tensor
    xi: torch.Tensor


def _np(a):
    if torch.is_tensor(a):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def _smooth(values: np.ndarray, lam: float, axis: int) -> np.ndarray:
    # Phi_l = lam * Phi_{l-1} + (1 - lam) * v_l, Phi_{-1} = 0
    return scipy.signal.lfilter([1.0 - lam], [1.0, -lam], values, axis=axis)


def oracle_correlation(track, cfg: SmoothingConfig = SmoothingConfig()) -> torch.Tensor:
    """Recursively smoothed outer products of multi-frame vectors.

    ``track`` is ``(..., L, N)``; the result is ``(..., L, N, N)``.
    """
    v = _np(track).astype(np.complex128)
    outer = v[..., :, None] * v[..., None, :].conj()
    return hermitize(torch.from_numpy(_smooth(outer, cfg.lam, axis=-3)))


def oracle_snr(x_track, n_track, cfg: SmoothingConfig = SmoothingConfig(),
               xi_floor=XI_FLOOR, xi_ceil=XI_CEIL) -> torch.Tensor:
    """Ratio of recursively smoothed speech and noise periodograms, clamped."""
    px = _smooth(np.abs(_np(x_track)) ** 2, cfg.lam, axis=-1)
    pn = _smooth(np.abs(_np(n_track)) ** 2, cfg.lam, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(pn > 0, px / np.where(pn > 0, pn, 1.0), np.where(px > 0, np.inf, 0.0))
    return torch.from_numpy(np.clip(xi, xi_floor, xi_ceil))


def oracle_estimate(speech_spec, noise_spec, n_taps: int,
                    cfg: SmoothingConfig = SmoothingConfig(), noisy_spec=None,
                    xi_floor=XI_FLOOR, xi_ceil=XI_CEIL) -> EstimatorOutput:
    """Oracle quantities from the true speech and noise spectrograms.

    By default ``phi_y = phi_x + phi_n`` (uncorrelated components); pass
    ``noisy_spec`` to smooth the noisy vectors instead, which keeps the
    speech/noise cross terms.
    """
    xs = stack_frames(as_complex(speech_spec), n_taps)
    ns = stack_frames(as_complex(noise_spec), n_taps)
    phi_x = oracle_correlation(xs, cfg)
    phi_n = oracle_correlation(ns, cfg)
    if noisy_spec is None:
        phi_y = phi_x + phi_n
    else:
        phi_y = oracle_correlation(stack_frames(as_complex(noisy_spec), n_taps), cfg)
    xi = oracle_snr(xs[..., 0], ns[..., 0], cfg, xi_floor, xi_ceil)
    return EstimatorOutput(phi_y, phi_n, xi)


def stsa_gain(xi, post):
    """MMSE short-time spectral amplitude gain for a-priori SNR ``xi`` and
    a-posteriori SNR ``post``; Bessel terms use the exponentially scaled
    forms so large ``v`` does not overflow."""
    post = np.maximum(post, EPS_DIV)
    v = xi * post / (1.0 + xi)
    return (np.sqrt(np.pi) / 2.0 * np.sqrt(v) / post
            * ((1.0 + v) * scipy.special.i0e(v / 2.0) + v * scipy.special.i1e(v / 2.0)))


def decision_directed_snr(y_track, phi_n_track, prev_estimate=None, beta: float = 0.98,
                          xi_floor=XI_FLOOR, xi_ceil=XI_CEIL) -> torch.Tensor:
    """Decision-directed a-priori SNR along the last (frame) axis::

        xi_l = beta * |X_{l-1}|^2 / phi_N,l + (1 - beta) * max(|Y_l|^2 / phi_N,l - 1, 0)

    ``prev_estimate`` holds the clean-speech estimates ``X_l``; when omitted
    they are produced on the fly by the MMSE short-time spectral amplitude
    estimator (:func:`stsa_gain`).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    y = _np(y_track).astype(np.complex128)
    phi_n = np.broadcast_to(_np(phi_n_track).astype(np.float64), y.shape)
    if np.any(phi_n <= EPS_DIV):
        raise DegeneratePowerError("noise PSD below division guard")
    prev = None if prev_estimate is None else np.abs(_np(prev_estimate)) ** 2
    post = np.abs(y) ** 2 / phi_n
    xi = np.empty(y.shape, dtype=np.float64)
    last = np.zeros(y.shape[:-1])
    for l in range(y.shape[-1]):
        if prev is not None:
            last = prev[..., l - 1] if l > 0 else np.zeros(y.shape[:-1])
        est = beta * last / phi_n[..., l] + (1.0 - beta) * np.maximum(post[..., l] - 1.0, 0.0)
        xi[..., l] = np.clip(est, xi_floor, xi_ceil)
        if prev is None:
            last = stsa_gain(xi[..., l], post[..., l]) ** 2 * np.abs(y[..., l]) ** 2
    return torch.from_numpy(xi)


def model_based_estimate(noisy_spec, n_taps: int, cfg: SmoothingConfig = SmoothingConfig(),
                         beta: float = 0.98, noise_frames: int = 25, skip_frames: int = 3,
                         xi_floor=XI_FLOOR, xi_ceil=XI_CEIL) -> EstimatorOutput:
    """Blind estimates from the noisy spectrogram alone.

    The noise correlation matrix is the average outer product over
    ``noise_frames`` frames following the STFT warm-up (``skip_frames``) and
    the multi-frame fill-in, i.e. the signal must open with a noise-only
    segment; it is held constant afterwards (stationary noise).
    """
    ys = stack_frames(as_complex(noisy_spec), n_taps)
    phi_y = oracle_correlation(ys, cfg)
    start = skip_frames + n_taps - 1
    seg = _np(ys[..., start:start + noise_frames, :])
    if seg.shape[-2] == 0:
        raise ValueError("signal too short for the noise-only segment")
    phi_n0 = (seg[..., :, None] * seg[..., None, :].conj()).mean(axis=-3)
    phi_n = hermitize(torch.from_numpy(phi_n0)).unsqueeze(-3).expand_as(phi_y).clone()
    psd_n = phi_n[..., 0, 0].real.clamp_min(2 * EPS_DIV)
    xi = decision_directed_snr(ys[..., 0], psd_n, beta=beta, xi_floor=xi_floor, xi_ceil=xi_ceil)
    return EstimatorOutput(phi_y, phi_n, xi)


def _packing_indices(n: int):
    # source index into [h, 0]; n*n points at the appended zero
    zero = n * n
    re_idx = np.full((n, n), zero)
    im_idx = np.full((n, n), zero)
    im_sign = np.ones((n, n))
    for i in range(n):
        re_idx[i, i] = i
    pos = n
    for i in range(n):
        for j in range(i + 1, n):
            re_idx[i, j] = re_idx[j, i] = pos
            im_idx[i, j] = im_idx[j, i] = pos + 1
            im_sign[j, i] = -1.0
            pos += 2
    return torch.from_numpy(re_idx), torch.from_numpy(im_idx), torch.from_numpy(im_sign)


def _taps_from_len(m: int) -> int:
    n = int(round(np.sqrt(m)))
    if n * n != m or n < 1:
        raise ValueError(f"coefficient vector length {m} is not a perfect square")
    return n


def assemble_hermitian(h) -> torch.Tensor:
    """Map real ``(..., N*N)`` coefficients to Hermitian ``(..., N, N)``.

    Packing: the first ``N`` entries are the (real) diagonal; the remaining
    ``N(N-1)`` entries are ``(re, im)`` pairs of the strict upper triangle in
    row-major order. The lower triangle is the conjugate mirror.
    """
    h = torch.as_tensor(h, dtype=torch.float64)
    n = _taps_from_len(h.shape[-1])
    re_idx, im_idx, im_sign = _packing_indices(n)
    hp = torch.cat([h, h.new_zeros(h.shape[:-1] + (1,))], dim=-1)
    return torch.complex(hp[..., re_idx], im_sign * hp[..., im_idx])


def unpack_hermitian(a) -> torch.Tensor:
    """Inverse of :func:`assemble_hermitian`."""
    a = as_complex(a)
    n = a.shape[-1]
    iu, ju = np.triu_indices(n, 1)
    upper = a[..., iu, ju]
    pairs = torch.stack([upper.real, upper.imag], dim=-1).flatten(-2)
    return torch.cat([torch.diagonal(a, dim1=-2, dim2=-1).real, pairs], dim=-1)


def psd_from_factor(h_mat) -> torch.Tensor:
    """``H H^H``, stored exactly Hermitian."""
    h_mat = as_complex(h_mat)
    return hermitize(h_mat @ h_mat.conj().transpose(-1, -2))


def snr_activation(raw, xi_floor=XI_FLOOR, xi_ceil=XI_CEIL) -> torch.Tensor:
    """Softplus ``ln(1 + exp(raw))`` clamped to ``[xi_floor, xi_ceil]``."""
    raw = torch.as_tensor(raw, dtype=torch.float64)
    return torch.logaddexp(raw, torch.zeros_like(raw)).clamp(xi_floor, xi_ceil)


def log_magnitude(spec, floor: float = LOG_FLOOR) -> torch.Tensor:
    return torch.log10(torch.clamp(as_complex(spec).abs(), min=floor))


def neural_features(spec):
    """Per-bin features ``(..., K, C, L)``: ``[Re Y, Im Y]`` for the
    correlation heads and ``log10 |Y|`` for the SNR head."""
    spec = as_complex(spec)
    ri = torch.stack([spec.real, spec.imag], dim=-2)
    return ri, log_magnitude(spec).unsqueeze(-2)


def run_head(params, arch, features: torch.Tensor) -> torch.Tensor:
    """Evaluate a shared per-bin TCN on ``(..., K, C, L)`` features and return
    ``(..., K, L, output_dim)``."""
    lead = features.shape[:-2]
    flat = features.reshape(-1, *features.shape[-2:])
    out, _ = tcn_apply(params, arch, flat)
    return out.reshape(*lead, arch.output_dim, -1).transpose(-1, -2)


def neural_estimate_from_params(spec, heads: dict, xi_floor=XI_FLOOR,
                                xi_ceil=XI_CEIL) -> EstimatorOutput:
    """Differentiable neural estimation. ``heads`` maps ``"y"``, ``"n"``,
    ``"xi"`` to ``(params, arch)`` pairs."""
    ri, logmag = neural_features(spec)
    out = {}
    for key in ("y", "n"):
        params, arch = heads[key]
        if arch.input_dim != 2:
            raise ValueError(f"head {key!r} must take 2 input features")
        out[key] = psd_from_factor(assemble_hermitian(run_head(params, arch, ri)))
    params, arch = heads["xi"]
    if arch.input_dim != 1 or arch.output_dim != 1:
        raise ValueError("SNR head must map 1 feature to 1 output")
    xi = snr_activation(run_head(params, arch, logmag)[..., 0], xi_floor, xi_ceil)
    return EstimatorOutput(out["y"], out["n"], xi)


def neural_estimate(spec, models: dict[str, TcnModel], xi_floor=XI_FLOOR,
                    xi_ceil=XI_CEIL) -> EstimatorOutput:
    """Inference with three loaded models keyed ``"y"``, ``"n"``, ``"xi"``."""
    n2 = {models[k].arch.output_dim for k in ("y", "n")}
    if len(n2) != 1:
        raise ValueError("correlation heads disagree on N^2")
    heads = {k: (m.params(), m.arch) for k, m in models.items()}
    with torch.no_grad():
        return neural_estimate_from_params(spec, heads, xi_floor, xi_ceil)
