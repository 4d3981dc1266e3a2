"""MFMVDR filter, single/multi-frame baselines and their application.

Filters are stored "apply-by-conjugation": the estimate is ``w^H y``.
Passing ``phi_y`` in place of ``phi_n`` to :func:`mfmvdr_weights` gives the
minimum-power (MPDR) variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegeneratePowerError, SingularSystemError
from .multiframe import EPS_DIV, as_complex, ifc_from_snr, leading_power, stack_frames

COND_LIMIT = 1e12

__all__ = [
    "RegularizationConfig", "regularize", "mfmvdr_weights", "apply_filter",
    "apply_min_gain", "masking_baseline", "direct_filter_baseline",
    "wiener_gain", "enhance", "COND_LIMIT",
]

# Multiplies every gradient leaving the MFMVDR solve; only the gradient
# checker's fault-injection mode changes it.
ADJOINT_SCALE = 1.0


@dataclass(frozen=True)
class RegularizationConfig:
    delta: float = 1e-3
    min_gain_db: float = -17.0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    @property
    def min_gain(self) -> float:
        return 10.0 ** (self.min_gain_db / 20.0)


def regularize(phi_n: torch.Tensor, delta: float) -> torch.Tensor:
    """``Phi_n + delta * trace(Phi_n) / N * I``."""
    n = phi_n.shape[-1]
    load = delta * torch.diagonal(phi_n, dim1=-2, dim2=-1).real.sum(-1) / n
    eye = torch.eye(n, dtype=phi_n.dtype)
    return phi_n + load[..., None, None] * eye


class _MfmvdrSolve(torch.autograd.Function):
    """``w = A^{-1} g / (g^H A^{-1} g)`` for Hermitian positive definite ``A``.

    Backward (gradients in the ``dL/dRe + i dL/dIm`` convention)::

        G_s = -(u^H G_w) / conj(s)^2
        G_u = G_w / conj(s) + G_s g
        v   = A^{-1} G_u
        G_g = conj(G_s) u + v
        G_A = -v u^H
    """

    @staticmethod
    def forward(ctx, a, gamma):
        chol = torch.linalg.cholesky(a)
        u = torch.cholesky_solve(gamma.unsqueeze(-1), chol).squeeze(-1)
        s = (gamma.conj() * u).sum(-1, keepdim=True)
        ctx.save_for_backward(chol, gamma, u, s)
        return u / s

    @staticmethod
    def backward(ctx, grad_w):
        chol, gamma, u, s = ctx.saved_tensors
        s_c = s.conj()
        grad_s = -(u.conj() * grad_w).sum(-1, keepdim=True) / s_c ** 2
        grad_u = grad_w / s_c + grad_s * gamma
        v = torch.cholesky_solve(grad_u.unsqueeze(-1), chol).squeeze(-1)
        grad_gamma = grad_s.conj() * u + v
        grad_a = -v.unsqueeze(-1) * u.conj().unsqueeze(-2)
        return grad_a * ADJOINT_SCALE, grad_gamma * ADJOINT_SCALE


def _singular_mask(a: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        eig = torch.linalg.eigvalsh(a)
        lo, hi = eig[..., 0], eig[..., -1]
        return (lo <= 0) | (hi > COND_LIMIT * lo) | ~torch.isfinite(hi)


def mfmvdr_weights(gamma_x, phi_n, reg: RegularizationConfig = RegularizationConfig(),
                   fallback: bool = False):
    """Closed-form MFMVDR filter ``A^{-1} gamma / (gamma^H A^{-1} gamma)`` with
    ``A`` the trace-scaled Tikhonov-regularized noise correlation matrix.

    Without ``fallback`` a numerically singular ``A`` raises
    :class:`SingularSystemError`. With it, affected entries become the
    passthrough filter ``e`` and ``(w, singular_mask)`` is returned.
    """
    gamma_x, phi_n = as_complex(gamma_x), as_complex(phi_n)
    if gamma_x.shape[-1] != phi_n.shape[-1]:
        raise ValueError("filter length mismatch between gamma and Phi_n")
    a = regularize(phi_n, reg.delta)
    singular = _singular_mask(a)
    if bool(singular.any()) and not fallback:
        raise SingularSystemError(f"{int(singular.sum())} singular systems (cond > {COND_LIMIT:g})")
    n = a.shape[-1]
    eye = torch.eye(n, dtype=a.dtype)
    e = eye[0]
    if bool(singular.any()):
        a = torch.where(singular[..., None, None], eye, a)
        gamma_x = torch.where(singular[..., None], e, gamma_x)
    w = _MfmvdrSolve.apply(a, gamma_x.expand(a.shape[:-1]))
    return (w, singular) if fallback else w


def apply_filter(w, y) -> torch.Tensor:
    """``w^H y`` over the last axis."""
    w, y = as_complex(w), as_complex(y)
    if w.shape[-1] != y.shape[-1]:
        raise ValueError(f"length mismatch: {w.shape[-1]} vs {y.shape[-1]}")
    return (w.conj() * y).sum(-1)


def apply_min_gain(x_hat, y_current, min_gain_db: float = -17.0) -> torch.Tensor:
    """Floor ``|x_hat|`` at ``g |Y|`` with ``g = 10**(min_gain_db / 20)``,
    keeping the phase of ``x_hat`` (of ``Y`` when ``x_hat == 0``)."""
    x_hat, y = as_complex(x_hat), as_complex(y_current)
    g = 10.0 ** (min_gain_db / 20.0)
    floor = g * y.abs()
    mag = x_hat.abs()
    active = mag < floor
    safe = torch.where(mag > 0, mag, torch.ones_like(mag))
    floored = torch.where(mag > 0, floor / safe * x_hat, g * y)
    return torch.where(active, floored, x_hat)


def masking_baseline(mask_raw, y_current) -> torch.Tensor:
    """Complex mask with real/imag parts squashed into [-2, 2]; ``mask_raw``
    has a trailing axis of size 2."""
    mask_raw = torch.as_tensor(mask_raw, dtype=torch.float64)
    m = 2.0 * torch.tanh(mask_raw / 2.0)
    return torch.complex(m[..., 0], m[..., 1]) * as_complex(y_current)


def direct_filter_baseline(filter_raw, y) -> torch.Tensor:
    """Multi-frame filter with real/imag parts squashed into [-1, 1];
    ``filter_raw`` is ``[Re w_0..Re w_{N-1}, Im w_0..Im w_{N-1}]``."""
    filter_raw = torch.as_tensor(filter_raw, dtype=torch.float64)
    y = as_complex(y)
    n = y.shape[-1]
    if filter_raw.shape[-1] != 2 * n:
        raise ValueError(f"expected {2 * n} raw filter values, got {filter_raw.shape[-1]}")
    c = torch.tanh(filter_raw)
    return apply_filter(torch.complex(c[..., :n], c[..., n:]), y)


def wiener_gain(xi) -> torch.Tensor:
    xi = torch.as_tensor(xi, dtype=torch.float64)
    return xi / (1.0 + xi)


def enhance(noisy_spec, estimates, reg: RegularizationConfig = RegularizationConfig(),
            strict: bool = False):
    """Apply the MFMVDR filter bin by bin.

    ``estimates`` supplies ``phi_y``, ``phi_n`` (``(..., K, L, N, N)``) and
    ``xi`` (``(..., K, L)``). Bins with a degenerate leading power or a
    singular system are passed through unfiltered and counted; with
    ``strict`` a degenerate power raises instead.

    Returns ``(enhanced_spec, diagnostics)``.
    """
    y_spec = as_complex(noisy_spec)
    phi_y, phi_n, xi = estimates.phi_y, estimates.phi_n, estimates.xi
    n = phi_n.shape[-1]
    degenerate = (leading_power(phi_y) <= EPS_DIV) | (leading_power(phi_n) <= EPS_DIV)
    if bool(degenerate.any()):
        if strict:
            raise DegeneratePowerError(f"{int(degenerate.sum())} bins with degenerate leading power")
        eye = torch.eye(n, dtype=phi_n.dtype)
        phi_y = torch.where(degenerate[..., None, None], eye, phi_y)
        phi_n = torch.where(degenerate[..., None, None], eye, phi_n)
    gamma = ifc_from_snr(phi_y, phi_n, xi, check=False)
    w, singular = mfmvdr_weights(gamma, phi_n, reg, fallback=True)
    if bool(degenerate.any()):
        w = torch.where(degenerate[..., None], torch.eye(n, dtype=w.dtype)[0], w)
    x_hat = apply_filter(w, stack_frames(y_spec, n))
    out = apply_min_gain(x_hat, y_spec, reg.min_gain_db)
    diagnostics = {"singular": int((singular & ~degenerate).sum()),
                   "degenerate": int(degenerate.sum())}
    return out, diagnostics
