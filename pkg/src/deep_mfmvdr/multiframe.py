"""Multi-frame vectors, Hermitian matrices and interframe-correlation vectors.

Conventions (batched, torch):

* multi-frame vectors ``(..., K, L, N)`` ordered newest-first,
  ``[Y_l, Y_{l-1}, ..., Y_{l-N+1}]``;
* correlation matrices ``(..., N, N)`` complex Hermitian;
* IFC vectors ``(..., N)`` with first entry exactly one.

The temporally uncorrelated speech residual of the multi-frame signal
model never needs to be formed; only the correlated part enters the filter.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegeneratePowerError

EPS_DIV = 1e-12
XI_FLOOR = 1e-4
XI_CEIL = 1e6

__all__ = [
    "EPS_DIV", "XI_FLOOR", "XI_CEIL", "as_complex", "stack_frames",
    "hermitize", "is_psd", "leading_power", "ifc_from_correlation",
    "ifc_from_snr", "correlation_additivity_check", "selection_vector",
]


def as_complex(a) -> torch.Tensor:
    """complex128 tensor view of ``a``; complex tensors pass through untouched."""
    if torch.is_tensor(a) and a.is_complex():
        return a
    if isinstance(a, np.ndarray):
        a = torch.from_numpy(np.ascontiguousarray(a))
    return torch.as_tensor(a).to(torch.complex128)


def selection_vector(n: int) -> torch.Tensor:
    e = torch.zeros(n, dtype=torch.complex128)
    e[0] = 1.0
    return e


def stack_frames(spec: torch.Tensor, n_taps: int) -> torch.Tensor:
    """Stack the current and ``n_taps - 1`` past frames of a ``(..., K, L)``
    spectrogram into ``(..., K, L, N)``; frames before 0 are zero."""
    if n_taps < 1:
        raise ValueError(f"N must be >= 1, got {n_taps}")
    padded = F.pad(spec, (n_taps - 1, 0))
    # unfold yields oldest-first windows; flip to newest-first
    return padded.unfold(-1, n_taps, 1).flip(-1)


def hermitize(a: torch.Tensor) -> torch.Tensor:
    """Rebuild ``a`` from its strict upper triangle and real diagonal so that
    ``A == A^H`` holds bit-exactly."""
    upper = torch.triu(a, diagonal=1)
    diag = torch.diagonal(a, dim1=-2, dim2=-1).real
    return upper + upper.conj().transpose(-1, -2) + torch.diag_embed(diag).to(a.dtype)


def is_psd(a: torch.Tensor, rel_tol: float = 1e-12) -> torch.Tensor:
    """Per-matrix test ``min eig >= -rel_tol * trace``."""
    eig = torch.linalg.eigvalsh(a)
    trace = torch.diagonal(a, dim1=-2, dim2=-1).real.sum(-1)
    return eig[..., 0] >= -rel_tol * trace.abs()


def leading_power(phi: torch.Tensor) -> torch.Tensor:
    """``e^T Phi e`` as a real tensor."""
    return phi[..., 0, 0].real


def _check_power(power: torch.Tensor, eps_div: float, what: str):
    bad = power <= eps_div
    if bool(bad.any()):
        raise DegeneratePowerError(
            f"{what}: {int(bad.sum())} matrices with e^T Phi e <= {eps_div:g}")


def _normalized_first_column(phi: torch.Tensor, power: torch.Tensor) -> torch.Tensor:
    tail = phi[..., 1:, 0] / power.unsqueeze(-1)
    one = torch.ones(tail.shape[:-1] + (1,), dtype=phi.dtype)
    return torch.cat([one, tail], dim=-1)


def ifc_from_correlation(phi, eps_div: float = EPS_DIV) -> torch.Tensor:
    """``Phi e / (e^T Phi e)``; the first entry is set to exactly one."""
    phi = as_complex(phi)
    power = leading_power(phi)
    _check_power(power, eps_div, "ifc_from_correlation")
    return _normalized_first_column(phi, power)


def ifc_from_snr(phi_y, phi_n, xi, eps_div: float = EPS_DIV,
                 check: bool = True) -> torch.Tensor:
    """Speech IFC vector from noisy/noise correlation matrices and a-priori SNR::

        gamma_x = (1 + xi) / xi * gamma_y - 1 / xi * gamma_n

    ``xi`` broadcasts against the matrix batch shape. With ``check=False``
    degenerate leading powers are not reported (callers mask them).
    """
    phi_y, phi_n = as_complex(phi_y), as_complex(phi_n)
    xi = torch.as_tensor(xi, dtype=torch.float64)
    py, pn = leading_power(phi_y), leading_power(phi_n)
    if check:
        _check_power(py, eps_div, "ifc_from_snr (noisy)")
        _check_power(pn, eps_div, "ifc_from_snr (noise)")
        if bool((xi <= 0).any()):
            raise ValueError("a-priori SNR must be positive")
    gy = phi_y[..., 1:, 0] / py.unsqueeze(-1)
    gn = phi_n[..., 1:, 0] / pn.unsqueeze(-1)
    inv = (1.0 / xi).unsqueeze(-1)
    tail = (1.0 + inv) * gy - inv * gn
    one = torch.ones(tail.shape[:-1] + (1,), dtype=tail.dtype)
    return torch.cat([one, tail], dim=-1)


def correlation_additivity_check(phi_x, phi_n, phi_y) -> float:
    """Largest entrywise ``|Phi_y - Phi_x - Phi_n|``."""
    phi_x, phi_n, phi_y = (as_complex(p) for p in (phi_x, phi_n, phi_y))
    if not phi_x.shape == phi_n.shape == phi_y.shape:
        raise ValueError("correlation matrices must share a shape")
    return float((phi_y - phi_x - phi_n).abs().max())
