"""Causal STFT analysis and weighted overlap-add synthesis.

Spectrograms are complex128 tensors of shape ``(..., K, L)`` with
``K = frame_len // 2 + 1`` bins and ``L`` frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .audio import SAMPLE_RATE, Waveform

__all__ = ["StftConfig", "analyze", "synthesize", "num_frames", "window"]


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 128
    frame_shift: int = 32
    window: str = "hann"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.frame_shift < 1 or self.frame_len < 1:
            raise ValueError("frame_len and frame_shift must be >= 1")
        if self.frame_len % self.frame_shift:
            raise ValueError("frame_shift must divide frame_len")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @classmethod
    def from_ms(cls, frame_len_ms=8.0, frame_shift_ms=2.0, window="hann",
                sample_rate=SAMPLE_RATE):
        return cls(int(round(frame_len_ms * sample_rate / 1000)),
                   int(round(frame_shift_ms * sample_rate / 1000)), window, sample_rate)

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def lead_pad(self) -> int:
        return self.frame_len - self.frame_shift


def window(cfg: StftConfig) -> torch.Tensor:
    # periodic Hann: squared window sums to a constant at 75% overlap
    return torch.hann_window(cfg.frame_len, periodic=True, dtype=torch.float64)


def num_frames(n_samples: int, cfg: StftConfig) -> int:
    """Frames needed so every sample is covered by a full set of windows."""
    return math.ceil(n_samples / cfg.frame_shift) + cfg.frame_len // cfg.frame_shift - 1


def _as_signal(w):
    if isinstance(w, Waveform):
        if w.sample_rate != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")
        w = w.samples
    if isinstance(w, np.ndarray):
        w = torch.from_numpy(np.ascontiguousarray(w, dtype=np.float64))
    return w.to(torch.float64)


def analyze(w, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """STFT of ``w`` (Waveform, array or tensor of shape ``(..., T)``).

    The signal is prefixed with ``frame_len - frame_shift`` zeros so frame
    ``l`` ends at original sample ``(l + 1) * frame_shift - 1``.
    """
    x = _as_signal(w)
    n = x.shape[-1]
    n_frames = num_frames(n, cfg)
    total = (n_frames - 1) * cfg.frame_shift + cfg.frame_len
    xp = F.pad(x, (cfg.lead_pad, total - cfg.lead_pad - n))
    frames = xp.unfold(-1, cfg.frame_len, cfg.frame_shift) * window(cfg)
    return torch.fft.rfft(frames, dim=-1).transpose(-1, -2)


def synthesize(s: torch.Tensor, cfg: StftConfig, out_len: int) -> torch.Tensor:
    """Inverse of :func:`analyze` by weighted overlap-add, normalized by the
    per-sample sum of squared windows. Returns a ``(..., out_len)`` tensor."""
    if s.shape[-2] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} bins, got {s.shape[-2]}")
    n_frames = s.shape[-1]
    total = (n_frames - 1) * cfg.frame_shift + cfg.frame_len
    if out_len + cfg.lead_pad > total:
        raise ValueError(f"out_len {out_len} exceeds the {n_frames}-frame span")
    win = window(cfg)
    frames = torch.fft.irfft(s.transpose(-1, -2), n=cfg.frame_len, dim=-1) * win
    batch = frames.shape[:-2]
    cols = frames.reshape(-1, n_frames, cfg.frame_len).transpose(1, 2)
    ola = F.fold(cols, output_size=(1, total), kernel_size=(1, cfg.frame_len),
                 stride=(1, cfg.frame_shift)).reshape(*batch, total)
    norm = F.fold((win ** 2).reshape(1, -1, 1).expand(1, -1, n_frames),
                  output_size=(1, total), kernel_size=(1, cfg.frame_len),
                  stride=(1, cfg.frame_shift)).reshape(total)
    norm = torch.where(norm > 1e-10, norm, torch.ones_like(norm))
    y = ola / norm
    return y[..., cfg.lead_pad:cfg.lead_pad + out_len]
