"""SI-SDR, segmental SNR, evaluation reports and real-time-factor timing."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

SI_SDR_EPS = 1e-12
# 10 * log10(1 / SI_SDR_EPS): the value reached by a perfect estimate
SI_SDR_CAP_DB = 120.0
SEG_SNR_RANGE = (-10.0, 35.0)

__all__ = [
    "SI_SDR_EPS", "SI_SDR_CAP_DB", "si_sdr", "si_sdr_torch", "segmental_snr",
    "EvalReport", "evaluate", "benchmark_rtf",
]


def si_sdr_torch(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Differentiable SI-SDR in dB over the last axis.

    The residual is guarded by ``SI_SDR_EPS`` times the target energy, which
    keeps the measure exactly scale invariant and caps it at 120 dB.
    """
    alpha = (estimate * reference).sum(-1, keepdim=True) / (reference ** 2).sum(-1, keepdim=True)
    target = alpha * reference
    p_target = (target ** 2).sum(-1)
    p_resid = ((target - estimate) ** 2).sum(-1)
    tiny = 1e-300
    return 10.0 * torch.log10((p_target + tiny) / (p_resid + SI_SDR_EPS * p_target + tiny))


def _samples(w):
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def si_sdr(estimate, reference) -> float:
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if est.size == 0:
        raise ValueError("empty signals")
    if not np.dot(ref, ref) > 0:
        raise ValueError("reference has zero energy")
    return float(si_sdr_torch(torch.from_numpy(est), torch.from_numpy(ref)))


def segmental_snr(estimate, reference, segment: int = 512,
                  clamp=SEG_SNR_RANGE) -> float:
    """Mean over non-overlapping segments (32 ms at 16 kHz) of the per-segment
    SNR, each clamped to ``clamp`` dB before averaging."""
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    n_seg = max(len(ref) // segment, 1)
    values = []
    for i in range(n_seg):
        r = ref[i * segment:(i + 1) * segment]
        e = r - est[i * segment:(i + 1) * segment]
        num, den = np.dot(r, r), np.dot(e, e)
        if den == 0:
            snr = clamp[1]
        elif num == 0:
            snr = clamp[0]
        else:
            snr = 10.0 * np.log10(num / den)
        values.append(min(max(snr, clamp[0]), clamp[1]))
    return float(np.mean(values))


@dataclass(frozen=True)
class EvalReport:
    si_sdr_in: float
    si_sdr_out: float
    delta_si_sdr: float
    seg_snr_out: float
    rtf: float = float("nan")

    def to_text(self) -> str:
        return "\n".join(f"{k}={v:.6f}" for k, v in asdict(self).items())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(noisy, enhanced, reference, rtf: float = float("nan")) -> EvalReport:
    lengths = {len(_samples(noisy)), len(_samples(enhanced)), len(_samples(reference))}
    if len(lengths) != 1:
        raise ValueError(f"length mismatch: {sorted(lengths)}")
    s_in = si_sdr(noisy, reference)
    s_out = si_sdr(enhanced, reference)
    return EvalReport(s_in, s_out, s_out - s_in, segmental_snr(enhanced, reference), rtf)


def benchmark_rtf(process, signal, repeats: int = 5, threads: int | None = 1,
                  sample_rate: int = 16000) -> float:
    """Median wall-clock time of ``process(signal)`` over ``repeats`` runs,
    divided by the signal duration."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    duration = len(_samples(signal)) / getattr(signal, "sample_rate", sample_rate)
    prev_threads = torch.get_num_threads()
    if threads is not None:
        torch.set_num_threads(threads)
    try:
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            process(signal)
            times.append(time.perf_counter() - start)
    finally:
        torch.set_num_threads(prev_threads)
    return statistics.median(times) / duration
