"""End-to-end enhancement: configuration, estimator selection and methods.

Methods: ``mfmvdr`` (any estimator), ``wiener`` (single-frame gain from the
oracle or decision-directed SNR), ``masking`` and ``direct`` (neural only),
and ``passthrough`` (STFT round trip).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from . import estimators as est
from .audio import Waveform
from .filters import (RegularizationConfig, apply_min_gain, direct_filter_baseline,
                      enhance, masking_baseline, wiener_gain)
from .multiframe import XI_CEIL, XI_FLOOR, stack_frames
from .stft import StftConfig, analyze, synthesize
from .tcn import TcnArch, TcnModel, init_model

METHODS = ("mfmvdr", "wiener", "masking", "direct", "passthrough")
ESTIMATORS = ("oracle", "model-based", "neural")
HEAD_KEYS = {"mfmvdr": ("y", "n", "xi"), "masking": ("mask",), "direct": ("filter",)}

__all__ = [
    "PipelineConfig", "load_config", "METHODS", "ESTIMATORS", "HEAD_KEYS",
    "head_archs", "init_heads", "neural_forward", "enhance_waveform",
]


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    n_taps: int = 5
    reg: RegularizationConfig = field(default_factory=RegularizationConfig)
    estimator: str = "oracle"
    method: str = "mfmvdr"
    lam: float = 0.9
    beta: float = 0.98
    xi_floor: float = XI_FLOOR
    xi_ceil: float = XI_CEIL
    log_floor: float = est.LOG_FLOOR
    noise_frames: int = 25
    model_y: str | None = None
    model_n: str | None = None
    model_xi: str | None = None
    model_filter: str | None = None

    def __post_init__(self):
        if self.n_taps < 1:
            raise ValueError("N must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        est.SmoothingConfig(self.lam)
        if not 0.0 < self.xi_floor < self.xi_ceil:
            raise ValueError("need 0 < xi_floor < xi_ceil")

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        """Build from flat documented keys (``frame_len_ms``, ``frame_shift_ms``,
        ``window``, ``N``, ``delta``, ``min_gain_db``, ``lambda``, ``beta``,
        ``xi_floor``, ``xi_ceil``, ``log_floor``, ``estimator``, ``method``,
        ``noise_frames``, ``model_y``, ``model_n``, ``model_xi``,
        ``model_filter``)."""
        values = dict(values)
        stft = StftConfig.from_ms(float(values.pop("frame_len_ms", 8.0)),
                                  float(values.pop("frame_shift_ms", 2.0)),
                                  values.pop("window", "hann"))
        reg = RegularizationConfig(float(values.pop("delta", 1e-3)),
                                   float(values.pop("min_gain_db", -17.0)))
        renames = {"N": "n_taps", "lambda": "lam"}
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = renames.get(key, key)
            if name not in known or name in ("stft", "reg"):
                raise ValueError(f"unknown config key {key!r}")
            if name in ("n_taps", "noise_frames"):
                kwargs[name] = int(raw)
            elif name in ("lam", "beta", "xi_floor", "xi_ceil", "log_floor"):
                kwargs[name] = float(raw)
            else:
                kwargs[name] = None if raw in (None, "", "none") else str(raw)
        return cls(stft=stft, reg=reg, **kwargs)

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        reg_keys = {k: kwargs.pop(k) for k in ("delta", "min_gain_db") if k in kwargs}
        cfg = replace(self, **kwargs)
        if reg_keys:
            cfg = replace(cfg, reg=replace(cfg.reg, **reg_keys))
        return cfg

    def echo(self) -> str:
        return (f"frame_len={self.stft.frame_len} frame_shift={self.stft.frame_shift} "
                f"window={self.stft.window} N={self.n_taps} delta={self.reg.delta:g} "
                f"min_gain_db={self.reg.min_gain_db:g} estimator={self.estimator} "
                f"method={self.method} lambda={self.lam:g} beta={self.beta:g}")


def load_config(path) -> PipelineConfig:
    """Read a JSON object or flat ``key=value`` lines (``#`` comments)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        values = json.loads(text)
    else:
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line {line!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return PipelineConfig.from_mapping(values)


def head_archs(method: str, n_taps: int, hidden_dim: int = 128, bottleneck_dim: int = 64,
               **arch_kwargs) -> dict[str, TcnArch]:
    dims = {"mfmvdr": {"y": (2, n_taps ** 2), "n": (2, n_taps ** 2), "xi": (1, 1)},
            "masking": {"mask": (2, 2)},
            "direct": {"filter": (2, 2 * n_taps)}}[method]
    return {k: TcnArch(i, o, hidden_dim=hidden_dim, bottleneck_dim=bottleneck_dim, **arch_kwargs)
            for k, (i, o) in dims.items()}


def init_heads(method: str, n_taps: int, seed: int, hidden_dim: int = 128,
               bottleneck_dim: int = 64, output_scale: float = 0.1, **arch_kwargs):
    """Seeded models for every head of ``method``.

    Output layers are shrunk by ``output_scale`` and biased towards
    passthrough: identity factors for the correlation heads, unit mask, and
    ``w = e`` for direct filtering. The distance from passthrough grows with
    ``output_scale``.
    """
    archs = head_archs(method, n_taps, hidden_dim, bottleneck_dim, **arch_kwargs)
    models = {}
    for i, (key, arch) in enumerate(sorted(archs.items())):
        bias = np.zeros(arch.output_dim)
        if key in ("y", "n"):
            bias[:n_taps] = 1.0
        elif key == "mask":
            bias[0] = 2.0 * np.arctanh(0.5)
        elif key == "filter":
            bias[0] = np.arctanh(0.9)
        model = init_model(arch, seed * 1000 + i, output_bias=bias)
        model.tensors["output.weight"] = (model.tensors["output.weight"] * output_scale).astype(np.float32)
        models[key] = model
    return models


def _floor_mask(x_hat, y, min_gain_db):
    return x_hat.abs() < 10.0 ** (min_gain_db / 20.0) * y.abs()


def neural_forward(noisy: torch.Tensor, heads: dict, method: str, n_taps: int,
                   reg: RegularizationConfig, stft: StftConfig,
                   xi_floor=XI_FLOOR, xi_ceil=XI_CEIL, return_floor: bool = False):
    """Differentiable neural enhancement of ``(..., T)`` waveforms.

    ``heads`` maps head keys to ``(params, arch)``. Returns the enhanced
    waveforms, and the boolean floor-active mask when ``return_floor``.
    """
    n_samples = noisy.shape[-1]
    y_spec = analyze(noisy, stft)
    if method == "mfmvdr":
        estimates = est.neural_estimate_from_params(y_spec, heads, xi_floor, xi_ceil)
        x_hat, _ = enhance(y_spec, estimates, replace(reg, min_gain_db=-np.inf), strict=True)
    else:
        ri, _ = est.neural_features(y_spec)
        key = HEAD_KEYS[method][0]
        params, arch = heads[key]
        raw = est.run_head(params, arch, ri)
        if method == "masking":
            x_hat = masking_baseline(raw, y_spec)
        else:
            x_hat = direct_filter_baseline(raw, stack_frames(y_spec, n_taps))
    floor = _floor_mask(x_hat, y_spec, reg.min_gain_db)
    out = apply_min_gain(x_hat, y_spec, reg.min_gain_db)
    wave = synthesize(out, stft, n_samples)
    return (wave, floor) if return_floor else wave


def _spec(w, cfg):
    return analyze(w.samples if isinstance(w, Waveform) else w, cfg.stft)


def enhance_waveform(noisy: Waveform, cfg: PipelineConfig, speech: Waveform | None = None,
                     noise: Waveform | None = None, models: dict | None = None):
    """Enhance one utterance. Oracle estimation needs the true ``speech`` and
    ``noise`` components; neural estimation needs ``models``.

    Returns ``(enhanced Waveform, diagnostics dict)``.
    """
    y_spec = _spec(noisy, cfg)
    n_samples = len(noisy)
    diagnostics = {"singular": 0, "degenerate": 0}
    method, estimator = cfg.method, cfg.estimator
    smoothing = est.SmoothingConfig(cfg.lam)
    if method == "passthrough":
        out = y_spec
    elif estimator == "neural":
        if not models or any(k not in models for k in HEAD_KEYS.get(method, ("?",))):
            raise ValueError(f"method {method!r} with neural estimation needs models "
                             f"{HEAD_KEYS.get(method, ())}")
        heads = {k: (models[k].params(), models[k].arch) for k in HEAD_KEYS[method]}
        with torch.no_grad():
            wave = neural_forward(torch.from_numpy(noisy.samples), heads, method, cfg.n_taps,
                                  cfg.reg, cfg.stft, cfg.xi_floor, cfg.xi_ceil)
        return Waveform(wave.numpy(), noisy.sample_rate), diagnostics
    elif method in ("masking", "direct"):
        raise ValueError(f"method {method!r} requires the neural estimator")
    else:
        if estimator == "oracle":
            if speech is None or noise is None:
                raise ValueError("oracle estimation requires the speech and noise tracks")
            estimates = est.oracle_estimate(_spec(speech, cfg), _spec(noise, cfg), cfg.n_taps,
                                            smoothing, xi_floor=cfg.xi_floor, xi_ceil=cfg.xi_ceil)
        else:
            estimates = est.model_based_estimate(y_spec, cfg.n_taps, smoothing, cfg.beta,
                                                 cfg.noise_frames, xi_floor=cfg.xi_floor,
                                                 xi_ceil=cfg.xi_ceil)
        if method == "wiener":
            out = apply_min_gain(wiener_gain(estimates.xi) * y_spec, y_spec, cfg.reg.min_gain_db)
        else:
            out, diagnostics = enhance(y_spec, estimates, cfg.reg)
    wave = synthesize(out, cfg.stft, n_samples)
    return Waveform(wave.numpy(), noisy.sample_rate), diagnostics
