"""SI-SDR training of the estimator heads through the complete filter chain.

Gradients come from torch autograd for the STFT, TCNs, activations, PSD
factorisation and IFC construction, and from the hand-written adjoint of
the MFMVDR solve (:mod:`deep_mfmvdr.filters`). :func:`gradient_check`
compares them with central finite differences of the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import filters
from .errors import NonFiniteLossError
from .filters import RegularizationConfig
from .metrics import si_sdr, si_sdr_torch
from .pipeline import init_heads, neural_forward
from .stft import StftConfig
from .tcn import TcnModel, frozen_branches

__all__ = [
    "si_sdr", "Utterance", "TrainConfig", "loss_and_gradients", "batch_loss",
    "gradient_check", "GradProbe", "GradCheckReport", "train_toy", "overfit",
    "format_log_record",
]


@dataclass(frozen=True)
class Utterance:
    noisy: np.ndarray
    clean: np.ndarray
    uid: str = ""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    max_epochs: int = 50
    grad_clip_norm: float = 5.0
    batch_size: int = 2
    lr_halve_patience: int = 3
    early_stop_patience: int = 10
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    method: str = "mfmvdr"
    n_taps: int = 5
    reg: RegularizationConfig = field(default_factory=RegularizationConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    hidden_dim: int = 32
    bottleneck_dim: int = 16

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.lr_halve_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _heads(params: dict, models: dict) -> dict:
    return {k: (params[k], models[k].arch) for k in params}


def batch_loss(batch, params: dict, models: dict, cfg: TrainConfig, trim: int | None = None,
               return_floor: bool = False):
    """Mean negative SI-SDR over ``batch``; the first ``frame_len`` samples
    (STFT warm-up) are excluded from the measure."""
    trim = cfg.stft.frame_len if trim is None else trim
    heads = _heads(params, models)
    losses, floors = [], []
    for utt in batch:
        noisy = torch.from_numpy(np.asarray(utt.noisy, dtype=np.float64))
        clean = torch.from_numpy(np.asarray(utt.clean, dtype=np.float64))
        est, floor = neural_forward(noisy, heads, cfg.method, cfg.n_taps, cfg.reg, cfg.stft,
                                    return_floor=True)
        loss = -si_sdr_torch(est[trim:], clean[trim:])
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss on utterance {utt.uid!r}", utt.uid)
        losses.append(loss)
        floors.append(floor)
    total = torch.stack(losses).mean()
    return (total, floors) if return_floor else total


def loss_and_gradients(batch, models: dict, cfg: TrainConfig = TrainConfig()):
    """Loss and gradients of every tensor of every head.

    Returns ``(loss, grads)`` with ``grads[head][tensor]`` a float64 array.
    """
    params = {k: m.params(requires_grad=True) for k, m in models.items()}
    loss = batch_loss(batch, params, models, cfg)
    loss.backward()
    grads = {k: {name: p.grad.numpy().copy() for name, p in ps.items()}
             for k, ps in params.items()}
    return float(loss.detach()), grads


@dataclass(frozen=True)
class GradProbe:
    head: str
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    floor_changed: bool
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance


@dataclass
class GradCheckReport:
    probes: list

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.probes)

    @property
    def worst(self) -> GradProbe:
        return max(self.probes, key=lambda p: p.rel_error / p.tolerance)

    def lines(self):
        for p in self.probes:
            yield (f"{'PASS' if p.passed else 'FAIL'} head={p.head} tensor={p.tensor} "
                   f"index={list(p.index)} analytic={p.analytic:.9e} numeric={p.numeric:.9e} "
                   f"rel_err={p.rel_error:.3e} tol={p.tolerance:g}"
                   f"{' floor-changed' if p.floor_changed else ''}")


def _probe_plan(models: dict, per_head: int, rng) -> list:
    """At least one tensor of every block, plus input/output layers, per head;
    topped up with random tensors until ``per_head`` probes."""
    plan = []
    for key in sorted(models):
        names = list(models[key].tensors)
        groups = {}
        for name in names:
            group = ".".join(name.split(".")[:2]) if name.startswith("blocks.") else name.split(".")[0]
            groups.setdefault(group, []).append(name)
        chosen = [grp[rng.integers(len(grp))] for grp in groups.values()]
        while len(chosen) < per_head:
            chosen.append(names[rng.integers(len(names))])
        for name in chosen:
            shape = models[key].tensors[name].shape
            plan.append((key, name, tuple(int(rng.integers(s)) for s in shape)))
    return plan


def gradient_check(utterance: Utterance, models: dict, cfg: TrainConfig = TrainConfig(),
                   per_head: int = 20, seed: int = 0, rel_step: float = 1e-4,
                   tol: float = 1e-3, floor_tol: float = 1e-2,
                   max_probes: int | None = None) -> GradCheckReport:
    """Central finite differences of the loss against the analytic gradient.

    Each probed weight ``theta`` is perturbed by ``h = rel_step * max(|theta|,
    1e-2)``. Both evaluations reuse the PReLU branches of the base point.
    Probes whose perturbation changes the set of bins clamped by the minimum
    gain use ``floor_tol``.
    """
    rng = np.random.default_rng(seed)
    plan = _probe_plan(models, per_head, rng)
    if max_probes is not None:
        # round-robin over heads so a short run still touches every head
        by_head = [[q for q in plan if q[0] == k] for k in sorted(models)]
        plan = [q for tier in zip(*by_head) for q in tier][:max_probes]
    params = {k: m.params(requires_grad=True) for k, m in models.items()}
    branches = frozen_branches()
    with branches:
        loss, base_floor = batch_loss([utterance], params, models, cfg, return_floor=True)
    loss.backward()
    branches.start_replay()
    probes = []
    for key, name, idx in plan:
        analytic = float(params[key][name].grad[idx])
        p = params[key][name]
        theta = float(p.detach()[idx])
        h = rel_step * max(abs(theta), 1e-2)
        values, flips = [], False
        for sign in (1.0, -1.0):
            branches.start_replay()
            with torch.no_grad(), branches:
                p[idx] = theta + sign * h
                val, floor = batch_loss([utterance], params, models, cfg, return_floor=True)
                p[idx] = theta
            values.append(float(val))
            flips |= not torch.equal(floor[0], base_floor[0])
        numeric = (values[0] - values[1]) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-10)
        rel = abs(analytic - numeric) / scale
        probes.append(GradProbe(key, name, idx, analytic, numeric, rel, flips,
                                floor_tol if flips else tol))
    return GradCheckReport(probes)


def format_log_record(epoch: int, split: str, loss: float, lr: float, grad_norm: float) -> str:
    return f"epoch={epoch} split={split} loss={loss:.6f} lr={lr:.6e} grad_norm={grad_norm:.6f}"


def _split(dataset, fraction, seed):
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = max(1, int(round(fraction * len(dataset)))) if len(dataset) > 1 else 0
    val = [dataset[i] for i in order[:n_val]]
    train = [dataset[i] for i in order[n_val:]]
    return train, val


def _step(optimizer, params_flat, clip):
    """Clip, step, and return the norm of the gradient actually applied."""
    torch.nn.utils.clip_grad_norm_(params_flat, clip)
    applied = float(torch.linalg.vector_norm(torch.stack(
        [torch.linalg.vector_norm(p.grad) for p in params_flat])))
    optimizer.step()
    return applied


def _evaluate(dataset, params, models, cfg):
    with torch.no_grad():
        return float(batch_loss(dataset, params, models, cfg))


def train_toy(dataset, cfg: TrainConfig = TrainConfig(), init_seed: int = 0, models=None,
              log=None):
    """Adam training with global gradient-norm clipping, learning-rate
    halving and early stopping on the validation loss.

    Returns ``(best_models, log_lines)``. Epoch 0 is the untrained
    validation loss.
    """
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(init_seed)
    train, val = _split(dataset, cfg.val_fraction, init_seed)
    if not train or not val:
        raise ValueError("dataset too small for a train/validation split")
    if models is None:
        models = init_heads(cfg.method, cfg.n_taps, init_seed, cfg.hidden_dim, cfg.bottleneck_dim)
    params = {k: m.params(requires_grad=True) for k, m in models.items()}
    flat = [p for k in sorted(params) for _, p in sorted(params[k].items())]
    optimizer = torch.optim.Adam(flat, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    lines = []

    def emit(line):
        lines.append(line)
        if log is not None:
            log(line)

    best = _evaluate(val, params, models, cfg)
    best_models = {k: TcnModel.from_params(models[k].arch, params[k]) for k in params}
    emit(format_log_record(0, "val", best, cfg.lr, 0.0))
    lr, since_best, since_halve = cfg.lr, 0, 0
    rng = np.random.default_rng(init_seed + 1)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        norms, losses = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = batch_loss(batch, params, models, cfg)
            loss.backward()
            norms.append(_step(optimizer, flat, cfg.grad_clip_norm))
            losses.append(float(loss.detach()))
        emit(format_log_record(epoch, "train", float(np.mean(losses)), lr, max(norms)))
        val_loss = _evaluate(val, params, models, cfg)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"validation loss diverged at epoch {epoch}")
        emit(format_log_record(epoch, "val", val_loss, lr, max(norms)))
        if val_loss < best:
            best, since_best, since_halve = val_loss, 0, 0
            best_models = {k: TcnModel.from_params(models[k].arch, params[k]) for k in params}
        else:
            since_best += 1
            since_halve += 1
            if since_halve >= cfg.lr_halve_patience:
                lr *= 0.5
                since_halve = 0
                for group in optimizer.param_groups:
                    group["lr"] = lr
            if since_best >= cfg.early_stop_patience:
                emit(f"early_stop epoch={epoch}")
                break
    return best_models, lines


def overfit(utterance: Utterance, cfg: TrainConfig, steps: int = 50, init_seed: int = 0,
            models=None):
    """Fit a single utterance; returns ``(losses per step + final, models)``."""
    if models is None:
        models = init_heads(cfg.method, cfg.n_taps, init_seed, cfg.hidden_dim, cfg.bottleneck_dim)
    params = {k: m.params(requires_grad=True) for k, m in models.items()}
    flat = [p for k in sorted(params) for _, p in sorted(params[k].items())]
    optimizer = torch.optim.Adam(flat, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    losses = []
    for _ in range(steps):
        optimizer.zero_grad()
        loss = batch_loss([utterance], params, models, cfg)
        loss.backward()
        _step(optimizer, flat, cfg.grad_clip_norm)
        losses.append(float(loss.detach()))
    losses.append(_evaluate([utterance], params, models, cfg))
    return losses, {k: TcnModel.from_params(models[k].arch, params[k]) for k in params}


def set_adjoint_scale(scale: float):
    """Fault injection for the gradient checker: scale the MFMVDR adjoint."""
    filters.ADJOINT_SCALE = float(scale)
