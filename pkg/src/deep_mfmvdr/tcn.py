"""Causal temporal convolutional network and its weight container.

Block layout (Conv-TasNet style, causal)::

    input 1x1 conv -> [ 1x1 conv -> PReLU -> norm -> dilated depthwise conv
                        -> PReLU -> norm -> 1x1 conv (+ residual) ] x blocks
                   -> PReLU -> 1x1 output conv

Sequences are ``(batch, channels, frames)``. The dilation of layer ``j`` in
each stack is ``2**j``.

Weight file layout (little-endian)::

    b"TCN1" | u32 header_len | JSON header | zero pad to 8 bytes
    | float32 tensors in header order | u32 CRC32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ChecksumError, ModelFormatError, ShapeMismatchError

MAGIC = b"TCN1"
NORM_EPS = 1e-8

__all__ = [
    "TcnArch", "TcnModel", "init_model", "expected_shapes", "forward",
    "tcn_apply", "save_model", "load_model", "model_to_bytes",
    "model_from_bytes", "MAGIC",
]


@dataclass(frozen=True)
class TcnArch:
    input_dim: int
    output_dim: int
    num_stacks: int = 2
    layers_per_stack: int = 4
    kernel_size: int = 3
    hidden_dim: int = 128
    bottleneck_dim: int = 64
    # "fln": per-frame layer norm (finite receptive field);
    # "cln": cumulative layer norm over all past frames
    norm: str = "fln"

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "num_stacks", "layers_per_stack",
                     "kernel_size", "hidden_dim", "bottleneck_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.norm not in ("fln", "cln"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def dilations(self) -> list[int]:
        return [2 ** j for _ in range(self.num_stacks) for j in range(self.layers_per_stack)]

    @property
    def receptive_field(self) -> int:
        """Receptive field in frames."""
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


def expected_shapes(arch: TcnArch) -> dict[str, tuple[int, ...]]:
    B, H, P = arch.bottleneck_dim, arch.hidden_dim, arch.kernel_size
    shapes = {"input.weight": (B, arch.input_dim), "input.bias": (B,)}
    for b in range(len(arch.dilations)):
        pre = f"blocks.{b}."
        shapes.update({
            pre + "conv1.weight": (H, B), pre + "conv1.bias": (H,),
            pre + "prelu1.weight": (1,),
            pre + "norm1.gain": (H,), pre + "norm1.bias": (H,),
            pre + "dconv.weight": (H, P), pre + "dconv.bias": (H,),
            pre + "prelu2.weight": (1,),
            pre + "norm2.gain": (H,), pre + "norm2.bias": (H,),
            pre + "conv2.weight": (B, H), pre + "conv2.bias": (B,),
        })
    shapes.update({"out_prelu.weight": (1,), "output.weight": (arch.output_dim, B),
                   "output.bias": (arch.output_dim,)})
    return shapes


@dataclass
class TcnModel:
    """Architecture plus named float32 tensors (immutable by convention)."""

    arch: TcnArch
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self):
        shapes = expected_shapes(self.arch)
        missing = set(shapes) - set(self.tensors)
        if missing:
            raise ShapeMismatchError(f"missing tensors: {sorted(missing)}")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise ShapeMismatchError(f"tensor {name!r}: expected shape {shape}, got {tuple(t.shape)}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tensor {name!r} has non-finite values")
        return self

    def params(self, requires_grad=False) -> dict[str, torch.Tensor]:
        """float64 torch copies of the tensors."""
        return {k: torch.tensor(v, dtype=torch.float64, requires_grad=requires_grad)
                for k, v in self.tensors.items()}

    @classmethod
    def from_params(cls, arch, params) -> "TcnModel":
        return cls(arch, {k: v.detach().cpu().numpy().astype(np.float32)
                          for k, v in params.items()}).validate()


def init_model(arch: TcnArch, seed: int, output_bias=None) -> TcnModel:
    """Seeded uniform fan-in initialization: weights and biases of a layer
    with fan-in ``f`` are drawn from U(-1/sqrt(f), 1/sqrt(f)); norm gains are
    one, norm biases zero, PReLU slopes 0.25."""
    rng = np.random.default_rng(seed)
    fan_in = {"input": arch.input_dim, "conv1": arch.bottleneck_dim,
              "dconv": arch.kernel_size, "conv2": arch.hidden_dim,
              "output": arch.bottleneck_dim}
    tensors = {}
    for name, shape in expected_shapes(arch).items():
        layer, kind = name.split(".")[-2:]
        if layer.startswith("prelu") or layer == "out_prelu":
            t = np.full(shape, 0.25)
        elif layer.startswith("norm"):
            t = np.ones(shape) if kind == "gain" else np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in[layer])
            t = rng.uniform(-bound, bound, size=shape)
        tensors[name] = t.astype(np.float32)
    if output_bias is not None:
        tensors["output.bias"] = np.asarray(output_bias, dtype=np.float32).reshape(arch.output_dim)
    return TcnModel(arch, tensors).validate()


class _BranchLog:
    """Records the PReLU sign patterns of one forward pass and replays them.

    Finite differencing through thousands of PReLU units keeps crossing kinks
    at any practical step; replaying the base point's pattern evaluates the
    same smooth piece whose derivative backprop returns.
    """

    active = None

    def __init__(self):
        self.masks, self.cursor, self.replay = [], 0, False

    def __enter__(self):
        _BranchLog.active = self
        return self

    def __exit__(self, *exc):
        _BranchLog.active = None

    def start_replay(self):
        self.replay, self.cursor = True, 0

    def mask(self, x):
        if not self.replay:
            self.masks.append(x >= 0)
            return self.masks[-1]
        m = self.masks[self.cursor]
        self.cursor += 1
        return m


def frozen_branches() -> _BranchLog:
    """Context manager: first forward pass records, later passes (after
    ``start_replay``) reuse the recorded PReLU branches."""
    return _BranchLog()


def _prelu(x, slope):
    log = _BranchLog.active
    positive = x >= 0 if log is None else log.mask(x)
    return torch.where(positive, x, slope * x)


def _pointwise(x, weight, bias):
    # (B, Cin, T) -> (B, Cout, T)
    return torch.einsum("oc,bct->bot", weight, x) + bias[:, None]


def _norm(x, gain, bias, kind, state):
    if kind == "fln":
        mean = x.mean(1, keepdim=True)
        var = ((x - mean) ** 2).mean(1, keepdim=True)
        return (x - mean) / torch.sqrt(var + NORM_EPS) * gain[:, None] + bias[:, None], None
    n_ch, n_t = x.shape[1], x.shape[2]
    s0, p0, c0 = state if state is not None else (0.0, 0.0, 0)
    cum_sum = s0 + torch.cumsum(x.sum(1), dim=-1)
    cum_pow = p0 + torch.cumsum((x ** 2).sum(1), dim=-1)
    count = c0 + n_ch * torch.arange(1, n_t + 1, dtype=x.dtype)
    mean = cum_sum / count
    var = cum_pow / count - mean ** 2
    y = (x - mean[:, None]) / torch.sqrt(var[:, None] + NORM_EPS)
    new_state = (cum_sum[:, -1:], cum_pow[:, -1:], c0 + n_ch * n_t)
    return y * gain[:, None] + bias[:, None], new_state


def tcn_apply(params: dict, arch: TcnArch, x: torch.Tensor, state: dict | None = None):
    """Functional forward pass on ``x`` of shape ``(batch, input_dim, T)``.

    ``state`` carries the causal history of every dilated convolution (and
    cumulative norm statistics); ``None`` means silence before frame 0.
    Returns ``(y, new_state)`` with ``y`` of shape ``(batch, output_dim, T)``.
    """
    if x.shape[1] != arch.input_dim:
        raise ValueError(f"expected {arch.input_dim} input features, got {x.shape[1]}")
    new_state = {}
    h = _pointwise(x, params["input.weight"], params["input.bias"])
    for b, dil in enumerate(arch.dilations):
        pre = f"blocks.{b}."
        g = _pointwise(h, params[pre + "conv1.weight"], params[pre + "conv1.bias"])
        g = _prelu(g, params[pre + "prelu1.weight"])
        g, new_state[pre + "norm1"] = _norm(g, params[pre + "norm1.gain"], params[pre + "norm1.bias"],
                                            arch.norm, state.get(pre + "norm1") if state else None)
        ctx = (arch.kernel_size - 1) * dil
        if state is not None and pre + "hist" in state:
            hist = state[pre + "hist"]
        else:
            hist = g.new_zeros(g.shape[0], g.shape[1], ctx)
        padded = torch.cat([hist, g], dim=-1)
        new_state[pre + "hist"] = padded[..., padded.shape[-1] - ctx:]
        g = F.conv1d(padded, params[pre + "dconv.weight"][:, None, :], params[pre + "dconv.bias"],
                     dilation=dil, groups=g.shape[1])
        g = _prelu(g, params[pre + "prelu2.weight"])
        g, new_state[pre + "norm2"] = _norm(g, params[pre + "norm2.gain"], params[pre + "norm2.bias"],
                                            arch.norm, state.get(pre + "norm2") if state else None)
        h = h + _pointwise(g, params[pre + "conv2.weight"], params[pre + "conv2.bias"])
    h = _prelu(h, params["out_prelu.weight"])
    return _pointwise(h, params["output.weight"], params["output.bias"]), new_state


def forward(model: TcnModel, features, state: dict | None = None):
    """Inference wrapper around :func:`tcn_apply` (float64, no autograd)."""
    x = torch.as_tensor(features, dtype=torch.float64)
    with torch.no_grad():
        return tcn_apply(model.params(), model.arch, x, state)


def model_to_bytes(model: TcnModel) -> bytes:
    model.validate()
    return _pack(model.arch, model.tensors)


def _pack(arch: TcnArch, tensors: dict) -> bytes:
    header = {"arch": asdict(arch),
              "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray(MAGIC + struct.pack("<I", len(hbytes)) + hbytes)
    buf += b"\0" * (-len(buf) % 8)
    for v in tensors.values():
        buf += np.ascontiguousarray(v, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def model_from_bytes(data: bytes) -> TcnModel:
    if len(data) < 12:
        raise ChecksumError("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch (truncated or corrupted file)")
    if body[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {body[:4]!r}")
    (hlen,) = struct.unpack("<I", body[4:8])
    try:
        header = json.loads(body[8:8 + hlen].decode("utf-8"))
        arch = TcnArch(**header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from exc
    offset = 8 + hlen
    offset += -offset % 8
    shapes = expected_shapes(arch)
    tensors = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in shapes:
            raise ShapeMismatchError(f"unexpected tensor {name!r}")
        if shape != shapes[name]:
            raise ShapeMismatchError(f"tensor {name!r}: expected shape {shapes[name]}, got {shape}")
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(body):
            raise ShapeMismatchError(f"tensor {name!r}: payload runs past end of file")
        tensors[name] = np.frombuffer(body[offset:end], dtype="<f4").astype(np.float32).reshape(shape)
        offset = end
    if offset != len(body):
        raise ShapeMismatchError(f"{len(body) - offset} trailing payload bytes")
    return TcnModel(arch, tensors).validate()


def save_model(model: TcnModel, path) -> None:
    data = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def load_model(path) -> TcnModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
