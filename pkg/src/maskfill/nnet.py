"""Small time-conditioned convolutional network with exact gradients.

This is the shared backbone for the mask-prior denoiser and the field
imputer: a stack of 3x3 stride-1 convolutions (spatial shape preserved),
each followed by FiLM conditioning on a sinusoidal embedding of the time
input and a GELU, finished by a 3x3 output convolution. The output head
is either a per-pixel softmax over channels (class probabilities) or
linear.

Everything runs in float64 on CPU via torch; parameters are plain
tensors in a canonical order so checkpoints are raw payload dumps, and
gradients come from reverse-mode autodiff (checked against central
finite differences in the test suite). He-normal initialisation, with
the FiLM projections and the final layer zero-initialised so the initial
softmax output is exactly uniform.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import rng
from .grids import atomic_write_bytes

__all__ = [
    "ConvNetSpec",
    "NetParams",
    "AdamState",
    "NumericsError",
    "simplex_project",
    "time_embedding",
    "forward",
    "forward_batch",
    "param_grad",
    "value_and_param_grad",
    "input_grad",
    "init_params",
    "init_adam",
    "adam_step",
    "save_params",
    "load_params",
]

DTYPE = torch.float64

PARAMS_MAGIC = b"OAMW"
PARAMS_VERSION = 1


class NumericsError(FloatingPointError):
    """Non-finite value encountered inside training or sampling."""


@dataclass(frozen=True)
class ConvNetSpec:
    in_channels: int
    hidden_channels: int
    out_channels: int
    n_blocks: int = 4
    time_embed_dim: int = 32
    output_head: str = "softmax-over-channels"  # or "linear"

    def __post_init__(self) -> None:
        for name in ("in_channels", "hidden_channels", "out_channels", "n_blocks", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.output_head not in ("softmax-over-channels", "linear"):
            raise ValueError(f"unknown output head {self.output_head!r}")


def param_names(spec: ConvNetSpec) -> list[str]:
    """Canonical parameter order (also the checkpoint payload order)."""
    names = ["time_w", "time_b"]
    for k in range(spec.n_blocks):
        names += [f"conv{k}_w", f"conv{k}_b", f"film{k}_w", f"film{k}_b"]
    names += ["out_w", "out_b"]
    return names


@dataclass(frozen=True)
class NetParams:
    """Network weights plus the record of how they were initialised."""

    spec: ConvNetSpec
    tensors: dict[str, torch.Tensor]
    seed: int = 0
    scheme: str = "he-normal"

    def named(self) -> list[tuple[str, torch.Tensor]]:
        return [(name, self.tensors[name]) for name in param_names(self.spec)]

    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def with_tensors(self, tensors: dict[str, torch.Tensor]) -> "NetParams":
        return replace(self, tensors=tensors)


def _shapes(spec: ConvNetSpec) -> dict[str, tuple[int, ...]]:
    e, h = spec.time_embed_dim, spec.hidden_channels
    shapes: dict[str, tuple[int, ...]] = {"time_w": (e, e), "time_b": (e,)}
    c_prev = spec.in_channels
    for k in range(spec.n_blocks):
        shapes[f"conv{k}_w"] = (h, c_prev, 3, 3)
        shapes[f"conv{k}_b"] = (h,)
        shapes[f"film{k}_w"] = (2 * h, e)
        shapes[f"film{k}_b"] = (2 * h,)
        c_prev = h
    shapes["out_w"] = (spec.out_channels, h, 3, 3)
    shapes["out_b"] = (spec.out_channels,)
    return shapes


def init_params(spec: ConvNetSpec, seed: int) -> NetParams:
    """He-normal convolutions and time MLP; FiLM projections and the final
    layer start at zero so time conditioning is initially inert and a
    softmax head outputs the uniform distribution."""
    gen = rng.stream(seed, "nnet.init")
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in _shapes(spec).items():
        if name.startswith(("film", "out")) or name.endswith("_b"):
            arr = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = gen.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))
    return NetParams(spec=spec, tensors=tensors, seed=seed, scheme="he-normal")


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1]; shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(math.log(1.0), math.log(1000.0), half, dtype=DTYPE)
    )
    angles = t.to(DTYPE).reshape(-1, 1) * freqs.reshape(1, -1) * 2.0 * math.pi
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def simplex_project(x: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Per-pixel softmax over the channel axis with explicit max subtraction.

    Subtracting the channel max first means an exactly-representable
    constant shift across channels produces bitwise-identical output,
    which is what makes the shift-invariance checks exact.
    """
    return torch.softmax(x - x.amax(dim=dim, keepdim=True), dim=dim)


def forward_batch(params: NetParams, x: torch.Tensor, t: torch.Tensor, *, apply_head: bool = True) -> torch.Tensor:
    """Run the network on a (B, C, H, W) batch with per-sample times (B,).

    ``apply_head=False`` returns the pre-head activations (the logits of a
    softmax head); guidance losses differentiate through those directly so
    their gradients stay bounded even when probabilities saturate.
    """
    spec = params.spec
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected (B, {spec.in_channels}, H, W) input, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite network input")
    p = params.tensors
    emb = time_embedding(t, spec.time_embed_dim)
    h_t = F.gelu(emb @ p["time_w"].T + p["time_b"])
    h = x
    for k in range(spec.n_blocks):
        h = F.conv2d(h, p[f"conv{k}_w"], p[f"conv{k}_b"], padding=1)
        film = h_t @ p[f"film{k}_w"].T + p[f"film{k}_b"]
        scale, shift = film.chunk(2, dim=1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = F.gelu(h)
    y = F.conv2d(h, p["out_w"], p["out_b"], padding=1)
    if apply_head and spec.output_head == "softmax-over-channels":
        y = simplex_project(y, dim=1)
    return y


def forward(params: NetParams, x: torch.Tensor, t: float) -> torch.Tensor:
    """Single-sample forward: (C, H, W) input, scalar time in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    tt = torch.tensor([t], dtype=DTYPE)
    return forward_batch(params, x.unsqueeze(0), tt).squeeze(0)


def _as_batch(x: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    if x.ndim == 3:
        x = x.unsqueeze(0)
        t = torch.tensor([float(t)], dtype=DTYPE)
    else:
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    return x, t


def value_and_param_grad(params: NetParams, x: torch.Tensor, t, loss_fn) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value plus exact parameter gradients in a single graph build."""
    x, tt = _as_batch(x, t)
    leaves = {name: tensor.detach().clone().requires_grad_(True) for name, tensor in params.tensors.items()}
    out = forward_batch(params.with_tensors(leaves), x, tt)
    loss = loss_fn(out)
    if not torch.isfinite(loss):
        raise NumericsError(f"non-finite loss {float(loss.detach())} in param_grad")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out_grads: dict[str, torch.Tensor] = {}
    for name, grad in zip(leaves.keys(), grads):
        tensor = grad if grad is not None else torch.zeros_like(leaves[name])
        if not torch.isfinite(tensor).all():
            raise NumericsError(f"non-finite gradient for parameter {name}")
        out_grads[name] = tensor.detach()
    return float(loss.detach()), out_grads


def param_grad(params: NetParams, x: torch.Tensor, t, loss_fn) -> dict[str, torch.Tensor]:
    """Exact gradients of a scalar loss of the network output w.r.t. every
    parameter. ``loss_fn`` maps the (B, C', H, W) output batch to a scalar
    (typically a batch mean)."""
    return value_and_param_grad(params, x, t, loss_fn)[1]


def input_grad(params: NetParams, x: torch.Tensor, t, loss_fn) -> torch.Tensor:
    """Gradient of a scalar loss of the network output w.r.t. the input.

    Compositions (e.g. a simplex projection applied before the network)
    belong inside ``loss_fn``'s caller: pass the pre-projection input here
    only if the projection is part of the forward call chain the caller
    builds. This function differentiates through exactly what it runs:
    ``loss_fn(forward(params, x, t))``.
    """
    single = x.ndim == 3
    x, tt = _as_batch(x, t)
    leaf = x.detach().clone().requires_grad_(True)
    out = forward_batch(params, leaf, tt)
    loss = loss_fn(out)
    if not torch.isfinite(loss):
        raise NumericsError(f"non-finite loss {float(loss.detach())} in input_grad")
    (grad,) = torch.autograd.grad(loss, leaf)
    if not torch.isfinite(grad).all():
        raise NumericsError("non-finite input gradient")
    grad = grad.detach()
    return grad.squeeze(0) if single else grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    lr: float
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: NetParams, lr: float) -> AdamState:
    zeros = lambda: {name: torch.zeros_like(t) for name, t in params.tensors.items()}
    return AdamState(lr=lr, m=zeros(), v=zeros())


def adam_step(state: AdamState, params: NetParams, grads: dict[str, torch.Tensor]) -> tuple[AdamState, NetParams]:
    """One bias-corrected Adam update; pure (returns new state and params)."""
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_m: dict[str, torch.Tensor] = {}
    new_v: dict[str, torch.Tensor] = {}
    new_t: dict[str, torch.Tensor] = {}
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name], new_t[name] = m, v, theta - update
    return replace(state, m=new_m, v=new_v, step=step), params.with_tensors(new_t)


# ---------------------------------------------------------------------------
# Checkpoints: magic "OAMW", version u16, JSON spec header, raw f64 payload
# ---------------------------------------------------------------------------


def save_params(path, params: NetParams) -> None:
    spec = params.spec
    header = {
        "in_channels": spec.in_channels,
        "hidden_channels": spec.hidden_channels,
        "out_channels": spec.out_channels,
        "n_blocks": spec.n_blocks,
        "time_embed_dim": spec.time_embed_dim,
        "output_head": spec.output_head,
        "seed": params.seed,
        "scheme": params.scheme,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(t.detach().numpy(), dtype="<f8").tobytes() for _, t in params.named()
    )
    blob = (
        PARAMS_MAGIC
        + struct.pack("<H", PARAMS_VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + payload
    )
    atomic_write_bytes(path, blob)


def load_params(path) -> NetParams:
    from pathlib import Path

    raw = Path(path).read_bytes()
    if raw[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 6)
    header = json.loads(raw[10 : 10 + header_len].decode("utf-8"))
    spec = ConvNetSpec(
        in_channels=header["in_channels"],
        hidden_channels=header["hidden_channels"],
        out_channels=header["out_channels"],
        n_blocks=header["n_blocks"],
        time_embed_dim=header["time_embed_dim"],
        output_head=header["output_head"],
    )
    offset = 10 + header_len
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in _shapes(spec).items():
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(raw):
            raise ValueError(f"{path}: truncated checkpoint payload at {name}")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes in checkpoint")
    return NetParams(spec=spec, tensors=tensors, seed=header["seed"], scheme=header["scheme"])
