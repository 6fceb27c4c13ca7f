"""Reverse-mode plumbing: graph evaluation, Adam, LR schedule, quantum node,
checkpoint container.

Classical tensors ride on torch autograd. The quantum node is a custom
autograd function whose backward pass calls the simulator's adjoint (or
parameter-shift) engine, so circuit gradients never go through torch.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import qsim

__all__ = [
    "GraphError",
    "NonFiniteGradient",
    "ScheduleError",
    "CheckpointError",
    "forward_backward",
    "AdamState",
    "adam_step",
    "LrSchedule",
    "lr_at",
    "QuantumExpectation",
    "quantum_expectations",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]


class GraphError(RuntimeError):
    """The evaluated graph is not differentiable with respect to its inputs."""


class NonFiniteGradient(FloatingPointError):
    pass


class ScheduleError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


def forward_backward(fn: Callable[..., torch.Tensor], inputs: Sequence | Mapping, upstream=None):
    """Evaluate ``fn`` on ``inputs`` and return ``(output, gradients)``.

    ``inputs`` may be a sequence (positional) or mapping (keyword) of array
    likes; gradients come back in the same structure as float64 numpy arrays.
    A non-scalar output is contracted with ``upstream`` (default: ones).
    """
    keyed = isinstance(inputs, Mapping)
    names = list(inputs) if keyed else list(range(len(inputs)))
    tensors = {}
    for k in names:
        v = inputs[k]
        t = v.detach().clone() if isinstance(v, torch.Tensor) else torch.as_tensor(np.asarray(v, dtype=float))
        tensors[k] = t.to(torch.float64).requires_grad_(True)
    out = fn(**tensors) if keyed else fn(*[tensors[k] for k in names])
    if not isinstance(out, torch.Tensor):
        raise GraphError(f"graph output must be a tensor, got {type(out).__name__}")
    if not out.requires_grad:
        raise GraphError("graph output is not connected to any input")
    up = torch.ones_like(out) if upstream is None else torch.as_tensor(upstream, dtype=out.dtype).reshape(out.shape)
    grads = torch.autograd.grad(out, [tensors[k] for k in names], grad_outputs=up, allow_unused=True)
    result = {
        k: (np.zeros(tuple(tensors[k].shape)) if g is None else g.detach().numpy().copy())
        for k, g in zip(names, grads)
    }
    out_np = out.detach().numpy().copy()
    return out_np, (result if keyed else [result[k] for k in names])


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {f"{prefix}.m.{k}": t for k, t in self.m.items()}
        out.update({f"{prefix}.v.{k}": t for k, t in self.v.items()})
        return out


@torch.no_grad()
def adam_step(state: AdamState, params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None], lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters whose gradient is ``None`` are left untouched (their moments
    do not decay). Raises :class:`NonFiniteGradient` before touching anything
    if any gradient holds a NaN or infinity.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {tuple(m.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class LrSchedule:
    """Sine-shaped warmup from ``pre_warmup_lr`` then log-linear decay."""

    pre_warmup_lr: float = 1e-8
    peak_lr: float = 1e-2
    final_lr: float = 1e-4
    warmup_steps: int = 0
    total_steps: int = 30000

    def __post_init__(self):
        if self.total_steps <= 0 or not 0 <= self.warmup_steps < self.total_steps:
            raise ScheduleError("need 0 <= warmup_steps < total_steps")
        if min(self.pre_warmup_lr, self.peak_lr, self.final_lr) <= 0:
            raise ScheduleError("learning rates must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ScheduleError(f"step {step} outside [0, {schedule.total_steps}]")
    s = schedule
    if step < s.warmup_steps:
        ramp = math.sin(0.5 * math.pi * step / s.warmup_steps)
        return s.pre_warmup_lr + (s.peak_lr - s.pre_warmup_lr) * ramp
    t = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    if t == 1.0:
        return s.final_lr
    return math.exp(math.log(s.peak_lr) * (1 - t) + math.log(s.final_lr) * t)


# ---------------------------------------------------------------------------
# quantum node


class QuantumExpectation(torch.autograd.Function):
    """Per-qubit ``<Z>`` of a circuit; backward via the simulator."""

    @staticmethod
    def forward(ctx, params, features, program, method):
        p = params.detach().cpu().numpy().astype(np.float64)
        f = features.detach().cpu().numpy().astype(np.float64)
        state = qsim.run_circuit(program, p, f)
        ctx.program, ctx.method = program, method
        ctx.save_for_backward(params, features)
        return torch.as_tensor(qsim.expectation(state), dtype=features.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        params, features = ctx.saved_tensors
        p = params.detach().cpu().numpy().astype(np.float64)
        f = features.detach().cpu().numpy().astype(np.float64)
        up = grad_out.detach().cpu().numpy().astype(np.float64)
        if ctx.method == "adjoint":
            dp, df = qsim.adjoint_gradient(ctx.program, p, f, upstream=up)
        elif ctx.method == "parameter-shift":
            jp = qsim.parameter_shift_gradient(ctx.program, p, f, wrt="params")
            jf = qsim.parameter_shift_gradient(ctx.program, p, f, wrt="features")
            dp = np.einsum("bpq,bq->p", jp, up)
            df = np.einsum("bfq,bq->bf", jf, up)
        else:
            raise GraphError(f"unknown quantum differentiation method {ctx.method!r}")
        return (
            torch.as_tensor(dp, dtype=params.dtype),
            torch.as_tensor(df, dtype=features.dtype),
            None,
            None,
        )


def quantum_expectations(program: qsim.CircuitProgram, params: torch.Tensor, features: torch.Tensor, method: str = "adjoint"):
    """Differentiable ``(B, n_qubits)`` readout for batched ``features``."""
    if features.ndim != 2:
        raise GraphError(f"features must be (batch, {program.n_features}), got {tuple(features.shape)}")
    return QuantumExpectation.apply(params, features, program, method)


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: MAGIC | u32 version | u64 header length | header JSON | payload |
#         sha256 of everything before it
# payload holds each tensor's raw little-endian bytes at its header offset.

MAGIC = b"QNERFCK\x00"
CHECKPOINT_VERSION = 1
_DTYPES = {"float64", "float32", "int64", "int32", "uint8", "bool"}


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor | np.ndarray], meta: Mapping | None = None) -> None:
    """Write named tensors plus JSON metadata atomically."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dt} for {name!r}")
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for c in chunks:
        buf.write(c)
    body = buf.getvalue()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read and fully verify a checkpoint; returns ``(tensors, meta)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    start = len(MAGIC) + 12
    try:
        header = json.loads(body[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad header") from exc
    payload = body[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(e["dtype"], copy=True))
    return tensors, header["meta"]
