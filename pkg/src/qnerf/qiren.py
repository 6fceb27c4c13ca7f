"""QIREN implicit layers: classical pre-map, data re-uploading circuit,
per-qubit Z readout, and stacks described by strings like ``"2L+4S"``.

Two circuit layouts are available:

``euler`` (default)
    each re-upload is ``U_ent * U_rot * U_enc``: per-qubit RZ/RY data
    rotations, an RZ-RY-RZ Euler rotation with trainable angles, then a CZ
    ring. A layer has ``2n`` data slots and ``3nS`` trainable angles.

``strongly-entangling``
    each re-upload is two (Euler, CZ ring) sublayers followed by one RZ data
    rotation per qubit, with a trailing pair of trainable sublayers. A layer
    has ``n`` data slots and ``6n(S+1)`` trainable angles.

The ``qiren`` stack profile combines the second layout with a batch-norm on
the pre-mapped angles and counts ``xL`` as hidden layers after the input
layer; with 8 qubits, 8 inputs and 3 outputs it gives the reference colour
network sizes (395 for 1L+1S up to 1,339 for 3L+4S).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import qsim
from .diff import quantum_expectations
from .qsim import CircuitProgram, Op, Slot

__all__ = [
    "QIREN_MAX_QUBITS",
    "CapacityError",
    "DimError",
    "QirenLayerSpec",
    "QirenStackSpec",
    "build_layer_program",
    "ring_edges",
    "angle_premap",
    "QirenLayer",
    "QirenStack",
    "qiren_forward",
    "count_params",
    "parse_stack_spec",
]

QIREN_MAX_QUBITS = 8
LAYOUTS = ("euler", "strongly-entangling")
PROFILES = ("default", "qiren")


class CapacityError(ValueError):
    pass


class DimError(ValueError):
    pass


def ring_edges(n: int) -> list[tuple[int, int]]:
    """CZ ring ``(q, q+1 mod n)``; a single edge for two qubits, none for one."""
    if n < 2:
        return []
    if n == 2:
        return [(0, 1)]
    return [(q, (q + 1) % n) for q in range(n)]


@dataclass(frozen=True)
class QirenLayerSpec:
    n_qubits: int = 8
    reuploads: int = 1
    in_dim: int = 3
    layout: str = "euler"
    norm: bool = False

    def __post_init__(self):
        if self.n_qubits > QIREN_MAX_QUBITS:
            raise CapacityError(f"{self.n_qubits} qubits exceeds the {QIREN_MAX_QUBITS}-qubit simulator cap")
        if self.n_qubits < 1 or self.reuploads < 1 or self.in_dim < 1:
            raise ValueError(f"invalid layer spec {self}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")

    @property
    def n_features(self) -> int:
        """Number of data angles the pre-map must produce."""
        return 2 * self.n_qubits if self.layout == "euler" else self.n_qubits

    @property
    def n_angles(self) -> int:
        n, s = self.n_qubits, self.reuploads
        return 3 * n * s if self.layout == "euler" else 6 * n * (s + 1)

    def param_count(self) -> int:
        f = self.n_features
        return self.in_dim * f + f + self.n_angles + (2 * f if self.norm else 0)


def build_layer_program(spec: QirenLayerSpec) -> CircuitProgram:
    """Assemble the re-uploading circuit for one layer.

    Parameter ``p[3k + j]`` is Euler angle ``j`` (phi, theta, psi) of the
    ``k``-th (block, qubit) pair in program order.
    """
    n = spec.n_qubits
    ops: list[Op] = []
    counter = iter(range(spec.n_angles))

    def euler(label):
        for q in range(n):
            phi, theta, psi = next(counter), next(counter), next(counter)
            ops.append(Op("RZ", (q,), Slot.param(phi), label))
            ops.append(Op("RY", (q,), Slot.param(theta), label))
            ops.append(Op("RZ", (q,), Slot.param(psi), label))

    def ring(label):
        for a, b in ring_edges(n):
            ops.append(Op("CZ", (a, b), None, label))

    for s in range(spec.reuploads):
        if spec.layout == "euler":
            lab = f"upload {s}"
            for q in range(n):
                ops.append(Op("RZ", (q,), Slot.feature(2 * q), lab + " enc"))
                ops.append(Op("RY", (q,), Slot.feature(2 * q + 1), lab + " enc"))
            euler(lab + " rot")
            ring(lab + " ent")
        else:
            for k in range(2):
                euler(f"upload {s} rot{k}")
                ring(f"upload {s} ent{k}")
            for q in range(n):
                ops.append(Op("RZ", (q,), Slot.feature(q), f"upload {s} enc"))
    if spec.layout == "strongly-entangling":
        for k in range(2):
            euler(f"final rot{k}")
            ring(f"final ent{k}")
    return CircuitProgram(n, ops)


def angle_premap(x, weight, bias=None):
    """Affine map from input features to data-rotation angles: ``x W^T + b``."""
    as_np = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(np.asarray(x, dtype=float)) if as_np else x
    w = weight if isinstance(weight, torch.Tensor) else torch.as_tensor(np.asarray(weight, dtype=float))
    if w.ndim != 2 or xt.shape[-1] != w.shape[1]:
        raise DimError(f"input dim {xt.shape[-1]} does not match pre-map weight {tuple(w.shape)}")
    out = xt @ w.T
    if bias is not None:
        b = bias if isinstance(bias, torch.Tensor) else torch.as_tensor(np.asarray(bias, dtype=float))
        if b.shape != (w.shape[0],):
            raise DimError(f"bias shape {tuple(b.shape)} != ({w.shape[0]},)")
        out = out + b
    return out.detach().numpy() if as_np else out


@dataclass(frozen=True)
class QirenStackSpec:
    layers: tuple[QirenLayerSpec, ...] = ()
    out_dim: int = 0
    profile: str = "default"

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.in_dim != a.n_qubits:
                raise DimError(f"layer expects {b.in_dim} inputs but previous layer reads out {a.n_qubits}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim if self.layers else 0

    def param_count(self) -> int:
        if not self.layers:
            return 0
        n_last = self.layers[-1].n_qubits
        return sum(l.param_count() for l in self.layers) + n_last * self.out_dim + self.out_dim

    def to_string(self) -> str:
        if not self.layers:
            return "0L+0S"
        s = {l.reuploads for l in self.layers}
        if len(s) != 1:
            raise ValueError("mixed re-upload counts have no xL+yS form")
        n_layers = len(self.layers) - (1 if self.profile == "qiren" else 0)
        return f"{n_layers}L+{s.pop()}S"


_SPEC_RE = re.compile(r"^\s*(\d+)\s*L\s*\+\s*(\d+)\s*S\s*$", re.IGNORECASE)


def parse_stack_spec(
    text: str,
    n_qubits: int = 8,
    in_dim: int = 3,
    out_dim: int = 3,
    profile: str = "default",
) -> QirenStackSpec:
    """``"xL+yS"`` -> stack skeleton.

    ``default``: x quantum layers in the ``euler`` layout. ``qiren``: x + 1
    batch-normed ``strongly-entangling`` layers (x hidden after the input one).
    """
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse QIREN spec {text!r}; expected e.g. '2L+4S'")
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}, got {profile!r}")
    n_layers, s = int(m.group(1)), int(m.group(2))
    if s < 1 or n_layers < (0 if profile == "qiren" else 1):
        raise ValueError(f"QIREN spec {text!r} needs at least one layer and one re-upload")
    if profile == "qiren":
        n_layers += 1
        layout, norm = "strongly-entangling", True
    else:
        layout, norm = "euler", False
    layers = tuple(
        QirenLayerSpec(n_qubits, s, in_dim if i == 0 else n_qubits, layout, norm) for i in range(n_layers)
    )
    return QirenStackSpec(layers, out_dim, profile)


# ---------------------------------------------------------------------------


def _uniform(gen, shape, bound):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


class QirenLayer(nn.Module):
    """Pre-map -> (optional batch-norm) -> circuit -> per-qubit <Z>."""

    def __init__(self, spec: QirenLayerSpec, generator=None, init: str = "uniform", method: str = "adjoint"):
        super().__init__()
        self.spec = spec
        self.method = method
        self.program = build_layer_program(spec)
        bound = 1.0 / math.sqrt(spec.in_dim)
        self.weight = nn.Parameter(_uniform(generator, (spec.n_features, spec.in_dim), bound))
        self.bias = nn.Parameter(_uniform(generator, (spec.n_features,), bound))
        angle_bound = math.pi if init == "uniform" else 0.01
        self.angles = nn.Parameter(_uniform(generator, (spec.n_angles,), angle_bound))
        self.norm = nn.BatchNorm1d(spec.n_features, dtype=torch.float64) if spec.norm else None

    def data_angles(self, x: torch.Tensor) -> torch.Tensor:
        a = angle_premap(x, self.weight, self.bias)
        if self.norm is not None:
            a = self.norm(a)
        return a

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-1]
        a = self.data_angles(x.reshape(-1, x.shape[-1]))
        z = quantum_expectations(self.program, self.angles, a, self.method)
        return z.reshape(*lead, self.spec.n_qubits)


class QirenStack(nn.Module):
    """Chain of QIREN layers with a final linear readout."""

    def __init__(self, spec: QirenStackSpec, generator=None, init: str = "uniform", method: str = "adjoint"):
        super().__init__()
        if not spec.layers:
            raise ValueError("a QIREN stack needs at least one layer")
        self.spec = spec
        self.layers = nn.ModuleList(QirenLayer(l, generator, init, method) for l in spec.layers)
        n = spec.layers[-1].n_qubits
        bound = 1.0 / math.sqrt(n)
        self.readout_weight = nn.Parameter(_uniform(generator, (spec.out_dim, n), bound))
        self.readout_bias = nn.Parameter(_uniform(generator, (spec.out_dim,), bound))

    @property
    def in_dim(self) -> int:
        return self.spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim

    def set_method(self, method: str) -> None:
        for layer in self.layers:
            layer.method = method

    def quantum_features(self, x: torch.Tensor) -> torch.Tensor:
        """Last layer's per-qubit <Z>, before the readout map; in [-1, 1]."""
        h = x
        for layer in self.layers:
            h = layer(h)
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.quantum_features(x) @ self.readout_weight.T + self.readout_bias


def qiren_forward(stack: QirenStack, x):
    """Run ``stack`` on ``x``; numpy in, numpy out, otherwise differentiable."""
    as_np = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(np.asarray(x, dtype=float)) if as_np else x
    if xt.shape[-1] != stack.in_dim:
        raise DimError(f"stack expects {stack.in_dim} inputs, got {xt.shape[-1]}")
    out = stack(xt)
    return out.detach().numpy() if as_np else out


def count_params(stack) -> int:
    """Trainable scalars of a stack (module or skeleton)."""
    if isinstance(stack, QirenStackSpec):
        return stack.param_count()
    return sum(p.numel() for p in stack.parameters() if p.requires_grad)
