"""Dense state-vector simulation of few-qubit parameterized circuits.

Conventions
-----------
* Little-endian qubit ordering: qubit ``q`` is bit ``q`` of the basis index.
  Ket labels in docstrings list qubit 0 first, so ``|10>`` is index 1.
* Rotations are ``R_P(t) = exp(-i t P / 2)`` for ``P`` in {X, Y, Z}.
* States may carry a leading batch axis: amplitudes of shape ``(B, 2**n)``.
  Trainable parameters are shared across the batch, data features are not.

Gates are applied in place on strided views of the amplitude tensor; the
full ``2**n x 2**n`` unitary is never built here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

MAX_QUBITS = 12

__all__ = [
    "MAX_QUBITS",
    "GateKind",
    "Gate",
    "Slot",
    "Op",
    "CircuitProgram",
    "StateVector",
    "Observable",
    "PER_QUBIT_Z",
    "InvalidQubit",
    "ParamArityError",
    "UnsupportedShiftGate",
    "apply_gate",
    "run_circuit",
    "expectation",
    "measure_probabilities",
    "adjoint_gradient",
    "parameter_shift_gradient",
]


class InvalidQubit(ValueError):
    """A gate addresses a qubit that does not exist."""


class ParamArityError(ValueError):
    """Parameter or feature vector length does not match the program."""


class UnsupportedShiftGate(ValueError):
    """A differentiable slot feeds a gate without a two-term shift rule."""


class GateKind(str, enum.Enum):
    RX = "RX"
    RY = "RY"
    RZ = "RZ"
    X = "X"
    H = "H"
    CZ = "CZ"
    CNOT = "CNOT"

    @property
    def arity(self) -> int:
        return 2 if self in (GateKind.CZ, GateKind.CNOT) else 1

    @property
    def is_rotation(self) -> bool:
        return self in _ROTATIONS


_ROTATIONS = frozenset({GateKind.RX, GateKind.RY, GateKind.RZ})

_SQ2 = 1.0 / np.sqrt(2.0)
_PAULI = {
    GateKind.RX: np.array([[0, 1], [1, 0]], dtype=complex),
    GateKind.RY: np.array([[0, -1j], [1j, 0]], dtype=complex),
    GateKind.RZ: np.array([[1, 0], [0, -1]], dtype=complex),
}


def _rotation_matrix(kind: GateKind, angle: float) -> np.ndarray:
    c, s = np.cos(angle / 2), np.sin(angle / 2)
    if kind is GateKind.RX:
        return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)
    if kind is GateKind.RY:
        return np.array([[c, -s], [s, c]], dtype=complex)
    return np.array([[np.exp(-0.5j * angle), 0], [0, np.exp(0.5j * angle)]], dtype=complex)


@dataclass(frozen=True)
class Gate:
    """A concrete gate: kind, target qubits and (for rotations) an angle.

    For two-qubit gates ``targets[0]`` is the control (CNOT) and
    :meth:`matrix` is written in the basis ``|t0 t1>`` with ``t0`` as the
    most significant label, i.e. the textbook CNOT matrix.
    """

    kind: GateKind
    targets: tuple[int, ...]
    angle: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", GateKind(self.kind))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if len(self.targets) != self.kind.arity:
            raise ValueError(f"{self.kind.value} takes {self.kind.arity} target(s), got {self.targets}")
        if len(set(self.targets)) != len(self.targets):
            raise InvalidQubit(f"repeated target in {self.targets}")
        if any(t < 0 for t in self.targets):
            raise InvalidQubit(f"negative qubit index in {self.targets}")
        if self.kind.is_rotation and self.angle is None:
            raise ValueError(f"{self.kind.value} requires an angle")
        if not self.kind.is_rotation and self.angle is not None:
            raise ValueError(f"{self.kind.value} takes no angle")

    def matrix(self) -> np.ndarray:
        k = self.kind
        if k.is_rotation:
            return _rotation_matrix(k, float(self.angle))
        if k is GateKind.X:
            return np.array([[0, 1], [1, 0]], dtype=complex)
        if k is GateKind.H:
            return _SQ2 * np.array([[1, 1], [1, -1]], dtype=complex)
        if k is GateKind.CZ:
            return np.diag([1, 1, 1, -1]).astype(complex)
        return np.array(
            [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
        )


@dataclass(frozen=True)
class Slot:
    """Where a rotation angle comes from: a parameter, a feature, or a constant."""

    source: str  # "param" | "feature" | "const"
    index: int = -1
    value: float = 0.0

    @classmethod
    def param(cls, i: int) -> "Slot":
        return cls("param", int(i))

    @classmethod
    def feature(cls, i: int) -> "Slot":
        return cls("feature", int(i))

    @classmethod
    def const(cls, v: float) -> "Slot":
        return cls("const", -1, float(v))

    def __str__(self) -> str:
        if self.source == "const":
            return f"{self.value:.6g}"
        return f"{'p' if self.source == 'param' else 'f'}[{self.index}]"


@dataclass(frozen=True)
class Op:
    kind: GateKind
    targets: tuple[int, ...]
    slot: Slot | None = None
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", GateKind(self.kind))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if not self.kind.is_rotation and self.slot is not None:
            raise UnsupportedShiftGate(f"{self.kind.value} is a fixed gate and cannot take angle slot {self.slot}")
        if self.kind.is_rotation and self.slot is None:
            raise ValueError(f"{self.kind.value} needs an angle slot")
        if len(self.targets) != self.kind.arity or len(set(self.targets)) != len(self.targets):
            raise InvalidQubit(f"bad targets {self.targets} for {self.kind.value}")


class CircuitProgram:
    """Immutable gate list with angle slots resolved at run time."""

    def __init__(self, n_qubits: int, ops: Iterable[Op]):
        if not 1 <= n_qubits <= MAX_QUBITS:
            raise InvalidQubit(f"n_qubits must be in 1..{MAX_QUBITS}, got {n_qubits}")
        self._n = int(n_qubits)
        self._ops = tuple(ops)
        params, feats = set(), set()
        for op in self._ops:
            if any(t >= n_qubits or t < 0 for t in op.targets):
                raise InvalidQubit(f"{op.kind.value}{op.targets} on a {n_qubits}-qubit register")
            if op.slot is not None:
                if op.slot.source == "param":
                    params.add(op.slot.index)
                elif op.slot.source == "feature":
                    feats.add(op.slot.index)
        for name, idx in (("parameter", params), ("feature", feats)):
            if idx != set(range(len(idx))):
                raise ValueError(f"{name} indices must be dense 0..{len(idx) - 1}, got {sorted(idx)}")
        self._n_params = len(params)
        self._n_features = len(feats)

    @property
    def n_qubits(self) -> int:
        return self._n

    @property
    def ops(self) -> tuple[Op, ...]:
        return self._ops

    @property
    def n_params(self) -> int:
        return self._n_params

    @property
    def n_features(self) -> int:
        return self._n_features

    def __len__(self) -> int:
        return len(self._ops)

    def __repr__(self) -> str:
        return (
            f"CircuitProgram(n_qubits={self._n}, ops={len(self._ops)}, "
            f"params={self._n_params}, features={self._n_features})"
        )

    def describe(self) -> str:
        """Plain-text listing: gates, slot map and per-block structure."""
        lines = [
            f"qubits: {self._n}",
            f"gates: {len(self._ops)}",
            f"trainable parameters: {self._n_params}",
            f"data features: {self._n_features}",
            "",
        ]
        current = None
        for i, op in enumerate(self._ops):
            if op.label != current:
                current = op.label
                lines.append(f"[{current or 'ops'}]")
            tgt = ",".join(str(t) for t in op.targets)
            angle = f"({op.slot})" if op.slot is not None else ""
            lines.append(f"  {i:4d}  {op.kind.value}{angle} q{tgt}")
        slots: dict[str, list[str]] = {}
        for i, op in enumerate(self._ops):
            if op.slot is not None and op.slot.source != "const":
                slots.setdefault(str(op.slot), []).append(f"{i}:{op.kind.value}q{op.targets[0]}")
        lines.append("")
        lines.append("slot map:")
        key = lambda s: (s[0], int(s[2:-1]))  # noqa: E731
        for name in sorted(slots, key=key):
            lines.append(f"  {name} -> {', '.join(slots[name])}")
        return "\n".join(lines)


@dataclass
class StateVector:
    """Complex amplitudes of an ``n``-qubit register, optionally batched."""

    n_qubits: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.amplitudes = np.asarray(self.amplitudes)
        if self.amplitudes.shape[-1] != 1 << self.n_qubits:
            raise ValueError(
                f"{self.n_qubits} qubits need {1 << self.n_qubits} amplitudes, got {self.amplitudes.shape[-1]}"
            )

    @classmethod
    def zero(cls, n_qubits: int, batch: int | None = None, dtype=np.complex128) -> "StateVector":
        if not 1 <= n_qubits <= MAX_QUBITS:
            raise InvalidQubit(f"n_qubits must be in 1..{MAX_QUBITS}, got {n_qubits}")
        shape = (1 << n_qubits,) if batch is None else (batch, 1 << n_qubits)
        amp = np.zeros(shape, dtype=dtype)
        amp[..., 0] = 1.0
        return cls(n_qubits, amp)

    @property
    def batched(self) -> bool:
        return self.amplitudes.ndim == 2

    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.amplitudes) ** 2, axis=-1))

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amplitudes.copy())


@dataclass(frozen=True)
class Observable:
    kind: str = "PerQubitZ"


PER_QUBIT_Z = Observable()


# ---------------------------------------------------------------------------
# kernels on a (B, 2**n) array viewed as (B, 2, ..., 2); axis for qubit q is
# 1 + (n - 1 - q).


def _tensor(psi: np.ndarray, n: int) -> np.ndarray:
    return psi.reshape((psi.shape[0],) + (2,) * n)


def _idx(n: int, **bits: int) -> tuple:
    sl = [slice(None)] * (n + 1)
    for q, b in bits.items():
        sl[1 + n - 1 - int(q[1:])] = b
    return tuple(sl)


def _bcast(v, ndim: int):
    """Reshape a per-sample (B,) coefficient to broadcast against a sliced view."""
    v = np.asarray(v)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (ndim - 1))


def _apply_1q(psi: np.ndarray, n: int, q: int, u) -> None:
    """u: (2, 2) shared, or tuple of four (B,) arrays (u00, u01, u10, u11)."""
    t = _tensor(psi, n)
    i0, i1 = _idx(n, **{f"q{q}": 0}), _idx(n, **{f"q{q}": 1})
    a = t[i0].copy()
    b = t[i1]
    if isinstance(u, np.ndarray):
        u00, u01, u10, u11 = u[0, 0], u[0, 1], u[1, 0], u[1, 1]
    else:
        nd = a.ndim
        u00, u01, u10, u11 = (_bcast(x, nd) for x in u)
    t[i0] = u00 * a + u01 * b
    t[i1] = u10 * a + u11 * b


def _apply_diag1(psi: np.ndarray, n: int, q: int, d0, d1) -> None:
    t = _tensor(psi, n)
    nd = n
    t[_idx(n, **{f"q{q}": 0})] *= _bcast(d0, nd)
    t[_idx(n, **{f"q{q}": 1})] *= _bcast(d1, nd)


def _apply_x(psi: np.ndarray, n: int, q: int, **ctrl: int) -> None:
    t = _tensor(psi, n)
    i0, i1 = _idx(n, **{f"q{q}": 0}, **ctrl), _idx(n, **{f"q{q}": 1}, **ctrl)
    a = t[i0].copy()
    t[i0] = t[i1]
    t[i1] = a


def _apply_cz(psi: np.ndarray, n: int, a: int, b: int) -> None:
    t = _tensor(psi, n)
    t[_idx(n, **{f"q{a}": 1, f"q{b}": 1})] *= -1


def _rotation_coeffs(kind: GateKind, angle):
    """Matrix entries of a rotation for scalar or (B,) angles."""
    c, s = np.cos(np.asarray(angle) / 2), np.sin(np.asarray(angle) / 2)
    if kind is GateKind.RX:
        return c, -1j * s, -1j * s, c
    return c, -s, s, c


def _apply(psi: np.ndarray, n: int, kind: GateKind, targets: Sequence[int], angle=None, dagger=False) -> None:
    if kind is GateKind.RZ:
        a = -np.asarray(angle) if dagger else np.asarray(angle)
        _apply_diag1(psi, n, targets[0], np.exp(-0.5j * a), np.exp(0.5j * a))
    elif kind in (GateKind.RX, GateKind.RY):
        a = -np.asarray(angle) if dagger else np.asarray(angle)
        coeffs = _rotation_coeffs(kind, a)
        if np.ndim(a) == 0:
            _apply_1q(psi, n, targets[0], np.array([[coeffs[0], coeffs[1]], [coeffs[2], coeffs[3]]], dtype=complex))
        else:
            _apply_1q(psi, n, targets[0], coeffs)
    elif kind is GateKind.X:
        _apply_x(psi, n, targets[0])
    elif kind is GateKind.H:
        _apply_1q(psi, n, targets[0], _SQ2 * np.array([[1, 1], [1, -1]], dtype=complex))
    elif kind is GateKind.CZ:
        _apply_cz(psi, n, targets[0], targets[1])
    elif kind is GateKind.CNOT:
        _apply_x(psi, n, targets[1], **{f"q{targets[0]}": 1})
    else:  # pragma: no cover - enum is closed
        raise ValueError(kind)


def _apply_generator(psi: np.ndarray, n: int, kind: GateKind, q: int) -> None:
    """psi <- P psi for the Pauli generating rotation ``kind`` on qubit q."""
    if kind is GateKind.RZ:
        _apply_diag1(psi, n, q, 1.0, -1.0)
    elif kind is GateKind.RX:
        _apply_x(psi, n, q)
    else:
        _apply_1q(psi, n, q, _PAULI[GateKind.RY])


# ---------------------------------------------------------------------------


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    """Return ``gate`` applied to ``state`` (the input is left untouched)."""
    n = state.n_qubits
    if any(t >= n for t in gate.targets):
        raise InvalidQubit(f"{gate.kind.value}{gate.targets} on a {n}-qubit state")
    amp = np.array(state.amplitudes, dtype=np.result_type(state.amplitudes, np.complex64), copy=True)
    psi = amp.reshape(-1, 1 << n)
    _apply(psi, n, gate.kind, gate.targets, gate.angle)
    return StateVector(n, amp)


def _check_arity(prog: CircuitProgram, params, features):
    params = np.asarray(params, dtype=float).reshape(-1) if params is not None else np.zeros(0)
    if features is None:
        features = np.zeros(0)
    features = np.asarray(features, dtype=float)
    if params.shape[0] != prog.n_params:
        raise ParamArityError(f"program has {prog.n_params} parameters, got {params.shape[0]}")
    if features.ndim not in (1, 2) or features.shape[-1] != prog.n_features:
        raise ParamArityError(f"program has {prog.n_features} features, got shape {features.shape}")
    return params, features


def _angle(op: Op, params: np.ndarray, feats: np.ndarray):
    s = op.slot
    if s.source == "param":
        return params[s.index]
    if s.source == "feature":
        return feats[:, s.index]
    return s.value


def _forward(prog, params, feats2d, dtype, shift=None) -> np.ndarray:
    n = prog.n_qubits
    psi = np.zeros((feats2d.shape[0], 1 << n), dtype=dtype)
    psi[:, 0] = 1.0
    for k, op in enumerate(prog.ops):
        angle = _angle(op, params, feats2d) if op.slot is not None else None
        if shift is not None and shift[0] == k:
            angle = angle + shift[1]
        _apply(psi, n, op.kind, op.targets, angle)
    return psi


def run_circuit(
    prog: CircuitProgram,
    params=None,
    features=None,
    dtype=np.complex128,
) -> StateVector:
    """Evolve ``|0...0>`` through ``prog`` with angle slots resolved.

    ``features`` of shape ``(B, F)`` produces a batched state ``(B, 2**n)``.
    ``dtype=np.complex64`` selects the reduced-precision mode.
    """
    params, features = _check_arity(prog, params, features)
    batched = features.ndim == 2
    feats2d = features if batched else features[None, :]
    psi = _forward(prog, params, feats2d, dtype)
    return StateVector(prog.n_qubits, psi if batched else psi[0])


@lru_cache(maxsize=None)
def _z_signs(n: int) -> np.ndarray:
    idx = np.arange(1 << n)
    return 1.0 - 2.0 * ((idx[None, :] >> np.arange(n)[:, None]) & 1)


def measure_probabilities(state: StateVector) -> np.ndarray:
    """Born-rule probabilities ``|<i|psi>|**2`` per basis index."""
    return np.abs(state.amplitudes) ** 2


def expectation(state: StateVector, obs: Observable = PER_QUBIT_Z) -> np.ndarray:
    """Per-qubit Pauli-Z expectations, shape ``(n,)`` or ``(B, n)``."""
    if obs.kind != "PerQubitZ":
        raise ValueError(f"unsupported observable {obs.kind!r}")
    p = np.abs(state.amplitudes) ** 2
    return p @ _z_signs(state.n_qubits).T


def _inner_im(lam: np.ndarray, gphi: np.ndarray) -> np.ndarray:
    return np.einsum("bi,bi->b", lam.conj(), gphi).imag


def adjoint_gradient(
    prog: CircuitProgram,
    params,
    features=None,
    obs: Observable = PER_QUBIT_Z,
    upstream=None,
):
    """Gradients of ``sum_q upstream_q <Z_q>`` by the adjoint method.

    Returns ``(d_params, d_features)``. With batched features the parameter
    gradient is summed over the batch and ``d_features`` is ``(B, F)``.
    """
    if obs.kind != "PerQubitZ":
        raise ValueError(f"unsupported observable {obs.kind!r}")
    params, features = _check_arity(prog, params, features)
    n = prog.n_qubits
    batched = features.ndim == 2
    feats2d = features if batched else features[None, :]
    B = feats2d.shape[0]
    up = np.ones(n) if upstream is None else np.asarray(upstream, dtype=float)
    up = np.broadcast_to(up.reshape(-1, n) if up.ndim == 2 else up[None, :], (B, n))
    if up.shape[-1] != n:
        raise ParamArityError(f"upstream needs {n} components, got {up.shape[-1]}")

    phi = _forward(prog, params, feats2d, np.complex128)
    lam = phi * (up @ _z_signs(n))
    d_params = np.zeros(prog.n_params)
    d_feats = np.zeros((B, prog.n_features))
    for op in reversed(prog.ops):
        angle = None
        if op.slot is not None:
            angle = _angle(op, params, feats2d)
            if op.slot.source != "const":
                gphi = phi.copy()
                _apply_generator(gphi, n, op.kind, op.targets[0])
                g = _inner_im(lam, gphi)
                if op.slot.source == "param":
                    d_params[op.slot.index] += g.sum()
                else:
                    d_feats[:, op.slot.index] += g
        _apply(phi, n, op.kind, op.targets, angle, dagger=True)
        _apply(lam, n, op.kind, op.targets, angle, dagger=True)
    return d_params, (d_feats if batched else d_feats[0])


def parameter_shift_gradient(
    prog: CircuitProgram,
    params,
    features=None,
    obs: Observable = PER_QUBIT_Z,
    wrt: str = "params",
) -> np.ndarray:
    """Jacobian of per-qubit ``<Z>`` via the two-term ``+-pi/2`` shift rule.

    Returns ``(P, n)`` for ``wrt="params"`` or ``(F, n)`` for
    ``wrt="features"``; a leading batch axis is added for batched features.
    Slots used by several gates are shifted one occurrence at a time.
    """
    if obs.kind != "PerQubitZ":
        raise ValueError(f"unsupported observable {obs.kind!r}")
    if wrt not in ("params", "features"):
        raise ValueError(f"wrt must be 'params' or 'features', got {wrt!r}")
    params, features = _check_arity(prog, params, features)
    n = prog.n_qubits
    batched = features.ndim == 2
    feats2d = features if batched else features[None, :]
    source = "param" if wrt == "params" else "feature"
    size = prog.n_params if wrt == "params" else prog.n_features
    jac = np.zeros((feats2d.shape[0], size, n))
    zs = _z_signs(n).T
    for k, op in enumerate(prog.ops):
        if op.slot is None or op.slot.source != source:
            continue
        if not op.kind.is_rotation:
            raise UnsupportedShiftGate(f"slot {op.slot} feeds non-rotation gate {op.kind.value}")
        plus = np.abs(_forward(prog, params, feats2d, np.complex128, (k, np.pi / 2))) ** 2 @ zs
        minus = np.abs(_forward(prog, params, feats2d, np.complex128, (k, -np.pi / 2))) ** 2 @ zs
        jac[:, op.slot.index, :] += 0.5 * (plus - minus)
    return jac if batched else jac[0]
