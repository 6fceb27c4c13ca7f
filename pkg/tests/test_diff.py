import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from qnerf import qsim
from qnerf.diff import (
    AdamState,
    CheckpointError,
    GraphError,
    LrSchedule,
    NonFiniteGradient,
    ScheduleError,
    adam_step,
    forward_backward,
    load_checkpoint,
    lr_at,
    quantum_expectations,
    save_checkpoint,
)
from qnerf.qsim import CircuitProgram, Op, Slot


def test_square():
    out, (g,) = forward_backward(lambda w: w**2, [3.0])
    assert out == 9.0 and g == pytest.approx(6.0)


def test_softplus_at_zero():
    out, (g,) = forward_backward(F.softplus, [0.0])
    assert out == pytest.approx(math.log(2)) and g == pytest.approx(0.5)


def test_mlp_matches_finite_differences(rng):
    x = rng.normal(size=(5, 2))
    w1, b1, w2, b2 = rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=(2, 1)), rng.normal(size=1)

    def f(w1, b1, w2, b2):
        return (torch.sigmoid(torch.as_tensor(x) @ w1 + b1) @ w2 + b2).sum()

    _, grads = forward_backward(f, [w1, b1, w2, b2])
    args = [w1, b1, w2, b2]
    for i, g in enumerate(grads):

        def fi(v, i=i):
            a = [torch.as_tensor(t) for t in args]
            a[i] = torch.as_tensor(v)
            return f(*a).item()

        fd = oracles.central_diff(fi, args[i])
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize(
    "op",
    [torch.exp, torch.sin, torch.cos, torch.relu, F.softplus, torch.sigmoid],
)
def test_primitive_backward_rules(op, rng):
    x = rng.uniform(-2, 2, size=7)
    _, (g,) = forward_backward(lambda t: op(t).sum(), [x])
    fd = oracles.central_diff(lambda v: op(torch.as_tensor(v)).sum().item(), x)
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_gather_and_mapping_inputs():
    out, g = forward_backward(lambda table: table[torch.tensor([0, 2, 2])].sum(), {"table": [1.0, 2.0, 3.0]})
    assert out == 7.0 and np.allclose(g["table"], [1, 0, 2])


def test_disconnected_graph():
    with pytest.raises(GraphError):
        forward_backward(lambda w: torch.tensor(1.0), [1.0])
    with pytest.raises(GraphError):
        forward_backward(lambda w: 3, [1.0])


def test_adam_zero_grad_and_counter():
    p = {"w": torch.ones(3)}
    st = AdamState()
    adam_step(st, p, {"w": torch.zeros(3)}, 0.1)
    assert torch.equal(p["w"], torch.ones(3))
    assert st.step == 1
    adam_step(st, p, {"w": torch.zeros(3)}, 0.1)
    assert st.step == 2


def test_adam_constant_gradient_displacement():
    p = {"w": torch.zeros(2, dtype=torch.float64)}
    st = AdamState()
    lr = 1e-3
    prev = p["w"].clone()
    for _ in range(2000):
        adam_step(st, p, {"w": torch.tensor([2.0, -0.5], dtype=torch.float64)}, lr)
        step = p["w"] - prev
        prev = p["w"].clone()
    assert np.allclose(step.abs().numpy(), lr, rtol=1e-5)
    assert torch.equal(torch.sign(step), torch.tensor([-1.0, 1.0], dtype=torch.float64))


def test_adam_nan_gradient_leaves_state_untouched():
    p = {"w": torch.ones(2)}
    st = AdamState()
    with pytest.raises(NonFiniteGradient):
        adam_step(st, p, {"w": torch.tensor([1.0, float("nan")])}, 0.1)
    assert st.step == 0 and torch.equal(p["w"], torch.ones(2))


def test_lr_schedule_endpoints():
    s = LrSchedule()
    assert lr_at(s, 0) == pytest.approx(1e-2)
    assert lr_at(s, 30000) == 1e-4
    mid = lr_at(s, 15000)
    assert 1e-4 < mid < 1e-2
    vals = [lr_at(s, k) for k in range(0, 30001, 500)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ScheduleError):
        lr_at(s, 30001)


def test_lr_warmup_ramp():
    s = LrSchedule(warmup_steps=100, total_steps=1000)
    assert lr_at(s, 0) == pytest.approx(1e-8)
    assert lr_at(s, 50) == pytest.approx(1e-8 + (1e-2 - 1e-8) * math.sin(math.pi / 4))
    assert lr_at(s, 100) == pytest.approx(1e-2)


def test_quantum_node_backward_equals_adjoint(rng):
    ops = [
        Op("RZ", (0,), Slot.feature(0)),
        Op("RY", (1,), Slot.feature(1)),
        Op("RY", (0,), Slot.param(0)),
        Op("CZ", (0, 1)),
        Op("RX", (1,), Slot.param(1)),
        Op("CNOT", (1, 0)),
        Op("RY", (0,), Slot.feature(0)),
    ]
    prog = CircuitProgram(2, ops)
    p = torch.tensor(rng.normal(size=2), requires_grad=True)
    f = torch.tensor(rng.normal(size=(4, 2)), requires_grad=True)
    up = torch.tensor(rng.normal(size=(4, 2)))
    for method in ("adjoint", "parameter-shift"):
        p.grad = f.grad = None
        (quantum_expectations(prog, p, f, method) * up).sum().backward()
        dp, df = qsim.adjoint_gradient(prog, p.detach().numpy(), f.detach().numpy(), upstream=up.numpy())
        assert np.allclose(p.grad.numpy(), dp, atol=1e-10)
        assert np.allclose(f.grad.numpy(), df, atol=1e-10)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {
        "a": torch.randn(3, 4, dtype=torch.float64),
        "b": torch.arange(5),
        "c": torch.tensor([True, False]),
        "d": np.array([1.5, 2.5], dtype=np.float32),
    }
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors, {"step": 7})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 7}
    for k, v in tensors.items():
        assert np.array_equal(np.asarray(v), back[k].numpy())
        assert np.asarray(v).dtype == back[k].numpy().dtype


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"a": torch.ones(10)})
    raw = bytearray(path.read_bytes())
    raw[-40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_version_mismatch(tmp_path):
    import hashlib
    import struct

    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"a": torch.ones(1)})
    body = bytearray(path.read_bytes()[:-32])
    struct.pack_into("<I", body, 8, 99)
    path.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
