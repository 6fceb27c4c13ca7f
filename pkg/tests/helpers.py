"""Small configurations shared by the training-related tests."""

from importlib import resources

import numpy as np

from qnerf.encoders import HashEncodingConfig
from qnerf.field import FieldConfig
from qnerf.qsim import CircuitProgram, Op, Slot
from qnerf.sampling import ProposalConfig
from qnerf.trainer import TrainConfig

BUNDLED = resources.files("qnerf") / "data" / "synthetic8"

TINY_HASH = HashEncodingConfig(levels=4, features_per_level=2, min_res=4, max_res=32, log2_table=10)


def tiny_field(**kw):
    base = dict(hash=TINY_HASH, geo_dim=7, density_hidden=16, color_hidden=16, appearance_dim=4, sh_degree=2, qiren_qubits=3)
    base.update(kw)
    return FieldConfig(**base)


def tiny_proposal(**kw):
    base = dict(stages=(16, 8), final_samples=8, levels=3, hidden=8, log2_table=8, min_res=4, max_res=(16, 32))
    base.update(kw)
    return ProposalConfig(**base)


def tiny_train(**kw):
    base = dict(total_iters=1000, rays_per_batch=32, eval_rays_per_batch=256, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def random_program(rng, n, n_gates, with_features=True):
    ops, gates = [], []
    n_p = n_f = 0
    kinds = ["RX", "RY", "RZ", "X", "H"] + (["CZ", "CNOT"] if n > 1 else [])
    params, feats = [], []
    for _ in range(n_gates):
        k = kinds[rng.integers(len(kinds))]
        if k in ("CZ", "CNOT"):
            a, b = rng.choice(n, 2, replace=False)
            ops.append(Op(k, (int(a), int(b))))
            gates.append((k, (int(a), int(b)), None))
            continue
        q = int(rng.integers(n))
        if k in ("X", "H"):
            ops.append(Op(k, (q,)))
            gates.append((k, (q,), None))
            continue
        src = rng.integers(3 if with_features else 2)
        v = rng.uniform(-np.pi, np.pi)
        if src == 0:
            slot = Slot.param(n_p)
            params.append(v)
            n_p += 1
        elif src == 1:
            slot = Slot.const(v)
        else:
            slot = Slot.feature(n_f)
            feats.append(v)
            n_f += 1
        ops.append(Op(k, (q,), slot))
        gates.append((k, (q,), v))
    return CircuitProgram(n, ops), np.array(params), np.array(feats), gates
