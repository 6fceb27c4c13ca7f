"""Input feature maps: scene contraction, sinusoidal positional encoding,
multiresolution hash encoding and real spherical harmonics.

Every function accepts torch tensors (and stays differentiable) or array
likes (and returns numpy arrays).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

__all__ = [
    "InvalidCoordinate",
    "InvalidDirection",
    "contract",
    "contracted_to_unit_cube",
    "PositionalEncodingConfig",
    "positional_encode",
    "HashEncodingConfig",
    "HASH_PRESETS",
    "hash_preset",
    "hash_encode",
    "HashEncoding",
    "sh_encode",
    "sh_dim",
]


class InvalidCoordinate(ValueError):
    pass


class InvalidDirection(ValueError):
    pass


def _wrap(fn):
    """Run a torch implementation on array-like input and hand back numpy."""

    def inner(x, *args, **kwargs):
        if isinstance(x, torch.Tensor):
            return fn(x, *args, **kwargs)
        out = fn(torch.as_tensor(np.asarray(x, dtype=np.float64)), *args, **kwargs)
        return out.detach().numpy()

    inner.__name__ = fn.__name__
    inner.__doc__ = fn.__doc__
    return inner


@_wrap
def contract(x):
    """Squash unbounded points into the radius-2 ball.

    Identity for ``|x| <= 1``; otherwise ``(2 - 1/|x|) * x/|x|``.
    """
    if not torch.isfinite(x).all():
        raise InvalidCoordinate("contract() needs finite coordinates")
    mag = torch.linalg.norm(x, dim=-1, keepdim=True)
    safe = mag.clamp_min(1.0)
    return torch.where(mag <= 1.0, x, (2.0 - 1.0 / safe) * (x / safe))


def contracted_to_unit_cube(x):
    """Affine map from the contraction codomain ``[-2, 2]^3`` to ``[0, 1]^3``."""
    return (x + 2.0) / 4.0


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PositionalEncodingConfig:
    """``n_bands`` frequencies ``2**e * pi`` with ``e`` evenly spaced in
    ``[min_exp, max_exp]``. The default gives integer octaves 2^0..2^9;
    ``max_exp=8`` keeps ten bands spread over 2^0..2^8."""

    n_bands: int = 10
    min_exp: float = 0.0
    max_exp: float = 9.0
    in_dim: int = 3

    @property
    def out_dim(self) -> int:
        return self.in_dim * self.n_bands * 2

    def frequencies(self) -> np.ndarray:
        return 2.0 ** np.linspace(self.min_exp, self.max_exp, self.n_bands)


@_wrap
def positional_encode(x, cfg: PositionalEncodingConfig = PositionalEncodingConfig()):
    """Layout: all sines (axis-major, band-minor) then all cosines."""
    freqs = torch.as_tensor(cfg.frequencies(), dtype=x.dtype) * math.pi
    scaled = (x[..., :, None] * freqs).flatten(-2)
    return torch.cat([torch.sin(scaled), torch.cos(scaled)], dim=-1)


# ---------------------------------------------------------------------------

_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashEncodingConfig:
    """Multiresolution hash grid.

    ``levels`` grids with resolutions growing geometrically from ``min_res``
    to ``max_res``; each level owns ``2**log2_table`` rows of
    ``features_per_level`` features.
    """

    levels: int = 16
    features_per_level: int = 2
    min_res: int = 16
    max_res: int = 2048
    log2_table: int = 19
    name: str = ""
    mlp_params: int | None = None  # reference MLP size reported with the preset

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def n_params(self) -> int:
        return self.levels * self.table_size * self.features_per_level

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.max_res) - math.log(self.min_res)) / (self.levels - 1))

    def resolutions(self) -> list[int]:
        b = self.growth
        return [int(math.floor(self.min_res * b**lvl + 1e-9)) for lvl in range(self.levels)]


# L levels, coarsest res, finest res, log2 table size, features/level, MLP size
_PRESET_ROWS = {
    "C1": (16, 16, 2048, 19, 2, 2502),
    "C2": (16, 16, 2048, 17, 2, 2502),
    "C3": (12, 16, 2048, 17, 2, 1990),
    "C4": (12, 16, 2048, 17, 1, 1222),
    "C5": (12, 16, 1024, 15, 1, 1222),
    "C6": (8, 16, 1024, 15, 1, 966),
    "C7": (8, 16, 1024, 13, 1, 966),
}

HASH_PRESETS: dict[str, HashEncodingConfig] = {
    name: HashEncodingConfig(
        levels=lv, features_per_level=f, min_res=lo, max_res=hi, log2_table=h, name=name, mlp_params=mlp
    )
    for name, (lv, lo, hi, h, f, mlp) in _PRESET_ROWS.items()
}


def hash_preset(name: str) -> HashEncodingConfig:
    try:
        return HASH_PRESETS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown hash preset {name!r}; choose from {sorted(HASH_PRESETS)}") from None


def _spatial_hash(corners: torch.Tensor, table_size: int) -> torch.Tensor:
    h = corners[..., 0] * _PRIMES[0]
    h = torch.bitwise_xor(h, corners[..., 1] * _PRIMES[1])
    h = torch.bitwise_xor(h, corners[..., 2] * _PRIMES[2])
    return torch.remainder(h, table_size)


_CORNER_OFFSETS = torch.tensor([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=torch.int64)


def hash_corners(x01: torch.Tensor, cfg: HashEncodingConfig):
    """Per level: hashed indices ``(L, N, 8)`` and trilinear weights ``(L, N, 8)``."""
    idx, wts = [], []
    offs = _CORNER_OFFSETS.to(x01.device)
    for res in cfg.resolutions():
        scaled = x01 * res
        base = torch.floor(scaled)
        frac = scaled - base
        corners = base.to(torch.int64)[..., None, :] + offs
        idx.append(_spatial_hash(corners, cfg.table_size))
        f = frac[..., None, :]
        w = torch.where(offs.bool(), f, 1.0 - f).prod(dim=-1)
        wts.append(w)
    return torch.stack(idx), torch.stack(wts)


def hash_encode(x01, cfg: HashEncodingConfig, table):
    """Trilinearly interpolated hash-grid features, ``(..., L * F)``.

    ``x01`` lives in ``[0, 1]^3``; ``table`` has shape ``(L, 2**H, F)``.
    """
    as_numpy = not isinstance(x01, torch.Tensor)
    x = torch.as_tensor(np.asarray(x01, dtype=np.float64)) if as_numpy else x01
    tab = torch.as_tensor(np.asarray(table, dtype=np.float64)) if not isinstance(table, torch.Tensor) else table
    lead = x.shape[:-1]
    flat = x.reshape(-1, 3)
    idx, w = hash_corners(flat, cfg)
    feats = []
    for lvl in range(cfg.levels):
        rows = tab[lvl][idx[lvl]]  # (N, 8, F)
        feats.append((w[lvl][..., None].to(rows.dtype) * rows).sum(dim=1))
    out = torch.cat(feats, dim=-1).reshape(*lead, cfg.out_dim)
    return out.detach().numpy() if as_numpy else out


class HashEncoding(nn.Module):
    def __init__(self, cfg: HashEncodingConfig, init_scale: float = 1e-3, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        t = torch.rand(cfg.levels, cfg.table_size, cfg.features_per_level, generator=generator, dtype=torch.float64)
        self.table = nn.Parameter((t * 2 - 1) * init_scale)

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        return hash_encode(x01, self.cfg, self.table)


# ---------------------------------------------------------------------------
# real spherical harmonics, no Condon-Shortley phase; bands l = 0..degree-1,
# m = -l..l within a band


def sh_dim(degree: int) -> int:
    return degree * degree


@_wrap
def sh_encode(d, degree: int = 4):
    if not 1 <= degree <= 4:
        raise ValueError(f"sh degree must be 1..4, got {degree}")
    norm = torch.linalg.norm(d, dim=-1)
    if (norm == 0).any():
        raise InvalidDirection("zero-length direction")
    if ((norm - 1).abs() > 1e-6).any():
        raise InvalidDirection("directions must be unit length")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [torch.full_like(x, 0.28209479177387814)]
    if degree > 1:
        c1 = 0.4886025119029199
        out += [c1 * y, c1 * z, c1 * x]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            1.0925484305920792 * x * y,
            1.0925484305920792 * y * z,
            0.31539156525252005 * (3 * zz - 1),
            1.0925484305920792 * x * z,
            0.5462742152960396 * (xx - yy),
        ]
    if degree > 3:
        out += [
            0.5900435899266435 * y * (3 * xx - yy),
            2.890611442640554 * x * y * z,
            0.4570457994644658 * y * (5 * zz - 1),
            0.3731763325901154 * z * (5 * zz - 3),
            0.4570457994644658 * x * (5 * zz - 1),
            1.445305721320277 * z * (xx - yy),
            0.5900435899266435 * x * (xx - 3 * yy),
        ]
    return torch.stack(out, dim=-1)
