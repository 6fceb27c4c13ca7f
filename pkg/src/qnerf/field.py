"""Radiance fields ``(x, d, a) -> (sigma, c)``: the classical hash-grid field
and the quantum-colour, quantum-density and fully quantum hybrids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import (
    HASH_PRESETS,
    HashEncoding,
    HashEncodingConfig,
    InvalidDirection,
    PositionalEncodingConfig,
    contract,
    contracted_to_unit_cube,
    positional_encode,
    sh_dim,
    sh_encode,
)
from .qiren import QirenStack, count_params, parse_stack_spec

__all__ = [
    "VARIANTS",
    "FieldConfig",
    "FieldOutputs",
    "MLP",
    "RadianceField",
    "mlp_param_count",
]

VARIANTS = ("classical", "q-color", "q-density", "q-both")


@dataclass(frozen=True)
class FieldConfig:
    variant: str = "classical"
    density_encoding: str = "hash"  # "hash" | "positional"
    hash: HashEncodingConfig = HASH_PRESETS["C7"]
    positional: PositionalEncodingConfig = PositionalEncodingConfig()
    geo_dim: int = 15
    density_hidden: int = 64
    density_layers: int = 1
    color_hidden: int = 64
    color_layers: int = 2
    appearance_dim: int = 32
    n_images: int = 1
    sh_degree: int = 4
    density_qiren: str = "2L+2S"
    color_qiren: str = "1L+2S"
    qiren_qubits: int = 8
    qiren_profile: str = "default"
    qiren_init: str = "uniform"
    quantum_method: str = "adjoint"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"field variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.density_encoding not in ("hash", "positional"):
            raise ValueError(f"density encoding must be 'hash' or 'positional', got {self.density_encoding!r}")
        if self.quantum_density and self.density_encoding != "positional":
            raise ValueError("quantum density heads take the positional encoding")
        if self.geo_dim < 0 or self.appearance_dim < 0 or self.n_images < 1:
            raise ValueError("geo_dim and appearance_dim must be >= 0 and n_images >= 1")

    @property
    def quantum_density(self) -> bool:
        return self.variant in ("q-density", "q-both")

    @property
    def quantum_color(self) -> bool:
        return self.variant in ("q-color", "q-both")


class FieldOutputs(NamedTuple):
    sigma: torch.Tensor  # (...,)
    color: torch.Tensor  # (..., 3)
    geo_features: torch.Tensor  # (..., geo_dim)


def _uniform(gen, shape, bound):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


class MLP(nn.Module):
    """ReLU perceptron with ``n_hidden`` hidden layers of width ``hidden``."""

    def __init__(self, in_dim: int, hidden: int, n_hidden: int, out_dim: int, generator=None):
        super().__init__()
        dims = [in_dim] + [hidden] * n_hidden + [out_dim]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for a, b in zip(dims, dims[1:]):
            bound = 1.0 / math.sqrt(a)
            self.weights.append(nn.Parameter(_uniform(generator, (b, a), bound)))
            self.biases.append(nn.Parameter(_uniform(generator, (b,), bound)))

    def forward(self, x):
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.T + b
            if i < n - 1:
                x = torch.relu(x)
        return x


def mlp_param_count(in_dim: int, hidden: int, n_hidden: int, out_dim: int) -> int:
    dims = [in_dim] + [hidden] * n_hidden + [out_dim]
    return sum(a * b + b for a, b in zip(dims, dims[1:]))


def _check_unit(d: torch.Tensor) -> None:
    n = torch.linalg.norm(d, dim=-1)
    if ((n - 1).abs() > 1e-6).any():
        raise InvalidDirection("viewing directions must be unit length")


class RadianceField(nn.Module):
    def __init__(self, cfg: FieldConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        out = 1 + cfg.geo_dim
        if cfg.density_encoding == "hash":
            self.hash = HashEncoding(cfg.hash, generator=generator)
            enc_dim = cfg.hash.out_dim
        else:
            self.hash = None
            enc_dim = cfg.positional.out_dim
        if cfg.quantum_density:
            spec = parse_stack_spec(cfg.density_qiren, cfg.qiren_qubits, enc_dim, out, cfg.qiren_profile)
            self.density_head = QirenStack(spec, generator, cfg.qiren_init, cfg.quantum_method)
        else:
            self.density_head = MLP(enc_dim, cfg.density_hidden, cfg.density_layers, out, generator)

        use_app = cfg.appearance_dim > 0 and not cfg.quantum_color
        self.appearance = (
            nn.Parameter(_uniform(generator, (cfg.n_images, cfg.appearance_dim), 1.0) * 0.1) if use_app else None
        )
        if cfg.quantum_color:
            spec = parse_stack_spec(cfg.color_qiren, cfg.qiren_qubits, cfg.geo_dim + 3, 3, cfg.qiren_profile)
            self.color_head = QirenStack(spec, generator, cfg.qiren_init, cfg.quantum_method)
        else:
            in_dim = cfg.geo_dim + sh_dim(cfg.sh_degree) + (cfg.appearance_dim if use_app else 0)
            self.color_head = MLP(in_dim, cfg.color_hidden, cfg.color_layers, 3, generator)

    # -- parameter bookkeeping -------------------------------------------------

    def color_head_params(self) -> int:
        return count_params(self.color_head)

    def density_head_params(self) -> int:
        return count_params(self.density_head)

    # -- forward paths ---------------------------------------------------------

    def encode_position(self, x: torch.Tensor) -> torch.Tensor:
        xc = contract(x)
        if self.hash is not None:
            return self.hash(contracted_to_unit_cube(xc))
        return positional_encode(xc, self.cfg.positional)

    def density_raw(self, x: torch.Tensor) -> torch.Tensor:
        enc = self.encode_position(x)
        lead = enc.shape[:-1]
        return self.density_head(enc.reshape(-1, enc.shape[-1])).reshape(*lead, -1)

    def density(self, x: torch.Tensor):
        """``(sigma, h)``; never looks at the viewing direction."""
        raw = self.density_raw(x)
        return F.softplus(raw[..., 0]), raw[..., 1:]

    def appearance_for(self, image_idx: torch.Tensor | None, shape) -> torch.Tensor | None:
        if self.appearance is None:
            return None
        if image_idx is None:
            a = self.appearance.mean(dim=0)
            return a.expand(*shape, a.shape[-1])
        return self.appearance[image_idx].expand(*shape, self.cfg.appearance_dim)

    def color_raw(self, h: torch.Tensor, d: torch.Tensor, a: torch.Tensor | None = None) -> torch.Tensor:
        _check_unit(d)
        if self.cfg.quantum_color:
            inp = torch.cat([h, d], dim=-1)
        else:
            parts = [h, sh_encode(d, self.cfg.sh_degree)]
            if a is not None:
                parts.append(a)
            inp = torch.cat(parts, dim=-1)
        lead = inp.shape[:-1]
        return self.color_head(inp.reshape(-1, inp.shape[-1])).reshape(*lead, 3)

    def color(self, h, d, a=None):
        return torch.sigmoid(self.color_raw(h, d, a))

    def forward(self, x: torch.Tensor, d: torch.Tensor, image_idx: torch.Tensor | None = None) -> FieldOutputs:
        """``x`` and ``d`` share a leading shape; ``image_idx`` broadcasts
        against it (``None`` selects the mean appearance embedding)."""
        sigma, h = self.density(x)
        a = self.appearance_for(image_idx, x.shape[:-1])
        c = self.color(h, d, a)
        return FieldOutputs(sigma, c, h)
