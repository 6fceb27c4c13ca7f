"""Ray sampling: the piecewise uniform-then-geometric initial sampler,
histogram (inverse-CDF) resampling, proposal density networks and weight
annealing.

Samples are represented by bin edges ``t_0 < t_1 < ... < t_n`` per ray;
sample ``i`` sits at ``t_i`` with interval ``Delta_i = t_{i+1} - t_i`` and is
evaluated at the interval midpoint. The final edge equals ``far``, so the
last interval is ``far - t_last``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import brentq
from torch import nn

from .encoders import HashEncoding, HashEncodingConfig, contract, contracted_to_unit_cube

__all__ = [
    "InvalidRay",
    "InvalidDensity",
    "Ray",
    "RaySampleSet",
    "piecewise_edges",
    "piecewise_sample",
    "render_weights",
    "proposal_weights",
    "resample_pdf",
    "anneal_weights",
    "ProposalConfig",
    "ProposalNetwork",
    "ProposalSampler",
]


class InvalidRay(ValueError):
    pass


class InvalidDensity(ValueError):
    pass


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1) > 1e-6:
            raise InvalidRay("ray direction must be a unit 3-vector")
        if not (np.isfinite(self.near) and np.isfinite(self.far)) or not 0 <= self.near < self.far:
            raise InvalidRay(f"need 0 <= near < far, got near={self.near}, far={self.far}")


@dataclass
class RaySampleSet:
    """Per-ray bin edges ``(..., n + 1)``; numpy or torch."""

    edges: object

    @property
    def n_samples(self) -> int:
        return self.edges.shape[-1] - 1

    @property
    def starts(self):
        return self.edges[..., :-1]

    @property
    def deltas(self):
        return self.edges[..., 1:] - self.edges[..., :-1]

    @property
    def midpoints(self):
        return 0.5 * (self.edges[..., 1:] + self.edges[..., :-1])

    def positions(self, origins, directions):
        """Midpoint positions ``(..., n, 3)`` along rays ``(..., 3)``."""
        return origins[..., None, :] + directions[..., None, :] * self.midpoints[..., :, None]


# ---------------------------------------------------------------------------
# piecewise initial sampler


@lru_cache(maxsize=64)
def _geometric_ratio(length: float, base: float, k: int) -> float:
    """Solve ``base * sum_{i<k} s**i == length`` for ``s >= 1``."""
    if base * k >= length - 1e-15:
        return 1.0

    def f(s):
        return base * (s**k - 1) / (s - 1) - length

    hi = 2.0
    while f(hi) < 0:
        hi *= 2
    return brentq(f, 1.0 + 1e-12, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def piecewise_edges(near: float, far: float, n: int) -> np.ndarray:
    """``n + 1`` edges: ``n/2`` uniform steps on ``[near, min(near+1, far)]``,
    then ``n/2`` steps growing by a constant factor ``s`` up to ``far``.

    The first geometric step continues the uniform step when the far range
    allows it (never larger); ``s`` is then solved so the last edge is ``far``.
    """
    if n < 2 or n % 2:
        raise InvalidRay(f"piecewise sampler needs an even n >= 2, got {n}")
    if not 0 <= near < far or not math.isfinite(far):
        raise InvalidRay(f"need 0 <= near < far < inf, got near={near}, far={far}")
    half = n // 2
    mid = min(near + 1.0, far)
    if mid >= far:
        return np.linspace(near, far, n + 1)
    u = (mid - near) / half
    uniform = near + u * np.arange(half + 1)
    uniform[-1] = mid
    length = far - mid
    base = min(u, length / half)
    s = _geometric_ratio(length, base, half)
    steps = base * s ** np.arange(half)
    geo = mid + np.cumsum(steps)
    geo[-1] = far
    return np.concatenate([uniform, geo])


def piecewise_sample(ray: Ray, n: int) -> RaySampleSet:
    return RaySampleSet(piecewise_edges(ray.near, ray.far, n))


# ---------------------------------------------------------------------------
# weights


def render_weights(sigmas, deltas):
    """``w_i = T_i (1 - exp(-sigma_i Delta_i))`` and the final transmittance.

    ``T_i`` is the exclusive product of earlier attenuations.
    """
    sd = sigmas * deltas
    if isinstance(sd, torch.Tensor):
        excl = torch.cumsum(sd, dim=-1) - sd
        trans = torch.exp(-excl)
        w = trans * (-torch.expm1(-sd))
        t_final = torch.exp(-sd.sum(dim=-1))
        return w, t_final
    sd = np.asarray(sd, dtype=float)
    excl = np.cumsum(sd, axis=-1) - sd
    w = np.exp(-excl) * (-np.expm1(-sd))
    return w, np.exp(-sd.sum(axis=-1))


def proposal_weights(sigmas, deltas, form: str = "render"):
    """Weights used to steer resampling.

    ``"render"`` is the compositing weight; ``"density"`` multiplies it by
    ``sigma_i`` once more.
    """
    if (sigmas < 0).any():
        raise InvalidDensity("densities must be non-negative")
    if (deltas <= 0).any():
        raise InvalidDensity("intervals must be positive")
    w, _ = render_weights(sigmas, deltas)
    if form == "render":
        return w
    if form == "density":
        return w * sigmas
    raise ValueError(f"form must be 'render' or 'density', got {form!r}")


def anneal_weights(weights, step: int, slope: float = 10.0, warmup: int = 1000):
    """Flatten ``weights`` early in training: ``w ** bias`` with
    ``bias = slope t / ((slope - 1) t + 1)`` and ``t = clip(step / warmup)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    t = min(max(step / warmup, 0.0), 1.0) if warmup > 0 else 1.0
    bias = slope * t / ((slope - 1) * t + 1)
    if bias == 1.0:
        return weights
    return weights**bias


def resample_pdf(edges: torch.Tensor, weights: torch.Tensor, n_next: int, generator: torch.Generator | None = None, eps: float = 1e-5):
    """Inverse-CDF draws from the piecewise-constant PDF over ``edges``.

    Returns ``n_next + 1`` sorted edges per ray inside ``[edges[0],
    edges[-1]]``. Without a generator the CDF is probed at the evenly spaced
    points ``(k + 0.5) / (n_next + 1)``; with one, each probe is jittered
    uniformly inside its stratum. All-zero weight rows fall back to equal bin weights.
    """
    as_np = not isinstance(edges, torch.Tensor)
    e = torch.as_tensor(np.asarray(edges, dtype=float)) if as_np else edges
    w = torch.as_tensor(np.asarray(weights, dtype=float)) if as_np else weights
    e, w = e.detach(), w.detach()
    lead = e.shape[:-1]
    e2 = e.reshape(-1, e.shape[-1])
    w2 = w.reshape(-1, w.shape[-1]).clamp_min(0)
    total = w2.sum(dim=-1, keepdim=True)
    empty = total <= eps
    pdf = torch.where(empty, torch.ones_like(w2), w2)
    pdf = pdf / pdf.sum(dim=-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, dim=-1)], dim=-1)
    cdf[:, -1] = 1.0
    m = n_next + 1
    if generator is None:
        u = (torch.arange(m, dtype=e.dtype) + 0.5) / m
        u = u.expand(e2.shape[0], m).contiguous()
    else:
        jitter = torch.rand(e2.shape[0], m, generator=generator, dtype=e.dtype)
        u = (torch.arange(m, dtype=e.dtype) + jitter) / m
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[-1] - 1)
    c0, c1 = cdf.gather(1, idx - 1), cdf.gather(1, idx)
    t0, t1 = e2.gather(1, idx - 1), e2.gather(1, idx)
    frac = torch.where(c1 > c0, (u - c0) / (c1 - c0), torch.zeros_like(u))
    t = t0 + frac.clamp(0, 1) * (t1 - t0)
    t = torch.sort(t, dim=-1).values
    out = t.reshape(*lead, m)
    return out.numpy() if as_np else out


# ---------------------------------------------------------------------------
# proposal networks and the sampling cascade


@dataclass(frozen=True)
class ProposalConfig:
    stages: tuple[int, ...] = (256, 96)
    final_samples: int = 48
    levels: int = 5
    features_per_level: int = 2
    hidden: int = 16
    log2_table: int = 17
    min_res: int = 16
    max_res: tuple[int, ...] = (128, 256)
    update_every: int = 5
    anneal_slope: float = 10.0
    anneal_warmup: int = 1000

    def __post_init__(self):
        if not self.stages or any(s <= 0 for s in self.stages) or self.final_samples <= 0:
            raise ValueError("sample counts must be positive")
        counts = list(self.stages) + [self.final_samples]
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"proposal sample counts must not increase: {counts}")
        if len(self.max_res) != len(self.stages):
            raise ValueError("need one max resolution per proposal stage")
        if self.stages[0] % 2:
            raise ValueError("the first stage feeds the piecewise sampler and must be even")

    def hash_config(self, k: int) -> HashEncodingConfig:
        return HashEncodingConfig(
            levels=self.levels,
            features_per_level=self.features_per_level,
            min_res=self.min_res,
            max_res=self.max_res[k],
            log2_table=self.log2_table,
            name=f"proposal{k}",
        )


class ProposalNetwork(nn.Module):
    """Small hash-grid density network used only to place samples."""

    def __init__(self, hash_cfg: HashEncodingConfig, hidden: int = 16, generator=None):
        super().__init__()
        from .field import MLP

        self.encoding = HashEncoding(hash_cfg, generator=generator)
        self.mlp = MLP(hash_cfg.out_dim, hidden, 1, 1, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        enc = self.encoding(contracted_to_unit_cube(contract(x)))
        lead = enc.shape[:-1]
        return F.softplus(self.mlp(enc.reshape(-1, enc.shape[-1]))).reshape(lead)


@dataclass
class CascadeLevel:
    edges: torch.Tensor
    weights: torch.Tensor


class ProposalSampler(nn.Module):
    """Piecewise sampler -> proposal network k -> resample, for each stage."""

    def __init__(self, cfg: ProposalConfig = ProposalConfig(), generator=None):
        super().__init__()
        self.cfg = cfg
        self.networks = nn.ModuleList(
            ProposalNetwork(cfg.hash_config(k), cfg.hidden, generator) for k in range(len(cfg.stages))
        )

    def forward(
        self,
        origins: torch.Tensor,
        directions: torch.Tensor,
        near: float,
        far: float,
        step: int = 0,
        train_networks: bool = True,
        generator: torch.Generator | None = None,
    ):
        """Returns ``(final_edges, levels)``; ``levels`` keeps each proposal
        stage's edges and weights for the interlevel loss."""
        cfg = self.cfg
        n_rays = origins.shape[0]
        base = torch.as_tensor(piecewise_edges(near, far, cfg.stages[0]), dtype=origins.dtype)
        edges = base.expand(n_rays, -1).contiguous()
        if generator is not None:
            # jitter inside each initial bin, keeping the outer edges fixed
            d = edges[:, 1:] - edges[:, :-1]
            u = torch.rand(n_rays, cfg.stages[0] - 1, generator=generator, dtype=edges.dtype)
            inner = edges[:, 1:-1] + (u - 0.5) * 0.5 * torch.minimum(d[:, :-1], d[:, 1:])
            edges = torch.cat([edges[:, :1], inner, edges[:, -1:]], dim=-1)
        levels = []
        counts = list(cfg.stages[1:]) + [cfg.final_samples]
        for k, net in enumerate(self.networks):
            ss = RaySampleSet(edges)
            pts = ss.positions(origins, directions)
            with torch.set_grad_enabled(train_networks and torch.is_grad_enabled()):
                sigma = net(pts)
            # resampled bins may collapse to zero width; they just get zero weight
            w, _ = render_weights(sigma, ss.deltas)
            levels.append(CascadeLevel(edges, w))
            annealed = anneal_weights(w.detach(), step, cfg.anneal_slope, cfg.anneal_warmup)
            edges = resample_pdf(edges, annealed, counts[k], generator)
        return edges, levels
