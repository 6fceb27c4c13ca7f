"""The assembled pipeline (proposal cascade -> field -> compositor) and its
training losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .field import FieldConfig, RadianceField
from .render import RenderedPixel, volume_render
from .sampling import CascadeLevel, ProposalConfig, ProposalSampler, RaySampleSet

__all__ = [
    "NonFiniteLoss",
    "LossWeights",
    "LossReport",
    "QNerfModel",
    "interlevel_loss",
    "outer_weights",
    "compute_loss",
]


class NonFiniteLoss(FloatingPointError):
    pass


class QNerfModel(nn.Module):
    def __init__(self, field_cfg: FieldConfig, proposal_cfg: ProposalConfig, near: float, far: float, generator=None):
        super().__init__()
        if not 0 <= near < far:
            raise ValueError("need 0 <= near < far")
        self.field = RadianceField(field_cfg, generator)
        self.proposal = ProposalSampler(proposal_cfg, generator)
        self.near, self.far = float(near), float(far)

    def forward(self, origins, dirs, image_idx=None, step: int | None = None, train_proposals: bool = True, generator=None):
        """Returns ``(RenderedPixel, final_edges, cascade)``. ``step=None``
        disables proposal-weight annealing (inference)."""
        anneal_step = self.proposal.cfg.anneal_warmup if step is None else step
        edges, levels = self.proposal(origins, dirs, self.near, self.far, anneal_step, train_proposals, generator)
        ss = RaySampleSet(edges)
        pts = ss.positions(origins, dirs)
        d = dirs[:, None, :].expand_as(pts)
        idx = None if image_idx is None else torch.as_tensor(image_idx)[:, None]
        out = self.field(pts, d, idx)
        return volume_render(out.sigma, out.color, edges), edges, levels

    def render_rays(self, origins, dirs, image_idx=None) -> RenderedPixel:
        if image_idx is not None and not isinstance(image_idx, torch.Tensor):
            image_idx = torch.full((origins.shape[0],), int(image_idx))
        return self(origins, dirs, image_idx)[0]


@dataclass(frozen=True)
class LossWeights:
    photometric: float = 1.0
    proposal: float = 1.0
    regularizer: float = 1e-3


@dataclass
class LossReport:
    photometric: torch.Tensor
    proposal: torch.Tensor
    regularizer: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("photometric", "proposal", "regularizer", "total")}


def outer_weights(t_target: torch.Tensor, t_prop: torch.Tensor, w_prop: torch.Tensor) -> torch.Tensor:
    """For each target interval, the proposal mass of every proposal
    interval it overlaps with positive length."""
    cw = torch.cat([torch.zeros_like(w_prop[..., :1]), torch.cumsum(w_prop, dim=-1)], dim=-1)
    n = w_prop.shape[-1]
    lo = (torch.searchsorted(t_prop.contiguous(), t_target[..., :-1].contiguous(), right=True) - 1).clamp(0, n - 1)
    hi = (torch.searchsorted(t_prop.contiguous(), t_target[..., 1:].contiguous(), right=False) - 1).clamp(0, n - 1)
    return cw.gather(-1, hi + 1) - cw.gather(-1, lo)


def interlevel_loss(final_edges: torch.Tensor, final_weights: torch.Tensor, levels: list[CascadeLevel], eps: float = 1e-7):
    """Histogram bound: each proposal level must put at least as much mass
    over a final interval as the final weights do. Only the proposals get
    gradients."""
    w = final_weights.detach()
    e = final_edges.detach()
    total = final_weights.new_zeros(())
    for lvl in levels:
        bound = outer_weights(e, lvl.edges.detach(), lvl.weights)
        total = total + (torch.clamp(w - bound, min=0) ** 2 / (w + eps)).sum(-1).mean()
    return total


def compute_loss(pred: RenderedPixel, target: torch.Tensor, final_edges, levels, weights: LossWeights = LossWeights()) -> LossReport:
    if not torch.isfinite(pred.color).all():
        raise NonFiniteLoss("prediction contains NaN or infinity")
    photometric = torch.mean((pred.color - target) ** 2)
    proposal = interlevel_loss(final_edges, pred.weights, levels) if levels else photometric.new_zeros(())
    acc = pred.accumulation
    regularizer = torch.mean(acc * (1 - acc))
    total = weights.photometric * photometric + weights.proposal * proposal + weights.regularizer * regularizer
    if not torch.isfinite(total):
        raise NonFiniteLoss("loss is not finite")
    return LossReport(photometric, proposal, regularizer, total)
