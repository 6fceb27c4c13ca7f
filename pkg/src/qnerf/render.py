"""Emission-absorption compositing, whole-image rendering and image I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .sampling import render_weights

__all__ = [
    "ShapeError",
    "RenderedPixel",
    "RenderedImage",
    "composite",
    "volume_render",
    "render_image",
    "write_png",
    "read_png",
    "write_float_dump",
    "read_float_dump",
]


class ShapeError(ValueError):
    pass


@dataclass
class RenderedPixel:
    color: object
    accumulation: object
    depth: object
    weights: object
    transmittance: object  # what survives past the last sample


def composite(sigmas, colors, deltas, t_mid=None) -> RenderedPixel:
    """Composite samples along the last axis.

    ``sigmas`` and ``deltas`` are ``(..., N)``, ``colors`` ``(..., N, 3)``.
    ``t_mid`` (sample distances) enables the depth output; depth is the
    weight-normalised expected distance, 0 where nothing is hit. No
    background colour is added.
    """
    is_t = isinstance(sigmas, torch.Tensor)
    if not is_t:
        sigmas, colors, deltas = (np.asarray(a, dtype=float) for a in (sigmas, colors, deltas))
    if sigmas.shape != deltas.shape or colors.shape[:-1] != sigmas.shape or colors.shape[-1] != 3:
        raise ShapeError(
            f"sigmas {tuple(sigmas.shape)}, deltas {tuple(deltas.shape)} and colors {tuple(colors.shape)} do not align"
        )
    w, t_final = render_weights(sigmas, deltas)
    rgb = (w[..., None] * colors).sum(-2)
    acc = w.sum(-1)
    if t_mid is None:
        depth = None
    else:
        t_mid = t_mid if is_t else np.asarray(t_mid, dtype=float)
        num = (w * t_mid).sum(-1)
        depth = num / (acc.clamp_min(1e-10) if is_t else np.maximum(acc, 1e-10))
    return RenderedPixel(rgb, acc, depth, w, t_final)


def volume_render(sigmas: torch.Tensor, colors: torch.Tensor, edges: torch.Tensor) -> RenderedPixel:
    """Composite a batch of rays sampled on bin ``edges`` ``(R, N + 1)``."""
    deltas = edges[..., 1:] - edges[..., :-1]
    mids = 0.5 * (edges[..., 1:] + edges[..., :-1])
    return composite(sigmas, colors, deltas, mids)


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3)
    accumulation: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)


@torch.no_grad()
def render_image(model, camera, chunk: int = 4096, image_idx=None) -> RenderedImage:
    """Render every pixel of ``camera`` with ``model.render_rays``.

    ``model.render_rays(origins, directions, image_idx)`` must return a
    :class:`RenderedPixel`. Rays are processed in ``chunk``-sized batches
    in a fixed order, so output is deterministic.
    """
    from .dataset import generate_rays

    H, W = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    origins, dirs = generate_rays(camera, rows.reshape(-1), cols.reshape(-1))
    rgb, acc, depth = [], [], []
    for s in range(0, H * W, chunk):
        out = model.render_rays(origins[s : s + chunk], dirs[s : s + chunk], image_idx)
        rgb.append(out.color.detach())
        acc.append(out.accumulation.detach())
        depth.append(out.depth.detach())
    return RenderedImage(
        torch.cat(rgb).reshape(H, W, 3).numpy(),
        torch.cat(acc).reshape(H, W).numpy(),
        torch.cat(depth).reshape(H, W).numpy(),
    )


# ---------------------------------------------------------------------------
# image files


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """PNG -> float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# raw dump: b"QNRFIMG\0" | <u32 height, u32 width, u32 channels> | float32 LE row-major
_DUMP_MAGIC = b"QNRFIMG\x00"


def write_float_dump(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (H, W) or (H, W, C) image, got {arr.shape}")
    h, w, c = arr.shape
    Path(path).write_bytes(_DUMP_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(arr).tobytes())


def read_float_dump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(_DUMP_MAGIC):
        raise ValueError(f"{path}: not a float image dump")
    h, w, c = struct.unpack_from("<III", data, len(_DUMP_MAGIC))
    body = data[len(_DUMP_MAGIC) + 12 :]
    if len(body) != h * w * c * 4:
        raise ValueError(f"{path}: truncated float image dump")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).copy()
