"""Multi-view datasets: camera manifests, images, splits, ray casting, SE(3)
pose refinement, and a procedurally generated analytic scene.

Cameras are camera-to-world 4x4 matrices in the OpenGL convention: the
camera looks down its local -z axis, +x is right and +y is up. Pixel
``(row, col)`` is sampled at its centre ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = [
    "DatasetError",
    "PoseError",
    "Camera",
    "Frame",
    "Dataset",
    "split_indices",
    "load_dataset",
    "generate_rays",
    "camera_rays",
    "so3_exp",
    "so3_log",
    "se3_exp",
    "se3_log",
    "apply_pose_delta",
    "look_at",
    "AnalyticScene",
    "write_synthetic_dataset",
]


class DatasetError(RuntimeError):
    pass


class PoseError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray = field(repr=False)

    def __post_init__(self):
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape == (3, 4):
            c2w = np.vstack([c2w, [0, 0, 0, 1]])
        if c2w.shape != (4, 4):
            raise PoseError(f"camera-to-world matrix must be 4x4 or 3x4, got {c2w.shape}")
        R = c2w[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise PoseError("camera rotation is not in SO(3)")
        if not np.allclose(c2w[3], [0, 0, 0, 1]):
            raise PoseError("camera matrix bottom row must be [0, 0, 0, 1]")
        if min(self.fx, self.fy) <= 0 or min(self.width, self.height) <= 0:
            raise PoseError("intrinsics must be positive")
        object.__setattr__(self, "c2w", c2w)

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return -self.c2w[:3, 2]

    def scaled(self, height: int, width: int) -> "Camera":
        """Same camera at another resolution (pinhole similarity)."""
        sx, sy = width / self.width, height / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy, width=width, height=height)


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray | None  # (H, W, 3) float64 in [0, 1]
    file_path: str = ""


@dataclass
class Dataset:
    frames: list[Frame]
    train_indices: list[int]
    eval_indices: list[int]
    near: float = 0.05
    far: float = 6.0
    root: str = ""

    def __len__(self):
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].camera.height

    @property
    def width(self) -> int:
        return self.frames[0].camera.width

    def images(self, indices) -> np.ndarray:
        return np.stack([self.frames[i].image for i in indices])

    def c2w(self, indices) -> np.ndarray:
        return np.stack([self.frames[i].camera.c2w for i in indices])

    def intrinsics(self, indices) -> np.ndarray:
        return np.array([[self.frames[i].camera.fx, self.frames[i].camera.fy, self.frames[i].camera.cx, self.frames[i].camera.cy] for i in indices])

    def summary(self) -> str:
        lines = [
            f"root: {self.root}",
            f"frames: {len(self.frames)} (train {len(self.train_indices)}, eval {len(self.eval_indices)})",
            f"resolution: {self.height}x{self.width}",
            f"near/far: {self.near:g} / {self.far:g}",
            "",
            "  idx split     fx       fy       cx       cy      center                      forward",
        ]
        split = {i: "train" for i in self.train_indices} | {i: "eval" for i in self.eval_indices}
        for i, f in enumerate(self.frames):
            c = f.camera
            ctr = " ".join(f"{v:+.3f}" for v in c.center)
            fwd = " ".join(f"{v:+.3f}" for v in c.forward)
            lines.append(
                f"  {i:3d} {split.get(i, '-'):5s} {c.fx:8.3f} {c.fy:8.3f} {c.cx:8.3f} {c.cy:8.3f}  [{ctr}]  [{fwd}]  {f.file_path}"
            )
        return "\n".join(lines)


def split_indices(n: int, train_fraction: float = 0.9, seed: int | None = None) -> tuple[list[int], list[int]]:
    """Deterministic train/eval partition.

    ``ceil(fraction * n)`` training frames, capped so at least one frame is
    held out when ``n >= 2`` and ``fraction < 1``. Without a seed the
    training frames are spread evenly over the sequence; with one they are a
    seeded random choice.
    """
    if n < 1:
        raise DatasetError("dataset has no frames")
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must be in (0, 1]")
    n_train = math.ceil(train_fraction * n - 1e-9)
    if train_fraction < 1 and n >= 2:
        n_train = min(n_train, n - 1)
    if seed is None:
        train = np.unique(np.round(np.linspace(0, n - 1, n_train)).astype(int))
    else:
        train = np.sort(np.random.default_rng(seed).permutation(n)[:n_train])
    train_set = set(int(i) for i in train)
    return sorted(train_set), [i for i in range(n) if i not in train_set]


def load_dataset(
    path,
    downscale: tuple[int, int] | None = None,
    train_fraction: float = 0.9,
    split_seed: int | None = None,
    load_images: bool = True,
) -> Dataset:
    """Read a ``transforms.json`` manifest (or the directory holding one).

    ``downscale=(height, width)`` resizes images with a box filter and
    rescales intrinsics by the same factors. Optional top-level ``near`` and
    ``far`` keys set the ray bounds.
    """
    p = Path(path)
    manifest = p / "transforms.json" if p.is_dir() else p
    if not manifest.is_file():
        raise DatasetError(f"camera manifest not found: {manifest}")
    try:
        meta = json.loads(manifest.read_text())
    except ValueError as exc:
        raise DatasetError(f"{manifest}: invalid JSON ({exc})") from exc
    root = manifest.parent
    frames_meta = meta.get("frames")
    if not frames_meta:
        raise DatasetError(f"{manifest}: no frames")
    frames = []
    for k, fm in enumerate(frames_meta):
        get = lambda key: fm.get(key, meta.get(key))  # noqa: E731
        missing = [key for key in ("fl_x", "fl_y", "cx", "cy", "w", "h") if get(key) is None]
        if missing or "transform_matrix" not in fm or "file_path" not in fm:
            raise DatasetError(f"{manifest}: frame {k} lacks {missing or ['transform_matrix/file_path']}")
        cam = Camera(
            float(get("fl_x")), float(get("fl_y")), float(get("cx")), float(get("cy")), int(get("w")), int(get("h")),
            np.asarray(fm["transform_matrix"], dtype=np.float64),
        )
        img = None
        if load_images:
            img_path = root / fm["file_path"]
            if not img_path.is_file():
                raise DatasetError(f"image not found: {img_path}")
            with Image.open(img_path) as im:
                im = im.convert("RGB")
                if im.size != (cam.width, cam.height):
                    raise DatasetError(f"{img_path}: size {im.size} differs from manifest {(cam.width, cam.height)}")
                if downscale is not None and (downscale[1], downscale[0]) != im.size:
                    im = im.resize((downscale[1], downscale[0]), Image.BOX)
                img = np.asarray(im, dtype=np.float64) / 255.0
        if downscale is not None:
            cam = cam.scaled(*downscale)
        frames.append(Frame(cam, img, fm["file_path"]))
    train, ev = split_indices(len(frames), train_fraction, split_seed)
    return Dataset(frames, train, ev, float(meta.get("near", 0.05)), float(meta.get("far", 6.0)), str(root))


# ---------------------------------------------------------------------------
# rays


def camera_rays(c2w: torch.Tensor, intrinsics: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor):
    """Differentiable ray casting.

    ``c2w`` ``(R, 4, 4)`` (or 3x4), ``intrinsics`` ``(R, 4)`` as
    ``fx, fy, cx, cy``, pixel indices ``(R,)``. Returns world-frame origins
    and unit directions, both ``(R, 3)``.
    """
    fx, fy, cx, cy = intrinsics.unbind(-1)
    u = cols.to(c2w.dtype) + 0.5
    v = rows.to(c2w.dtype) + 0.5
    d_cam = torch.stack([(u - cx) / fx, -(v - cy) / fy, -torch.ones_like(u)], dim=-1)
    d = (c2w[:, :3, :3] @ d_cam[..., None])[..., 0]
    return c2w[:, :3, 3], d / torch.linalg.norm(d, dim=-1, keepdim=True)


def generate_rays(camera: Camera, rows, cols):
    rows = np.atleast_1d(np.asarray(rows))
    cols = np.atleast_1d(np.asarray(cols))
    if (rows < 0).any() or (rows >= camera.height).any() or (cols < 0).any() or (cols >= camera.width).any():
        raise IndexError(f"pixel outside the {camera.height}x{camera.width} image")
    n = rows.shape[0]
    c2w = torch.as_tensor(camera.c2w).expand(n, 4, 4)
    intr = torch.tensor([camera.fx, camera.fy, camera.cx, camera.cy], dtype=torch.float64).expand(n, 4)
    return camera_rays(c2w, intr, torch.as_tensor(rows), torch.as_tensor(cols))


# ---------------------------------------------------------------------------
# Lie groups. Tangent vectors are (rotation omega, translation v).


def _hat(w):
    z = torch.zeros_like(w[..., 0])
    return torch.stack(
        [
            torch.stack([z, -w[..., 2], w[..., 1]], -1),
            torch.stack([w[..., 2], z, -w[..., 0]], -1),
            torch.stack([-w[..., 1], w[..., 0], z], -1),
        ],
        -2,
    )


def _series(theta2):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with small-angle expansions."""
    small = theta2 < 1e-8
    t2 = torch.where(small, torch.ones_like(theta2), theta2)
    t = torch.sqrt(t2)
    a = torch.where(small, 1 - theta2 / 6, torch.sin(t) / t)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(t)) / t2)
    c = torch.where(small, 1 / 6 - theta2 / 120, (t - torch.sin(t)) / (t2 * t))
    return a, b, c


def so3_exp(w):
    """Rodrigues; ``(..., 3) -> (..., 3, 3)``. Torch in -> torch out."""
    as_np = not isinstance(w, torch.Tensor)
    wt = torch.as_tensor(np.asarray(w, dtype=float)) if as_np else w
    K = _hat(wt)
    a, b, _ = _series((wt * wt).sum(-1))
    eye = torch.eye(3, dtype=wt.dtype).expand(K.shape)
    R = eye + a[..., None, None] * K + b[..., None, None] * (K @ K)
    return R.numpy() if as_np else R


def se3_exp(xi):
    """``(..., 6) -> (..., 4, 4)``."""
    as_np = not isinstance(xi, torch.Tensor)
    x = torch.as_tensor(np.asarray(xi, dtype=float)) if as_np else xi
    w, v = x[..., :3], x[..., 3:]
    K = _hat(w)
    a, b, c = _series((w * w).sum(-1))
    eye = torch.eye(3, dtype=x.dtype).expand(K.shape)
    KK = K @ K
    R = eye + a[..., None, None] * K + b[..., None, None] * KK
    V = eye + b[..., None, None] * K + c[..., None, None] * KK
    t = (V @ v[..., None])[..., 0]
    top = torch.cat([R, t[..., None]], dim=-1)
    bottom = torch.tensor([0, 0, 0, 1], dtype=x.dtype).expand(*x.shape[:-1], 1, 4)
    T = torch.cat([top, bottom], dim=-2)
    return T.numpy() if as_np else T


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = math.acos(cos)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        return 0.5 * vee
    if math.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        A = (R + np.eye(3)) / 2
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / math.sqrt(A[k, k])
        return axis * theta
    return theta / (2 * math.sin(theta)) * vee


def se3_log(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    w = so3_log(T[:3, :3])
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-7:
        Vinv = np.eye(3) - 0.5 * K + K @ K / 12
    else:
        Vinv = np.eye(3) - 0.5 * K + (1 - theta * math.sin(theta) / (2 * (1 - math.cos(theta)))) / theta**2 * (K @ K)
    return np.concatenate([w, Vinv @ T[:3, 3]])


def apply_pose_delta(camera: Camera, delta) -> Camera:
    """``T' = exp(delta) T`` (delta expressed in the world frame)."""
    d = delta.detach().numpy() if isinstance(delta, torch.Tensor) else np.asarray(delta, dtype=float)
    c2w = se3_exp(d) @ camera.c2w
    U, _, Vt = np.linalg.svd(c2w[:3, :3])  # scrub round-off so validation passes
    c2w[:3, :3] = U @ Vt
    return replace(camera, c2w=c2w)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
    f = target - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    u = np.cross(r, f)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = r, u, -f, eye
    return T


# ---------------------------------------------------------------------------
# analytic scene


class AnalyticScene(torch.nn.Module):
    """Smooth closed-form radiance field: two textured spheres inside a
    textured backdrop shell. Differentiable in the query points."""

    def __init__(self, sharpness: float = 0.03, sigma_max: float = 60.0, backdrop_radius: float = 3.0):
        super().__init__()
        self.sharpness = sharpness
        self.sigma_max = sigma_max
        self.backdrop_radius = backdrop_radius
        self.spheres = [((0.0, 0.0, 0.0), 0.6), ((0.55, -0.45, 0.35), 0.28)]

    def forward(self, x: torch.Tensor, d: torch.Tensor | None = None):
        eps = self.sharpness
        occ = []
        for c, r in self.spheres:
            dist = torch.linalg.norm(x - torch.tensor(c, dtype=x.dtype), dim=-1)
            occ.append(torch.sigmoid((r - dist) / eps))
        rad = torch.linalg.norm(x, dim=-1)
        occ.append(torch.sigmoid((rad - self.backdrop_radius) / eps))
        occ = torch.stack(occ, dim=-1)
        sigma = self.sigma_max * occ.sum(-1)
        px, py, pz = x.unbind(-1)
        big = torch.stack(
            [0.55 + 0.35 * torch.sin(5 * px + 1.0), 0.45 + 0.35 * torch.sin(4 * py - 0.5), 0.5 + 0.3 * torch.cos(6 * pz)], -1
        )
        small = torch.stack(
            [0.85 + 0.1 * torch.sin(9 * pz), 0.35 + 0.25 * torch.sin(8 * px), 0.2 + 0.15 * torch.cos(7 * py)], -1
        )
        az = torch.atan2(py, px)
        el = pz / rad.clamp_min(1e-6)
        back = torch.stack(
            [
                0.5 + 0.3 * torch.sin(3 * az) * torch.cos(2.5 * el),
                0.45 + 0.25 * torch.cos(2 * az + 1.0),
                0.55 + 0.3 * torch.sin(4 * el + az),
            ],
            -1,
        )
        wts = occ / occ.sum(-1, keepdim=True).clamp_min(1e-12)
        color = wts[..., 0:1] * big + wts[..., 1:2] * small + wts[..., 2:3] * back
        return sigma, color.clamp(0, 1)

    def render(self, origins, dirs, near, far, n_samples=768):
        from .render import volume_render

        edges = torch.linspace(near, far, n_samples + 1, dtype=origins.dtype).expand(origins.shape[0], -1)
        mids = 0.5 * (edges[:, 1:] + edges[:, :-1])
        pts = origins[:, None, :] + dirs[:, None, :] * mids[..., None]
        sigma, color = self(pts)
        return volume_render(sigma, color, edges)


def arc_cameras(n_views: int = 8, height: int = 36, width: int = 64, radius: float = 2.2, span_deg: float = 40.0, fov_deg: float = 60.0):
    """Forward-facing rig: cameras spread over a horizontal arc of
    ``span_deg`` degrees, all aimed near the origin."""
    fx = width / (2 * math.tan(math.radians(fov_deg) / 2))
    cams = []
    for k in range(n_views):
        t = k / max(n_views - 1, 1) - 0.5
        a = math.radians(span_deg) * t
        eye = (radius * math.cos(a), radius * math.sin(a), 0.35 + 0.15 * math.sin(2.5 * math.pi * t))
        cams.append(Camera(fx, fx, width / 2, height / 2, width, height, look_at(eye, (0.0, 0.0, 0.1))))
    return cams


def write_synthetic_dataset(out_dir, n_views: int = 8, height: int = 36, width: int = 64, near: float = 0.05, far: float = 5.5) -> Path:
    """Render the analytic scene from an arc of cameras into a manifest + PNGs."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    scene = AnalyticScene()
    cams = arc_cameras(n_views, height, width)
    frames = []
    for k, cam in enumerate(cams):
        rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        o, d = generate_rays(cam, rows.reshape(-1), cols.reshape(-1))
        with torch.no_grad():
            rgb = scene.render(o, d, near, far).color.reshape(height, width, 3).numpy()
        name = f"images/frame_{k:03d}.png"
        Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)).save(out / name)
        frames.append({"file_path": name, "transform_matrix": cam.c2w.round(12).tolist()})
    c = cams[0]
    manifest = {
        "camera_model": "OPENCV",
        "fl_x": c.fx,
        "fl_y": c.fy,
        "cx": c.cx,
        "cy": c.cy,
        "w": width,
        "h": height,
        "near": near,
        "far": far,
        "frames": frames,
    }
    (out / "transforms.json").write_text(json.dumps(manifest, indent=2))
    return out
