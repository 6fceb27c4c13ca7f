import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

import oracles
from qnerf.dataset import (
    AnalyticScene,
    Camera,
    DatasetError,
    PoseError,
    apply_pose_delta,
    camera_rays,
    generate_rays,
    load_dataset,
    look_at,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
    split_indices,
    write_synthetic_dataset,
)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("tiny"), n_views=4, height=12, width=16)


def _manifest(path, n, w=16, h=12, with_images=False):
    frames = []
    for k in range(n):
        c2w = look_at((2.0, 0.1 * k, 0.3), (0.0, 0.0, 0.0))
        frames.append({"file_path": f"img_{k}.png", "transform_matrix": c2w.tolist()})
        if with_images:
            Image.fromarray(np.full((h, w, 3), 40 * k % 255, np.uint8)).save(path / f"img_{k}.png")
    path.joinpath("transforms.json").write_text(
        json.dumps({"fl_x": 1500.0, "fl_y": 1400.0, "cx": w / 2, "cy": h / 2, "w": w, "h": h, "frames": frames})
    )
    return path


def test_fixture_loads(tiny):
    ds = load_dataset(tiny)
    assert len(ds) == 4 and ds.height == 12 and ds.width == 16
    for f in ds.frames:
        R = f.camera.rotation
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-6) and np.linalg.det(R) > 0
        assert f.image.shape == (12, 16, 3)
    assert ds.near == 0.05 and ds.far == 5.5
    assert "frames: 4 (train 3, eval 1)" in ds.summary()


def test_matrix_parsing_is_exact(tiny):
    meta = json.loads((tiny / "transforms.json").read_text())
    ds = load_dataset(tiny, load_images=False)
    for f, fm in zip(ds.frames, meta["frames"]):
        assert np.array_equal(f.camera.c2w, np.asarray(fm["transform_matrix"]))
        assert f.camera.fx == meta["fl_x"] and f.camera.cy == meta["cy"]


def test_226_frame_split(tmp_path):
    ds = load_dataset(_manifest(tmp_path, 226), load_images=False)
    assert (len(ds.train_indices), len(ds.eval_indices)) == (204, 22)
    assert not set(ds.train_indices) & set(ds.eval_indices)
    assert sorted(ds.train_indices + ds.eval_indices) == list(range(226))


def test_split_determinism():
    assert split_indices(50, 0.9, seed=3) == split_indices(50, 0.9, seed=3)
    assert split_indices(50, 0.9) == split_indices(50, 0.9)
    assert split_indices(50, 0.9, seed=3) != split_indices(50, 0.9, seed=4)
    assert split_indices(8) == ([0, 1, 2, 4, 5, 6, 7], [3])


def test_downscale_rescales_intrinsics(tmp_path):
    ds = load_dataset(_manifest(tmp_path, 1, w=1920, h=1080, with_images=True), downscale=(36, 64))
    cam = ds.frames[0].camera
    assert ds.frames[0].image.shape == (36, 64, 3)
    assert math.isclose(cam.fx, 1500.0 * 64 / 1920) and math.isclose(cam.fy, 1400.0 * 36 / 1080)
    assert math.isclose(cam.cx, 32.0) and math.isclose(cam.cy, 18.0)
    assert (cam.width, cam.height) == (64, 36)


def test_missing_files(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    _manifest(tmp_path, 2)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_bad_rotation(tmp_path):
    _manifest(tmp_path, 1)
    meta = json.loads((tmp_path / "transforms.json").read_text())
    meta["frames"][0]["transform_matrix"][0][1] += 0.2
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    with pytest.raises(PoseError):
        load_dataset(tmp_path, load_images=False)


def _cam(c2w=None):
    return Camera(20.0, 20.0, 8.0, 6.0, 16, 12, look_at((2.0, 0.5, 0.4), (0, 0, 0)) if c2w is None else c2w)


def test_principal_point_ray_is_forward():
    cam = Camera(20.0, 20.0, 8.5, 6.5, 16, 12, look_at((2.0, 0.5, 0.4), (0, 0, 0)))
    o, d = generate_rays(cam, [6], [8])
    assert np.allclose(d[0].numpy(), cam.forward, atol=1e-12)
    assert np.allclose(o[0].numpy(), cam.center)


def test_rays_unit_and_translation_only_changes_origin():
    cam = _cam()
    rows, cols = np.meshgrid(np.arange(12), np.arange(16), indexing="ij")
    o, d = generate_rays(cam, rows.ravel(), cols.ravel())
    assert torch.max(torch.abs(torch.linalg.norm(d, dim=-1) - 1)) < 1e-9
    moved = cam.c2w.copy()
    moved[:3, 3] += [0.3, -1.0, 2.0]
    o2, d2 = generate_rays(_cam(moved), rows.ravel(), cols.ravel())
    assert torch.equal(d, d2) and not torch.allclose(o, o2)


def test_out_of_bounds_pixel():
    with pytest.raises(IndexError):
        generate_rays(_cam(), [12], [0])
    with pytest.raises(IndexError):
        generate_rays(_cam(), [0], [-1])


def test_zero_delta_and_pure_translation():
    cam = _cam()
    assert np.allclose(apply_pose_delta(cam, np.zeros(6)).c2w, cam.c2w, atol=1e-15)
    moved = apply_pose_delta(cam, [0, 0, 0, 0.1, -0.2, 0.3])
    assert np.allclose(moved.rotation, cam.rotation, atol=1e-15)
    assert np.allclose(moved.center - cam.center, [0.1, -0.2, 0.3], atol=1e-15)


def test_so3_matches_reference(rng):
    for _ in range(50):
        w = rng.normal(size=3) * rng.uniform(0, 3)
        assert np.allclose(so3_exp(w), oracles.so3_exp_ref(w), atol=1e-12)


def test_exp_log_round_trip(rng):
    for _ in range(200):
        xi = rng.normal(size=6)
        xi *= rng.uniform(0, 0.999) / np.linalg.norm(xi)
        assert np.max(np.abs(se3_log(se3_exp(xi)) - xi)) < 1e-9
    for w in (np.array([1e-9, 0, 0]), np.array([0, 0, math.pi - 1e-8])):
        assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-7)


def test_pose_gradient_matches_fd():
    scene = AnalyticScene()
    cam = Camera(14.0, 14.0, 4.0, 3.0, 8, 6, look_at((2.2, 0.3, 0.4), (0, 0, 0.1)))
    rows, cols = np.meshgrid(np.arange(0, 6, 2), np.arange(0, 8, 2), indexing="ij")
    rows, cols = torch.as_tensor(rows.ravel()), torch.as_tensor(cols.ravel())
    intr = torch.tensor([[cam.fx, cam.fy, cam.cx, cam.cy]], dtype=torch.float64).expand(len(rows), 4)
    base = torch.as_tensor(cam.c2w)
    with torch.no_grad():
        o, d = camera_rays(base.expand(len(rows), 4, 4), intr, rows, cols)
        target = scene.render(o, d, 0.05, 5.5, 96).color + 0.05

    def loss(delta):
        c2w = (se3_exp(delta) @ base).expand(len(rows), 4, 4)
        o, d = camera_rays(c2w, intr, rows, cols)
        return ((scene.render(o, d, 0.05, 5.5, 96).color - target) ** 2).mean()

    x0 = np.array([0.01, -0.02, 0.015, 0.02, 0.01, -0.01])
    delta = torch.tensor(x0, requires_grad=True)
    loss(delta).backward()
    fd = oracles.central_diff(lambda v: float(loss(torch.tensor(v))), x0, h=1e-6)
    assert np.max(np.abs(delta.grad.numpy() - fd)) < 1e-4 * max(1.0, np.max(np.abs(fd)))
