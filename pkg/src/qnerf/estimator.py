"""scikit-learn style front ends: a whole-scene estimator and a QIREN
regressor, plus input validation helpers."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import Camera, Dataset, load_dataset
from .diff import AdamState, LrSchedule, adam_step, lr_at
from .encoders import HASH_PRESETS, HashEncodingConfig
from .eval import psnr
from .field import FieldConfig
from .qiren import QirenStack, parse_stack_spec
from .render import render_image
from .sampling import ProposalConfig
from .trainer import TrainConfig, Trainer

__all__ = ["QNeRF", "QirenRegressor", "validate_rays", "validate_image", "validate_dataset"]


def validate_rays(X) -> tuple[torch.Tensor, torch.Tensor]:
    """``(N, 6)`` rows of ``origin, direction``; directions must be unit."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if X.shape[1] != 6:
        raise ValueError(f"rays need 6 columns (origin, direction), got {X.shape[1]}")
    norms = np.linalg.norm(X[:, 3:], axis=1)
    if np.any(np.abs(norms - 1) > 1e-6):
        raise ValueError("ray directions must be unit length")
    return torch.from_numpy(X[:, :3].copy()), torch.from_numpy(X[:, 3:].copy())


def validate_image(img, channels: int = 3) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != channels:
        raise ValueError(f"expected an (H, W, {channels}) image, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")
    return arr


def validate_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        ds = data
    else:
        ds = load_dataset(data)
    if any(f.image is None for f in ds.frames):
        raise ValueError("dataset frames need images for training")
    return ds


class QNeRF(BaseEstimator):
    """Fit a radiance field to a multi-view dataset.

    ``fit`` takes a :class:`~qnerf.dataset.Dataset` or a path to one.
    ``predict`` maps ``(N, 6)`` rays to RGB. ``score`` is the mean PSNR over
    the dataset's held-out views.
    """

    def __init__(
        self,
        variant: str = "classical",
        encoding: str = "C1",
        hash_config: dict | None = None,
        color_qiren: str = "1L+2S",
        density_qiren: str = "2L+2S",
        qiren_qubits: int = 8,
        appearance_dim: int = 32,
        color_hidden: int = 64,
        total_iters: int = 30000,
        rays_per_batch: int = 128,
        proposal_stages: tuple = (256, 96),
        final_samples: int = 48,
        pose_refinement: bool = True,
        seed: int = 0,
    ):
        self.variant = variant
        self.encoding = encoding
        self.hash_config = hash_config
        self.color_qiren = color_qiren
        self.density_qiren = density_qiren
        self.qiren_qubits = qiren_qubits
        self.appearance_dim = appearance_dim
        self.color_hidden = color_hidden
        self.total_iters = total_iters
        self.rays_per_batch = rays_per_batch
        self.proposal_stages = proposal_stages
        self.final_samples = final_samples
        self.pose_refinement = pose_refinement
        self.seed = seed

    def _configs(self):
        if self.encoding == "positional":
            kind, hash_cfg = "positional", HASH_PRESETS["C1"]
        elif self.encoding == "custom":
            kind, hash_cfg = "hash", HashEncodingConfig(**(self.hash_config or {}))
        else:
            kind, hash_cfg = "hash", HASH_PRESETS[self.encoding]
        field_cfg = FieldConfig(
            variant=self.variant,
            density_encoding=kind,
            hash=hash_cfg,
            appearance_dim=self.appearance_dim,
            color_hidden=self.color_hidden,
            density_qiren=self.density_qiren,
            color_qiren=self.color_qiren,
            qiren_qubits=self.qiren_qubits,
        )
        prop = ProposalConfig(stages=tuple(self.proposal_stages), final_samples=self.final_samples)
        train = TrainConfig(
            total_iters=self.total_iters, rays_per_batch=self.rays_per_batch, pose_refinement=self.pose_refinement, seed=self.seed
        )
        return field_cfg, prop, train

    def fit(self, X, y=None):
        ds = validate_dataset(X)
        self.trainer_ = Trainer(ds, *self._configs())
        self.trainer_.fit()
        self.model_ = self.trainer_.model
        self.model_.eval()
        self.n_train_images_ = len(ds.train_indices)
        return self

    @torch.no_grad()
    def predict(self, X, chunk: int = 4096) -> np.ndarray:
        check_is_fitted(self, "model_")
        o, d = validate_rays(X)
        out = [self.model_.render_rays(o[s : s + chunk], d[s : s + chunk]).color for s in range(0, o.shape[0], chunk)]
        return torch.cat(out).numpy() if out else np.zeros((0, 3))

    def render(self, camera: Camera) -> np.ndarray:
        check_is_fitted(self, "model_")
        return render_image(self.model_, camera).rgb

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "model_")
        ds = validate_dataset(X)
        views = ds.eval_indices or list(range(len(ds)))
        return float(np.mean([psnr(self.render(ds.frames[i].camera), ds.frames[i].image) for i in views]))


class QirenRegressor(RegressorMixin, BaseEstimator):
    """Least-squares regression with a QIREN stack, trained with Adam."""

    def __init__(
        self,
        spec: str = "1L+2S",
        n_qubits: int = 4,
        profile: str = "default",
        init: str = "uniform",
        lr: float = 1e-2,
        final_lr: float = 1e-4,
        n_iter: int = 500,
        method: str = "adjoint",
        random_state: int = 0,
    ):
        self.spec = spec
        self.n_qubits = n_qubits
        self.profile = profile
        self.init = init
        self.lr = lr
        self.final_lr = final_lr
        self.n_iter = n_iter
        self.method = method
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True, y_numeric=True)
        self._y_1d = y.ndim == 1
        Y = y.reshape(len(y), -1)
        self.n_features_in_ = X.shape[1]
        spec = parse_stack_spec(self.spec, self.n_qubits, X.shape[1], Y.shape[1], self.profile)
        gen = torch.Generator().manual_seed(self.random_state)
        self.stack_ = QirenStack(spec, gen, self.init, self.method)
        params = dict(self.stack_.named_parameters())
        state = AdamState()
        sched = LrSchedule(1e-8, self.lr, self.final_lr, 0, max(self.n_iter, 1))
        xt, yt = torch.from_numpy(X), torch.from_numpy(Y)
        self.loss_curve_ = []
        for it in range(self.n_iter):
            for p in params.values():
                p.grad = None
            loss = torch.mean((self.stack_(xt) - yt) ** 2)
            loss.backward()
            adam_step(state, params, {n: p.grad for n, p in params.items()}, lr_at(sched, it))
            self.loss_curve_.append(float(loss.detach()))
        self.stack_.eval()
        return self

    @torch.no_grad()
    def predict(self, X):
        check_is_fitted(self, "stack_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = self.stack_(torch.from_numpy(X)).numpy()
        return out[:, 0] if self._y_1d else out
