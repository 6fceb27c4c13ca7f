"""Optimisation loop: seeded ray stream, loss assembly, grouped Adam
updates, pose refinement, metrics log and resumable checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import eval as metrics
from .dataset import Dataset, camera_rays, se3_exp
from .diff import AdamState, CheckpointError, LrSchedule, adam_step, load_checkpoint, lr_at, save_checkpoint
from .encoders import HashEncodingConfig, PositionalEncodingConfig
from .field import FieldConfig
from .model import LossReport, LossWeights, QNerfModel, compute_loss
from .render import render_image

__all__ = [
    "TrainConfig",
    "EvalLeakageError",
    "LeakageGuard",
    "RayStream",
    "DeadParameterDetector",
    "Trainer",
    "configs_to_dict",
    "configs_from_dict",
]

METRIC_COLUMNS = ["step", "lr", "photometric", "proposal", "regularizer", "total", "eval_psnr", "eval_ssim"]


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 30000
    rays_per_batch: int = 128
    eval_rays_per_batch: int = 64
    eval_every: int = 0  # 0: evaluate only when asked
    checkpoint_every: int = 0
    seed: int = 0
    lr_pre_warmup: float = 1e-8
    lr_peak: float = 1e-2
    lr_final: float = 1e-4
    warmup_steps: int = 0
    camera_lr_peak: float = 6e-4
    camera_lr_final: float = 6e-6
    pose_refinement: bool = True
    loss_photometric: float = 1.0
    loss_proposal: float = 1.0
    loss_regularizer: float = 1e-3

    def __post_init__(self):
        if self.total_iters <= 0 or self.rays_per_batch <= 0 or self.eval_rays_per_batch <= 0:
            raise ValueError("iteration and ray counts must be positive")
        if self.eval_every < 0 or (self.eval_every and self.total_iters % self.eval_every):
            raise ValueError("eval_every must divide total_iters")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_pre_warmup, self.lr_peak, self.lr_final, self.warmup_steps, self.total_iters)

    def camera_schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_pre_warmup, self.camera_lr_peak, self.camera_lr_final, self.warmup_steps, self.total_iters)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_photometric, self.loss_proposal, self.loss_regularizer)


# ---------------------------------------------------------------------------
# config (de)serialisation for checkpoints


def configs_to_dict(field_cfg: FieldConfig, proposal_cfg, train_cfg: TrainConfig) -> dict:
    return {
        "field": dataclasses.asdict(field_cfg),
        "proposal": dataclasses.asdict(proposal_cfg),
        "train": dataclasses.asdict(train_cfg),
    }


def configs_from_dict(d: dict):
    from .sampling import ProposalConfig

    f = dict(d["field"])
    f["hash"] = HashEncodingConfig(**f["hash"])
    f["positional"] = PositionalEncodingConfig(**f["positional"])
    p = {k: tuple(v) if isinstance(v, list) else v for k, v in d["proposal"].items()}
    return FieldConfig(**f), ProposalConfig(**p), TrainConfig(**d["train"])


# ---------------------------------------------------------------------------
# batching


class EvalLeakageError(AssertionError):
    pass


class LeakageGuard:
    """Counts the rays drawn per frame and refuses held-out frames."""

    def __init__(self, forbidden):
        self.forbidden = frozenset(int(i) for i in forbidden)
        self.seen: dict[int, int] = {}

    def check(self, frame_ids) -> None:
        ids, counts = np.unique(np.asarray(frame_ids), return_counts=True)
        bad = self.forbidden.intersection(ids.tolist())
        if bad:
            raise EvalLeakageError(f"held-out frames {sorted(bad)} reached a training batch")
        for i, c in zip(ids.tolist(), counts.tolist()):
            self.seen[i] = self.seen.get(i, 0) + c


class RayStream:
    """Seeded permutation over every (training image, pixel) pair; a fresh
    permutation is drawn when one is used up."""

    def __init__(self, n_images: int, height: int, width: int, seed: int):
        self.shape = (n_images, height, width)
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n_images * height * width)
        self.pos = 0

    def next(self, k: int):
        parts = []
        while k > 0:
            if self.pos == self.perm.size:
                self.perm = self.rng.permutation(self.perm.size)
                self.pos = 0
            take = min(k, self.perm.size - self.pos)
            parts.append(self.perm[self.pos : self.pos + take])
            self.pos += take
            k -= take
        flat = np.concatenate(parts)
        return np.unravel_index(flat, self.shape)

    def state(self):
        return {"bit_generator": self.rng.bit_generator.state, "pos": self.pos}, torch.from_numpy(self.perm.astype(np.int64))

    def restore(self, meta: dict, perm: torch.Tensor) -> None:
        self.rng.bit_generator.state = meta["bit_generator"]
        self.pos = int(meta["pos"])
        self.perm = perm.numpy().astype(np.int64)


class DeadParameterDetector:
    """Records which parameter groups have ever received a nonzero gradient."""

    @staticmethod
    def group_of(name: str) -> str:
        if name == "pose_delta":
            return "pose deltas"
        if name.endswith("appearance"):
            return "appearance embeddings"
        if ".encoding.table" in name or name.startswith("field.hash."):
            return "hash tables"
        if name.endswith(".angles"):
            return "quantum angles"
        return "classical weights"

    def __init__(self, names):
        self.groups: dict[str, bool] = {}
        self.members: dict[str, str] = {}
        for n in names:
            g = self.group_of(n)
            self.members[n] = g
            self.groups.setdefault(g, False)

    def update(self, grads: dict) -> None:
        for n, g in grads.items():
            if g is not None and n in self.members and not self.groups[self.members[n]]:
                if bool((g != 0).any()):
                    self.groups[self.members[n]] = True

    def dead(self) -> list[str]:
        return sorted(g for g, alive in self.groups.items() if not alive)


# ---------------------------------------------------------------------------


class Trainer:
    def __init__(
        self,
        dataset: Dataset,
        field_cfg: FieldConfig,
        proposal_cfg,
        train_cfg: TrainConfig,
        metrics_path=None,
        meta: dict | None = None,
    ):
        self.dataset = dataset
        self.train_cfg = train_cfg
        self.train_ids = np.asarray(dataset.train_indices, dtype=np.int64)
        self.eval_ids = list(dataset.eval_indices)
        if not len(self.train_ids):
            raise ValueError("dataset has no training frames")
        self.field_cfg = dataclasses.replace(field_cfg, n_images=len(self.train_ids))
        self.proposal_cfg = proposal_cfg
        self.meta = dict(meta or {})

        init_gen = torch.Generator().manual_seed(train_cfg.seed)
        self.model = QNerfModel(self.field_cfg, proposal_cfg, dataset.near, dataset.far, init_gen)
        self.pose_delta = torch.nn.Parameter(torch.zeros(len(self.train_ids), 6, dtype=torch.float64))
        self.sample_gen = torch.Generator().manual_seed(train_cfg.seed + 1)
        self.stream = RayStream(len(self.train_ids), dataset.height, dataset.width, train_cfg.seed)
        self.guard = LeakageGuard(self.eval_ids)

        self.images = torch.as_tensor(dataset.images(self.train_ids))
        self.base_c2w = torch.as_tensor(dataset.c2w(self.train_ids))
        self.intrinsics = torch.as_tensor(dataset.intrinsics(self.train_ids))

        self.groups = {
            "field": {f"field.{n}": p for n, p in self.model.field.named_parameters()},
            "proposal": {f"proposal.{n}": p for n, p in self.model.proposal.named_parameters()},
            "camera": {"pose_delta": self.pose_delta} if train_cfg.pose_refinement else {},
        }
        self.adam = {g: AdamState() for g in self.groups}
        self.schedules = {"field": train_cfg.schedule(), "proposal": train_cfg.schedule(), "camera": train_cfg.camera_schedule()}
        self.detector = DeadParameterDetector([n for g in self.groups.values() for n in g])
        self.step = 0
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.last_loss: LossReport | None = None

    # -- one iteration --------------------------------------------------------

    def train_cameras(self, j: torch.Tensor) -> torch.Tensor:
        c2w = self.base_c2w[j]
        if self.train_cfg.pose_refinement:
            c2w = se3_exp(self.pose_delta[j]) @ c2w
        return c2w

    def train_step(self) -> LossReport:
        cfg = self.train_cfg
        if self.step >= cfg.total_iters:
            raise RuntimeError("training already finished")
        step = self.step
        j, rows, cols = (torch.from_numpy(a.astype(np.int64)) for a in self.stream.next(cfg.rays_per_batch))
        self.guard.check(self.train_ids[j.numpy()])
        target = self.images[j, rows, cols]
        origins, dirs = camera_rays(self.train_cameras(j), self.intrinsics[j], rows, cols)
        update_proposal = step % self.proposal_cfg.update_every == 0

        pred, edges, levels = self.model(origins, dirs, j, step, update_proposal, self.sample_gen)
        loss = compute_loss(pred, target, edges, levels, cfg.loss_weights)

        params = {n: p for g in self.groups.values() for n, p in g.items()}
        for p in params.values():
            p.grad = None
        loss.total.backward()
        grads = {n: p.grad for n, p in params.items()}
        self.detector.update(grads)
        lr = lr_at(self.schedules["field"], step)
        for g, members in self.groups.items():
            if g == "proposal" and not update_proposal:
                continue
            adam_step(self.adam[g], members, {n: grads[n] for n in members}, lr_at(self.schedules[g], step))
        for p in params.values():
            p.grad = None

        self.step += 1
        self.last_loss = loss
        row = {"step": self.step, "lr": lr, **loss.as_floats()}
        if cfg.eval_every and self.step % cfg.eval_every == 0 and self.eval_ids:
            rep = self.evaluate()
            row["eval_psnr"], row["eval_ssim"] = rep.mean("psnr"), rep.mean("ssim")
        self._log(row)
        return loss

    def fit(self, iters: int | None = None, checkpoint_dir=None, callback=None):
        end = self.train_cfg.total_iters if iters is None else min(self.train_cfg.total_iters, self.step + iters)
        every = self.train_cfg.checkpoint_every
        while self.step < end:
            loss = self.train_step()
            if callback is not None:
                callback(self, loss)
            if checkpoint_dir and every and self.step % every == 0:
                self.save(Path(checkpoint_dir) / f"step_{self.step:06d}.ckpt")
        return self

    # -- evaluation -----------------------------------------------------------

    def render_frame(self, idx: int):
        """Render dataset frame ``idx`` at its recorded (unrefined) pose with
        the mean appearance embedding."""
        cam = self.dataset.frames[idx].camera
        was_training = self.model.training
        self.model.eval()
        try:
            return render_image(self.model, cam, chunk=self.train_cfg.eval_rays_per_batch)
        finally:
            self.model.train(was_training)

    def evaluate(self, indices=None, **info) -> metrics.MetricReport:
        indices = self.eval_ids if indices is None else list(indices)
        preds = {i: self.render_frame(i).rgb for i in indices}
        gts = {i: self.dataset.frames[i].image for i in indices}
        return metrics.evaluate_views(preds, gts, **info)

    # -- logging --------------------------------------------------------------

    def _log(self, row: dict) -> None:
        if self.metrics_path is None:
            return
        new = not self.metrics_path.exists()
        with open(self.metrics_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(METRIC_COLUMNS)
            w.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])

    # -- checkpoints ----------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        t = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        t["pose_delta"] = self.pose_delta.detach()
        for g, st in self.adam.items():
            t.update(st.tensors(f"adam.{g}"))
        t["rng.sample"] = self.sample_gen.get_state()
        t["stream.perm"] = self.stream.state()[1]
        return t

    def save(self, path) -> None:
        stream_meta, _ = self.stream.state()
        meta = {
            "step": self.step,
            "adam_steps": {g: st.step for g, st in self.adam.items()},
            "stream": stream_meta,
            "configs": configs_to_dict(self.field_cfg, self.proposal_cfg, self.train_cfg),
            "train_indices": self.train_ids.tolist(),
            "eval_indices": self.eval_ids,
            "near": self.dataset.near,
            "far": self.dataset.far,
            **self.meta,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.state_tensors(), meta)

    def load_state(self, tensors: dict, meta: dict) -> None:
        if meta.get("train_indices") != self.train_ids.tolist():
            raise CheckpointError("checkpoint was trained on a different split")
        model_sd = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
        missing = set(self.model.state_dict()) - set(model_sd)
        if missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}...")
        self.model.load_state_dict(model_sd)
        with torch.no_grad():
            self.pose_delta.copy_(tensors["pose_delta"])
        for g, st in self.adam.items():
            st.step = int(meta["adam_steps"][g])
            pre = f"adam.{g}."
            st.m = {k[len(pre) + 2 :]: v.clone() for k, v in tensors.items() if k.startswith(pre + "m.")}
            st.v = {k[len(pre) + 2 :]: v.clone() for k, v in tensors.items() if k.startswith(pre + "v.")}
        self.sample_gen.set_state(tensors["rng.sample"])
        self.stream.restore(meta["stream"], tensors["stream.perm"])
        self.step = int(meta["step"])

    @classmethod
    def from_checkpoint(cls, path, dataset: Dataset, metrics_path=None) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        field_cfg, proposal_cfg, train_cfg = configs_from_dict(meta["configs"])
        extra = {k: v for k, v in meta.items() if k not in _CORE_META}
        tr = cls(dataset, field_cfg, proposal_cfg, train_cfg, metrics_path, extra)
        tr.load_state(tensors, meta)
        return tr


_CORE_META = {"step", "adam_steps", "stream", "configs", "train_indices", "eval_indices", "near", "far"}


def load_model(path) -> tuple[QNerfModel, dict]:
    """Rebuild the trained model from a checkpoint without a dataset."""
    tensors, meta = load_checkpoint(path)
    field_cfg, proposal_cfg, _ = configs_from_dict(meta["configs"])
    model = QNerfModel(field_cfg, proposal_cfg, meta["near"], meta["far"])
    model.load_state_dict({k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")})
    model.eval()
    return model, meta


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)
