"""Run configuration: TOML files validated against a published schema.

Each top-level table maps to one part of the pipeline (``dataset``,
``field``, ``proposal``, ``train``, ``output``). Unknown keys are rejected and
validation errors point at the offending line.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Literal, Optional

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .encoders import HASH_PRESETS, HashEncodingConfig, PositionalEncodingConfig
from .field import VARIANTS, FieldConfig
from .qiren import PROFILES, parse_stack_spec
from .sampling import ProposalConfig
from .trainer import TrainConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "dump_config",
    "config_schema",
    "default_config_text",
]


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    path: str = Field("data/synthetic8", description="Directory holding transforms.json, or the manifest itself.")
    downscale: Optional[tuple[int, int]] = Field(None, description="Resize images to [height, width] and rescale intrinsics.")
    train_fraction: float = Field(0.9, gt=0, le=1, description="Share of frames used for training.")
    split_seed: Optional[int] = Field(None, description="Seeded random split; evenly spaced split when absent.")


class HashSection(_Section):
    levels: int = Field(16, ge=1)
    features_per_level: int = Field(2, ge=1)
    min_res: int = Field(16, ge=1)
    max_res: int = Field(2048, ge=1)
    log2_table: int = Field(19, ge=1, le=24)


class PositionalSection(_Section):
    n_bands: int = Field(10, ge=1)
    min_exp: float = 0.0
    max_exp: float = 9.0


class FieldSection(_Section):
    variant: Literal[VARIANTS] = Field("classical", description="classical, q-color, q-density or q-both.")
    encoding: str = Field("C1", description="Hash preset C1..C7, 'custom' (uses [field.hash]) or 'positional'.")
    hash: HashSection = Field(default_factory=HashSection, description="Grid settings when encoding = 'custom'.")
    positional: PositionalSection = Field(default_factory=PositionalSection)
    geo_dim: int = Field(15, ge=0, description="Width of the geometric feature vector h(x).")
    density_hidden: int = Field(64, ge=1)
    density_layers: int = Field(1, ge=0)
    color_hidden: int = Field(64, ge=1)
    color_layers: int = Field(2, ge=0)
    appearance_dim: int = Field(32, ge=0)
    sh_degree: int = Field(4, ge=1, le=5)
    density_qiren: str = Field("2L+2S", description="Quantum density head, 'xL+yS'.")
    color_qiren: str = Field("1L+2S", description="Quantum colour head, 'xL+yS'.")
    qiren_qubits: int = Field(8, ge=1, le=8)
    qiren_profile: Literal[tuple(PROFILES)] = "default"
    qiren_init: Literal["uniform", "small"] = "uniform"
    quantum_method: Literal["adjoint", "parameter-shift"] = "adjoint"

    @field_validator("encoding")
    @classmethod
    def _encoding(cls, v):
        if v not in HASH_PRESETS and v not in ("custom", "positional"):
            raise ValueError(f"unknown encoding {v!r}; expected one of {sorted(HASH_PRESETS)}, 'custom' or 'positional'")
        return v

    @field_validator("density_qiren", "color_qiren")
    @classmethod
    def _qiren(cls, v):
        parse_stack_spec(v)
        return v


class ProposalSection(_Section):
    stages: tuple[int, ...] = Field((256, 96), description="Samples per proposal stage.")
    final_samples: int = Field(48, ge=1)
    levels: int = Field(5, ge=1)
    features_per_level: int = Field(2, ge=1)
    hidden: int = Field(16, ge=1)
    log2_table: int = Field(17, ge=1, le=24)
    min_res: int = Field(16, ge=1)
    max_res: tuple[int, ...] = (128, 256)
    update_every: int = Field(5, ge=1)
    anneal_slope: float = Field(10.0, gt=0)
    anneal_warmup: int = Field(1000, ge=0)


class TrainSection(_Section):
    total_iters: int = Field(30000, ge=1)
    rays_per_batch: int = Field(128, ge=1)
    eval_rays_per_batch: int = Field(64, ge=1)
    eval_every: int = Field(0, ge=0, description="Evaluate held-out views every N steps; 0 disables.")
    checkpoint_every: int = Field(0, ge=0)
    seed: int = 0
    lr_pre_warmup: float = Field(1e-8, gt=0)
    lr_peak: float = Field(1e-2, gt=0)
    lr_final: float = Field(1e-4, gt=0)
    warmup_steps: int = Field(0, ge=0)
    camera_lr_peak: float = Field(6e-4, gt=0)
    camera_lr_final: float = Field(6e-6, gt=0)
    pose_refinement: bool = True
    loss_photometric: float = Field(1.0, ge=0)
    loss_proposal: float = Field(1.0, ge=0)
    loss_regularizer: float = Field(1e-3, ge=0)


class OutputSection(_Section):
    dir: str = Field("runs/default", description="Output directory; overridden by QNERF_OUTPUT_DIR.")


class RunConfig(_Section):
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    field: FieldSection = Field(default_factory=FieldSection)
    proposal: ProposalSection = Field(default_factory=ProposalSection)
    train: TrainSection = Field(default_factory=TrainSection)
    output: OutputSection = Field(default_factory=OutputSection)

    # -- conversion to runtime objects ----------------------------------------

    def field_config(self) -> FieldConfig:
        f = self.field
        if f.encoding == "positional":
            kind, hash_cfg = "positional", HASH_PRESETS["C1"]
        elif f.encoding == "custom":
            kind, hash_cfg = "hash", HashEncodingConfig(**f.hash.model_dump(), name="custom")
        else:
            kind, hash_cfg = "hash", HASH_PRESETS[f.encoding]
        return FieldConfig(
            variant=f.variant,
            density_encoding=kind,
            hash=hash_cfg,
            positional=PositionalEncodingConfig(f.positional.n_bands, f.positional.min_exp, f.positional.max_exp),
            geo_dim=f.geo_dim,
            density_hidden=f.density_hidden,
            density_layers=f.density_layers,
            color_hidden=f.color_hidden,
            color_layers=f.color_layers,
            appearance_dim=f.appearance_dim,
            sh_degree=f.sh_degree,
            density_qiren=f.density_qiren,
            color_qiren=f.color_qiren,
            qiren_qubits=f.qiren_qubits,
            qiren_profile=f.qiren_profile,
            qiren_init=f.qiren_init,
            quantum_method=f.quantum_method,
        )

    def proposal_config(self) -> ProposalConfig:
        return ProposalConfig(**self.proposal.model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump())

    def build(self):
        """Validate cross-section constraints by constructing every runtime
        config; returns ``(field, proposal, train)``."""
        return self.field_config(), self.proposal_config(), self.train_config()


def config_schema() -> dict:
    return RunConfig.model_json_schema()


def _key_line(text: str, loc: tuple) -> int | None:
    """Best-effort line of ``loc`` (section path + key) in raw TOML text."""
    keys = [str(k) for k in loc if not isinstance(k, int)]
    if not keys:
        return None
    lines = text.splitlines()
    header = None
    # longest table header that prefixes the location
    for depth in range(len(keys) - 1, 0, -1):
        name = ".".join(keys[:depth])
        pat = re.compile(r"^\s*\[\s*" + re.escape(name).replace(r"\.", r"\s*\.\s*") + r"\s*\]")
        for i, ln in enumerate(lines):
            if pat.match(ln):
                header, rest = i, keys[depth:]
                break
        if header is not None:
            break
    if header is None:
        header, rest = -1, keys
    key_pat = re.compile(r"^\s*" + re.escape(rest[0]) + r"\s*(=|\.)")
    for i in range(header + 1, len(lines)):
        if i > header + 1 and re.match(r"^\s*\[", lines[i]):
            break
        if key_pat.match(lines[i]):
            return i + 1
    return header + 1 if header >= 0 else None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", int(m.group(1)) if m else None, source) from exc
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(err["loc"])
        msg = f"{'.'.join(str(k) for k in loc)}: {err['msg']}"
        if len(exc.errors()) > 1:
            msg += f" (and {len(exc.errors()) - 1} more)"
        raise ConfigError(msg, _key_line(text, loc), source) from exc
    try:
        cfg.build()
    except ValueError as exc:
        raise ConfigError(str(exc), None, source) from exc
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(p)) from exc
    return parse_config(text, str(p))


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(_strip_none(cfg.model_dump(mode="python")))


def default_config_text() -> str:
    return (Path(__file__).parent / "configs" / "default.toml").read_text()


def schema_text() -> str:
    return json.dumps(config_schema(), indent=2)
