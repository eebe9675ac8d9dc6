"""Run configuration: one YAML file with task, quant, train and paths sections
plus a seed, overridable key by key from the command line."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .autograd import ContractError
from .diffusion import TeacherConfig
from .finetune import TrainConfig
from .quant import PASSTHROUGH_BITS
from .rng import substream_seed

SECTIONS = ("task", "quant", "train", "paths")


@dataclass
class TaskSection:
    dataset: str = "blobs"
    dataset_size: int = 2048
    resolution: int = 16
    in_channels: int = 1
    T: int = 100
    num_steps: int = 20
    beta_start: float = 1e-3
    beta_end: float = 0.1
    channels: list[int] = field(default_factory=lambda: [8, 16])
    d_e: int = 32
    d_temb: int = 64
    teacher_steps: int = 2000
    teacher_batch_size: int = 32
    teacher_lr: float = 2e-3
    teacher_loss_threshold: float = 0.5
    calib_per_step: int = 64
    eval_samples: int = 64


@dataclass
class QuantSection:
    bits_w: int = 4
    bits_a: int = 4
    num_clusters: int = 20
    grid: int = 80
    io_bits: int | None = 8
    per_channel: bool = False


@dataclass
class TrainSection:
    epochs: int = 20
    lr_weights: float = 1e-5
    lr_scales: float = 1e-4
    batch_size: int = 32
    clip_norm: float = 1.0
    use_task_loss: bool = True
    relative_scale_lr: bool = False


@dataclass
class PathsSection:
    out_dir: str = "runs/default"
    teacher: str | None = None
    calibration: str | None = None


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    quant: QuantSection = field(default_factory=QuantSection)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    def __post_init__(self):
        for name in ("bits_w", "bits_a"):
            bits = getattr(self.quant, name)
            if bits != PASSTHROUGH_BITS and not 2 <= bits <= 8:
                raise ContractError(f"quant.{name} must be in [2, 8] or {PASSTHROUGH_BITS}, got {bits}")
        if self.task.num_steps < 1 or self.task.T % self.task.num_steps:
            raise ContractError(f"task.num_steps must divide task.T, got {self.task.num_steps} and {self.task.T}")
        if self.quant.num_clusters > self.task.num_steps:
            raise ContractError("quant.num_clusters cannot exceed task.num_steps: some clusters would get no "
                                "calibration data")

    # -- paths --------------------------------------------------------------------
    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    @property
    def teacher_path(self) -> Path:
        return Path(self.paths.teacher) if self.paths.teacher else self.out_dir / "teacher.qckp"

    @property
    def calibration_path(self) -> Path:
        return Path(self.paths.calibration) if self.paths.calibration else self.out_dir / "calib.qcal"

    @property
    def ptq_path(self) -> Path:
        return self.out_dir / "ptq.qckp"

    @property
    def quest_path(self) -> Path:
        return self.out_dir / "quest.qckp"

    # -- derived configs ------------------------------------------------------------
    def teacher_config(self) -> TeacherConfig:
        t = self.task
        return TeacherConfig(steps=t.teacher_steps, batch_size=t.teacher_batch_size, lr=t.teacher_lr, T=t.T,
                             beta_start=t.beta_start, beta_end=t.beta_end, channels=tuple(t.channels), d_e=t.d_e,
                             d_temb=t.d_temb, loss_threshold=t.teacher_loss_threshold)

    def train_config(self) -> TrainConfig:
        q, tr = self.quant, self.train
        return TrainConfig(epochs=tr.epochs, lr_weights=tr.lr_weights, lr_scales=tr.lr_scales,
                           batch_size=tr.batch_size, clip_norm=tr.clip_norm, bits_w=q.bits_w, bits_a=q.bits_a,
                           num_clusters=q.num_clusters, grid=q.grid, io_bits=q.io_bits, per_channel=q.per_channel,
                           use_task_loss=tr.use_task_loss, relative_scale_lr=tr.relative_scale_lr, seed=self.seed)

    def stream(self, name: str) -> int:
        return substream_seed(self.seed, name)

    # -- serialization ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self, sections=("task", "quant", "train")) -> str:
        """Digest of the given sections and the seed; paths never enter it."""
        d = self.to_dict()
        payload = {name: d[name] for name in sections if name != "paths"}
        payload["seed"] = self.seed
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ContractError(f"unknown config sections {sorted(unknown)}")
        kinds = {"task": TaskSection, "quant": QuantSection, "train": TrainSection, "paths": PathsSection}
        built = {}
        for name, kind in kinds.items():
            section = data.get(name) or {}
            allowed = {f.name for f in fields(kind)}
            bad = set(section) - allowed
            if bad:
                raise ContractError(f"unknown keys in section {name!r}: {sorted(bad)}")
            built[name] = kind(**section)
        return cls(**built, seed=int(data.get("seed", 0)))

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        data: dict = {}
        if path is not None:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
            if not isinstance(data, dict):
                raise ContractError(f"{path}: expected a mapping at the top level")
        for item in overrides:
            apply_override(data, item)
        return cls.from_dict(data)


def apply_override(data: dict, item: str) -> None:
    """Apply ``section.key=value`` (or ``seed=value``); the value is parsed as YAML."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ContractError(f"override {item!r} is not of the form section.key=value")
    value = yaml.safe_load(raw)
    parts = key.split(".")
    if parts == ["seed"]:
        data["seed"] = value
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ContractError(f"override key {key!r} must be seed or one of {SECTIONS} followed by .key")
    section = data.setdefault(parts[0], {}) or {}
    data[parts[0]] = section
    section[parts[1]] = value
