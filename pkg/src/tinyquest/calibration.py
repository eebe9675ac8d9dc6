"""Data-free calibration sets drawn from full-precision teacher trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor
from .binfmt import read_container, write_container
from .diffusion import (NoiseSchedule, ToyUNet, ddim_step, layer_selection, time_embedding,
                        timesteps)

QCAL_MAGIC = b"QCAL"
QCAL_VERSION = 1


@dataclass
class StepRecord:
    x_t: np.ndarray
    e_t: np.ndarray
    teacher_out: np.ndarray
    acts: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class CalibrationSet:
    T: int
    num_steps: int
    num_per_step: int
    seed: int
    records: dict[int, StepRecord]

    @property
    def sampled_steps(self) -> list[int]:
        return sorted(self.records)

    def __getitem__(self, t: int) -> StepRecord:
        try:
            return self.records[t]
        except KeyError:
            raise KeyError(f"step {t} not in calibration set (sampled: {self.sampled_steps})") from None

    def layers(self) -> list[str]:
        return sorted({lid for rec in self.records.values() for lid in rec.acts})

    def equals(self, other: "CalibrationSet") -> bool:
        """Bit-exact comparison of metadata and every stored array."""
        if (self.T, self.num_steps, self.num_per_step, self.seed) != (other.T, other.num_steps, other.num_per_step, other.seed):
            return False
        if self.sampled_steps != other.sampled_steps:
            return False
        for t, a in self.records.items():
            b = other.records[t]
            pairs = [(a.x_t, b.x_t), (a.e_t, b.e_t), (a.teacher_out, b.teacher_out)]
            if set(a.acts) != set(b.acts):
                return False
            pairs += [(a.acts[k], b.acts[k]) for k in a.acts]
            if not all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in pairs):
                return False
        return True


def generate_calibration(teacher: ToyUNet, schedule: NoiseSchedule, num_per_step: int, sampled_steps,
                         seed: int, num_steps: int = 20, layers=None, batch: int = 64) -> CalibrationSet:
    """Run ``num_per_step`` teacher DDIM trajectories from seeded noise and keep,
    at every sampled step, the visited x_t, e(t), the teacher output and the
    hooked layer activations.

    The trajectories follow the ``num_steps`` sampling sub-schedule, so every
    sampled step must lie on it. Layers default to C_TE and C_A.
    """
    if num_per_step < 1:
        raise ContractError(f"num_per_step must be >= 1, got {num_per_step}")
    visited = timesteps(schedule.T, num_steps)
    wanted = sorted(set(int(t) for t in sampled_steps))
    if not wanted:
        raise ContractError("generate_calibration: no sampled steps")
    off = [t for t in wanted if t not in visited]
    if off:
        raise ContractError(f"sampled steps {off} are not on the {num_steps}-step sampling schedule")
    layers = set(layer_selection(teacher).all if layers is None else layers)
    missing = layers - set(teacher.layers)
    if missing:
        raise ContractError(f"unknown layers {sorted(missing)}")

    shape = (num_per_step, teacher.in_channels, teacher.resolution, teacher.resolution)
    noise = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    chunks: dict[int, list[tuple[np.ndarray, np.ndarray, dict]]] = {t: [] for t in wanted}
    for start in range(0, num_per_step, batch):
        x = noise[start:start + batch]
        for i, t in enumerate(visited):
            e_t = time_embedding(t, teacher.d_e, schedule.T)
            acts: dict[str, np.ndarray] = {}
            hook = (lambda lid, pre, post: acts.__setitem__(lid, post.data.copy()) if lid in layers else None)
            eps = teacher.forward(Tensor(x), e_t, hook=hook if t in chunks else None).data
            if t in chunks:
                chunks[t].append((x, eps, acts))
            t_prev = visited[i + 1] if i + 1 < len(visited) else 0
            x = ddim_step(x, eps, t, t_prev, schedule)
            if t == wanted[0]:
                break

    records = {}
    for t, parts in chunks.items():
        acts = {}
        for lid in parts[0][2]:
            per_batch = [p[2][lid] for p in parts]
            # time-embedding activations do not depend on x_t: one row per step
            acts[lid] = per_batch[0] if per_batch[0].shape[0] == 1 else np.concatenate(per_batch)
        records[t] = StepRecord(
            x_t=np.concatenate([p[0] for p in parts]),
            e_t=time_embedding(t, teacher.d_e, schedule.T).data.copy(),
            teacher_out=np.concatenate([p[1] for p in parts]),
            acts=acts,
        )
    return CalibrationSet(schedule.T, num_steps, num_per_step, seed, records)


def save_calibration(calib: CalibrationSet, path) -> None:
    header = {"T": calib.T, "num_steps": calib.num_steps, "num_per_step": calib.num_per_step,
              "seed": calib.seed, "steps": calib.sampled_steps}
    records = []
    for t in calib.sampled_steps:
        rec = calib.records[t]
        records += [(f"{t}/x_t", rec.x_t), (f"{t}/e_t", rec.e_t), (f"{t}/out", rec.teacher_out)]
        records += [(f"{t}/act/{lid}", arr) for lid, arr in sorted(rec.acts.items())]
    write_container(path, QCAL_MAGIC, QCAL_VERSION, header, records)


def load_calibration(path) -> CalibrationSet:
    header, arrays = read_container(path, QCAL_MAGIC, QCAL_VERSION)
    records = {t: StepRecord(np.empty(0), np.empty(0), np.empty(0)) for t in header["steps"]}
    for name, arr in arrays.items():
        step, _, key = name.partition("/")
        rec = records[int(step)]
        if key == "x_t":
            rec.x_t = arr
        elif key == "e_t":
            rec.e_t = arr
        elif key == "out":
            rec.teacher_out = arr
        else:
            rec.acts[key.removeprefix("act/")] = arr
    return CalibrationSet(header["T"], header["num_steps"], header["num_per_step"], header["seed"], records)
