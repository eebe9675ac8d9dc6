"""PTQ initialization and two-stage selective finetuning of a quantized ToyUNet.

Stage ``TE`` aligns the time-embedding layers on the fixed embedding e(t);
stage ``A`` aligns the attention-related layers on x_t. Both add the task
term 2 * MSE(teacher output, quantized output). Only the selected layers'
weights and the visited cluster's activation scales move.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .calibration import CalibrationSet
from .diffusion import (LayerSelection, NoiseSchedule, ToyUNet, layer_selection, sample, time_embedding,
                        trajectory_mse)
from .optim import Adam
from .quant import (PASSTHROUGH_BITS, FakeQuantizer, TimeAwareQuantizerSet, init_mse_search,
                    init_per_channel)
from .rng import substream

log = logging.getLogger(__name__)

STAGES = ("TE", "A")
IO_LAYERS = ("conv_in", "conv_out")
LOG_COLUMNS = ("stage", "step_t", "epoch", "loss_align", "loss_task")


@dataclass
class TrainConfig:
    epochs: int = 20
    lr_weights: float = 1e-5
    lr_scales: float = 1e-4
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    bits_w: int = 4
    bits_a: int = 4
    num_clusters: int = 20
    grid: int = 80
    io_bits: int | None = 8
    per_channel: bool = False
    use_task_loss: bool = True
    relative_scale_lr: bool = False
    init_max_eval: int = 16384
    seed: int = 0

    def __post_init__(self):
        if not (self.lr_weights > 0 and self.lr_scales > 0):
            raise ContractError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        for name in ("bits_w", "bits_a", "io_bits"):
            b = getattr(self, name)
            if b is None and name == "io_bits":
                continue
            if b != PASSTHROUGH_BITS and not 2 <= b <= 8:
                raise ContractError(f"{name} must be in [2, 8] or {PASSTHROUGH_BITS}, got {b}")
        self.betas = tuple(self.betas)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, stage: str, step: int, batch: int, layer: str | None):
        super().__init__(f"non-finite loss in stage {stage} at step t={step}, batch {batch}"
                         + (f", first non-finite activation in layer {layer!r}" if layer else ""))
        self.stage = stage
        self.step = step
        self.batch = batch
        self.layer = layer


@dataclass
class QuantizedModel:
    base: ToyUNet
    weight_quantizers: dict[str, FakeQuantizer]
    act_quantizers: TimeAwareQuantizerSet
    selection: LayerSelection
    history: list[str] = field(default_factory=list)
    curves: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def forward(self, x_t, t: int, hook=None, detach_scales=frozenset()) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        return self.base.forward(x_t, time_embedding(t, self.base.d_e, self.act_quantizers.T), self, t,
                                 hook, detach_scales)

    def clone(self) -> "QuantizedModel":
        return copy.deepcopy(self)

    def scale_tensors(self, cluster: int | None = None) -> dict[tuple[str, int], Tensor]:
        return {key: fq.scale for key, fq in self.act_quantizers.quantizers.items()
                if cluster is None or key[1] == cluster}

    def trainable_fraction(self) -> float:
        return self.base.num_parameters(self.selection.all) / self.base.num_parameters()


# -- initialization ---------------------------------------------------------------

def collect_activations(teacher: ToyUNet, calib: CalibrationSet, layers=None) -> dict[int, dict[str, np.ndarray]]:
    """Teacher outputs of every requested layer on each sampled step's stored inputs."""
    wanted = set(l.id for l in teacher.quantizable_layers()) if layers is None else set(layers)
    out: dict[int, dict[str, np.ndarray]] = {}
    for t in calib.sampled_steps:
        rec = calib[t]
        acts: dict[str, np.ndarray] = {}
        teacher.forward(Tensor(rec.x_t), Tensor(rec.e_t),
                        hook=lambda lid, pre, post: acts.__setitem__(lid, post.data) if lid in wanted else None)
        out[t] = acts
    return out


def attach_and_init(teacher: ToyUNet, calib: CalibrationSet, cfg: TrainConfig,
                    act_bits: dict[str, int] | None = None, activations=None) -> QuantizedModel:
    """Attach frozen weight quantizers and per-(layer, cluster) activation quantizers.

    Each cluster's activation quantizers are fitted on the calibration steps
    that fall inside that cluster. The first and last layers use
    ``cfg.io_bits`` for weights and activations when set; ``act_bits``
    overrides the activation bit-width per layer id.
    """
    base = teacher.clone()
    base.set_requires_grad(False)
    qset = TimeAwareQuantizerSet(calib.T, cfg.num_clusters)
    by_cluster: dict[int, list[int]] = {}
    for t in calib.sampled_steps:
        by_cluster.setdefault(qset.cluster_of(t), []).append(t)
    missing = [k for k in range(cfg.num_clusters) if k not in by_cluster]
    if missing:
        raise ContractError(f"calibration has no sampled step in clusters {missing} "
                            f"(sampled {calib.sampled_steps}, {cfg.num_clusters} clusters over T={calib.T})")
    acts = activations if activations is not None else collect_activations(teacher, calib)
    act_bits = act_bits or {}

    def io_or(lid, bits):
        return cfg.io_bits if cfg.io_bits is not None and lid in IO_LAYERS and bits != PASSTHROUGH_BITS else bits

    weight_q: dict[str, FakeQuantizer] = {}
    for layer in base.quantizable_layers():
        lid = layer.id
        bits_w = io_or(lid, cfg.bits_w)
        if bits_w == PASSTHROUGH_BITS:
            weight_q[lid] = FakeQuantizer.passthrough(name=f"{lid}.wq")
            continue
        w = layer.weight.data
        # per-channel along the output axis: conv weights are (out, in, 3, 3), linear ones (in, out)
        if cfg.per_channel:
            wt = w if layer.kind == "conv" else w.T
            s, z = init_per_channel(wt, bits_w, True, cfg.grid)
            if layer.kind == "linear":
                s, z = s.reshape(1, -1), z.reshape(1, -1)
            fq = FakeQuantizer(s, z, bits_w, True, scale_learnable=False, frozen=True, name=f"{lid}.wq")
        else:
            p = init_mse_search(w, bits_w, True, cfg.grid)
            fq = FakeQuantizer.from_params(p, scale_learnable=False, frozen=True, name=f"{lid}.wq")
        weight_q[lid] = fq

    for layer in base.quantizable_layers():
        lid = layer.id
        bits = act_bits.get(lid, io_or(lid, cfg.bits_a))
        for k in range(cfg.num_clusters):
            name = f"{lid}@{k}"
            if bits == PASSTHROUGH_BITS:
                qset.quantizers[(lid, k)] = FakeQuantizer.passthrough(name=name)
                continue
            samples = np.concatenate([acts[t][lid].reshape(-1) for t in by_cluster[k]])
            p = init_mse_search(samples, bits, False, cfg.grid, max_eval=cfg.init_max_eval)
            qset.quantizers[(lid, k)] = FakeQuantizer.from_params(p, name=name)
    qm = QuantizedModel(base, weight_q, qset, layer_selection(base))
    qm.history.append("ptq" if cfg.num_clusters == 1 else "taquant")
    return qm


# -- losses ------------------------------------------------------------------------

def _batch(calib: CalibrationSet, t: int, idx) -> tuple[np.ndarray, np.ndarray]:
    rec = calib[t]
    if idx is None:
        return rec.x_t, rec.teacher_out
    return rec.x_t[idx], rec.teacher_out[idx]


def _stored(calib: CalibrationSet, t: int, lid: str, idx) -> np.ndarray:
    acts = calib[t].acts
    if lid not in acts:
        raise ContractError(f"calibration step {t} has no stored activation for layer {lid!r}")
    arr = acts[lid]
    return arr if idx is None or arr.shape[0] == 1 else arr[idx]


def loss_te_terms(qm: QuantizedModel, calib: CalibrationSet, t: int) -> dict[str, Tensor]:
    rec = calib[t]
    got = qm.base.time_activations(Tensor(rec.e_t), qm, t)
    return {lid: ag.mse(got[lid], Tensor(_stored(calib, t, lid, None))) for lid in sorted(qm.selection.C_TE)}


def loss_te(qm: QuantizedModel, calib: CalibrationSet, t: int) -> Tensor:
    """Sum over time-embedding layers of the activation MSE on e(t)."""
    return _sum(loss_te_terms(qm, calib, t).values())


def _forward_a(qm: QuantizedModel, calib: CalibrationSet, t: int, idx) -> tuple[dict[str, Tensor], Tensor]:
    x, _ = _batch(calib, t, idx)
    got: dict[str, Tensor] = {}
    hook = lambda lid, pre, post: got.__setitem__(lid, post) if lid in qm.selection.C_A else None
    out = qm.forward(x, t, hook=hook, detach_scales=qm.selection.C_TE)
    terms = {lid: ag.mse(got[lid], Tensor(_stored(calib, t, lid, idx))) for lid in sorted(qm.selection.C_A)}
    return terms, out


def loss_a(qm: QuantizedModel, calib: CalibrationSet, t: int, idx=None) -> Tensor:
    """Sum over attention-related layers of the activation MSE on x_t, with the
    time-embedding scales held constant."""
    return _sum(_forward_a(qm, calib, t, idx)[0].values())


def task_loss(qm: QuantizedModel, calib: CalibrationSet, t: int, idx=None) -> Tensor:
    x, target = _batch(calib, t, idx)
    return ag.scale(ag.mse(qm.forward(x, t), Tensor(target)), 2.0)


def _sum(terms) -> Tensor:
    terms = list(terms)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


# -- stages --------------------------------------------------------------------------

@dataclass
class StepInfo:
    stage: str
    step_t: int
    epoch: int
    batch: int
    loss_align: float
    loss_task: float
    grads: dict[str, np.ndarray]


def _stage_tensors(qm: QuantizedModel, stage: str, cluster: int):
    """Weights and scales that may move in ``stage`` at ``cluster``."""
    ids = qm.selection.C_TE if stage == "TE" else qm.selection.C_A
    weights = [p for lid in sorted(ids) for p in qm.base.layers[lid].params.values()]
    scales = [fq.scale for (lid, k), fq in sorted(qm.act_quantizers.quantizers.items())
              if k == cluster and fq.trainable and _scale_in_stage(qm, lid, stage)]
    return weights, scales


def _scale_in_stage(qm: QuantizedModel, lid: str, stage: str) -> bool:
    # stage TE owns the time-embedding scales; stage A owns every other scale
    return (lid in qm.selection.C_TE) == (stage == "TE")


def stage_gradients(qm: QuantizedModel, calib: CalibrationSet, t: int, idx, stage: str,
                    use_task_loss: bool = True) -> tuple[float, float, dict[int, np.ndarray]]:
    """Objective values and gradients keyed by ``id(tensor)``.

    Stage A routes each alignment term's weight gradient only to the layer
    producing that activation; scales receive the gradient of the full sum.
    """
    cluster = qm.act_quantizers.cluster_of(t)
    weights, scales = _stage_tensors(qm, stage, cluster)
    grads: dict[int, np.ndarray] = {}

    def add(tensors, gs):
        for p, g in zip(tensors, gs):
            if g is not None:
                grads[id(p)] = grads[id(p)] + g if id(p) in grads else g

    if stage == "TE":
        align = loss_te(qm, calib, t)
        task = task_loss(qm, calib, t, idx) if use_task_loss else None
        total = align if task is None else align + task
        add(weights + scales, ag.grad(total, weights + scales))
    else:
        terms, out = _forward_a(qm, calib, t, idx)
        align = _sum(terms.values())
        task = None
        if use_task_loss:
            _, target = _batch(calib, t, idx)
            task = ag.scale(ag.mse(out, Tensor(target)), 2.0)
        total = align if task is None else align + task
        add(scales, ag.grad(total, scales))
        if task is not None:
            add(weights, ag.grad(task, weights))
        for lid, term in terms.items():
            own = list(qm.base.layers[lid].params.values())
            add(own, ag.grad(term, own))
    return align.item(), (task.item() if task is not None else 0.0), grads


def _first_nonfinite_layer(qm: QuantizedModel, calib: CalibrationSet, t: int, idx) -> str | None:
    bad: list[str] = []
    x, _ = _batch(calib, t, idx)
    qm.forward(x, t, hook=lambda lid, pre, post: bad.append(lid) if not np.all(np.isfinite(post.data)) else None)
    return bad[0] if bad else None


def run_stage(qm: QuantizedModel, calib: CalibrationSet, cfg: TrainConfig, stage: str,
              log_rows: list | None = None, callback: Callable[[StepInfo, QuantizedModel], None] | None = None
              ) -> QuantizedModel:
    """Finetune ``qm`` in place for one stage and return it."""
    if stage not in STAGES:
        raise ContractError(f"stage must be one of {STAGES}, got {stage!r}")
    if stage == "A" and "sla_te" not in qm.history:
        log.warning("stage A running before stage TE")
    if cfg.epochs == 0:
        return qm
    sel = qm.selection.C_TE if stage == "TE" else qm.selection.C_A
    qm.base.set_requires_grad(False)
    qm.base.set_requires_grad(True, sel)
    weights = [p for lid in sorted(sel) for p in qm.base.layers[lid].params.values()]
    scale_fqs = [fq for (lid, _), fq in sorted(qm.act_quantizers.quantizers.items())
                 if fq.trainable and _scale_in_stage(qm, lid, stage)]
    opt = Adam([{"params": weights, "lr": cfg.lr_weights},
                {"params": [fq.scale for fq in scale_fqs], "lr": cfg.lr_scales, "relative": cfg.relative_scale_lr}],
               betas=cfg.betas, eps=cfg.eps, clip_norm=cfg.clip_norm)
    names = {id(p): p.name for p in weights}
    names.update({id(fq.scale): fq.scale.name for fq in scale_fqs})
    rng = substream(cfg.seed, f"finetune/{stage}")
    steps = calib.sampled_steps
    try:
        for epoch in range(cfg.epochs):
            for t in rng.permutation(steps).tolist():
                n = calib.num_per_step
                perm = rng.permutation(n)
                sums = [0.0, 0.0]
                batches = [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
                for b, idx in enumerate(batches):
                    la, lt, grads = stage_gradients(qm, calib, t, idx, stage, cfg.use_task_loss)
                    if not (math.isfinite(la) and math.isfinite(lt)):
                        raise NonFiniteLossError(stage, t, b, _first_nonfinite_layer(qm, calib, t, idx))
                    opt.zero_grad()
                    for p in opt.params:
                        if id(p) in grads:
                            p.grad = grads[id(p)]
                    opt.step()
                    for fq in scale_fqs:
                        fq.clamp_scale()
                    sums[0] += la
                    sums[1] += lt
                    if callback is not None:
                        callback(StepInfo(stage, t, epoch, b, la, lt,
                                          {names[k]: g for k, g in grads.items()}), qm)
                mean_align, mean_task = sums[0] / len(batches), sums[1] / len(batches)
                qm.curves.setdefault((stage, t), []).append(mean_align + mean_task)
                if log_rows is not None:
                    log_rows.append({"stage": stage, "step_t": t, "epoch": epoch,
                                     "loss_align": mean_align, "loss_task": mean_task})
    finally:
        opt.zero_grad()
        qm.base.set_requires_grad(False)
    qm.history.append("sla_te" if stage == "TE" else "sla_a")
    return qm


# -- evaluation and the full pipeline -----------------------------------------------

@dataclass
class Evaluator:
    """Trajectory MSE-to-teacher from a fixed batch of starting noises."""

    teacher: ToyUNet
    schedule: NoiseSchedule
    num_steps: int = 20
    n: int = 64
    seed: int = 0
    _reference: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def noise(self) -> np.ndarray:
        shape = (self.n, self.teacher.in_channels, self.teacher.resolution, self.teacher.resolution)
        return substream(self.seed, "eval").standard_normal(shape).astype(np.float32)

    @property
    def reference(self) -> list[np.ndarray]:
        if self._reference is None:
            self._reference = sample(self.teacher, self.schedule, self.num_steps, x_T=self.noise)
        return self._reference

    def trajectory(self, qm: QuantizedModel) -> list[np.ndarray]:
        return sample(qm.base, self.schedule, self.num_steps, quantized=qm, x_T=self.noise)

    def __call__(self, qm: QuantizedModel) -> float:
        return trajectory_mse(self.reference, self.trajectory(qm))


@dataclass
class PipelineReport:
    mse: dict[str, float]
    trainable_fraction: float
    log_rows: list[dict]
    curves: dict[tuple[str, int], list[float]]

    def to_dict(self) -> dict:
        return {"trajectory_mse": self.mse, "trainable_fraction": self.trainable_fraction,
                "curves": {f"{s}@{t}": v for (s, t), v in sorted(self.curves.items())}}


def quest_pipeline(teacher: ToyUNet, calib: CalibrationSet, cfg: TrainConfig, evaluator: Evaluator | None = None,
                   with_ptq_baseline: bool = True, callback=None) -> tuple[QuantizedModel, PipelineReport]:
    """PTQ init, then stage TE, then stage A; the report carries the
    trajectory MSE after each stage when an evaluator is given."""
    acts = collect_activations(teacher, calib)
    mse: dict[str, float] = {}
    if evaluator is not None and with_ptq_baseline:
        single = TrainConfig(**{**cfg.__dict__, "num_clusters": 1})
        mse["ptq"] = evaluator(attach_and_init(teacher, calib, single, activations=acts))
    qm = attach_and_init(teacher, calib, cfg, activations=acts)
    if evaluator is not None:
        mse["taquant"] = evaluator(qm)
    rows: list[dict] = []
    for stage, key in (("TE", "sla_te"), ("A", "sla_a")):
        run_stage(qm, calib, cfg, stage, rows, callback)
        if evaluator is not None:
            mse[key] = evaluator(qm)
        log.info("stage %s done%s", stage, f", trajectory mse {mse[key]:.6f}" if key in mse else "")
    return qm, PipelineReport(mse, qm.trainable_fraction(), rows, dict(qm.curves))


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
