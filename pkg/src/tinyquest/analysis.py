"""Second-order error probes on tiny smooth networks and activation diagnostics
on the toy diffusion model."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ContractError, NonFiniteError, Tensor
from .calibration import CalibrationSet
from .diffusion import ToyUNet
from .finetune import (Evaluator, QuantizedModel, TrainConfig, attach_and_init, collect_activations,
                       run_stage)
from .quant import PASSTHROUGH_BITS, FakeQuantizer, init_mse_search

F64 = np.float64


# -- probe network -----------------------------------------------------------------

class ProbeNet:
    """Small dense network with SiLU activations, evaluated in float64."""

    def __init__(self, dims=(6, 8, 8, 4), seed: int = 0, gain: float = 1.5):
        if len(dims) < 3:
            raise ContractError("ProbeNet needs at least two dense layers")
        rng = np.random.default_rng(seed)
        self.weights = [Tensor(rng.standard_normal((a, b)) * gain / math.sqrt(a), dtype=F64)
                        for a, b in zip(dims[:-1], dims[1:])]
        self.biases = [Tensor(rng.standard_normal(b) * 0.1, dtype=F64) for b in dims[1:]]
        self.dims = tuple(dims)

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def hidden(self, z: Tensor) -> Tensor:
        """Activation feeding the last dense layer."""
        h = z
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ag.silu(ag.add(ag.matmul(h, w), b))
        return h

    def __call__(self, z: Tensor) -> Tensor:
        return ag.add(ag.matmul(self.hidden(z), self.weights[-1]), self.biases[-1])


def make_probe(seed: int = 0, dims=(6, 8, 8, 4), batch: int = 2, gain: float = 1.5):
    """Probe net, activation point z (batch x dims[0]) and a regression target."""
    rng = np.random.default_rng([seed, 1])
    net = ProbeNet(dims, seed, gain)
    z = rng.standard_normal((batch, dims[0]))
    target = rng.standard_normal((batch, dims[-1]))
    return net, z, target


def mse_to(target: np.ndarray) -> Callable[[Tensor], Tensor]:
    t = Tensor(np.asarray(target, dtype=F64), dtype=F64)
    return lambda out: ag.mse(out, t)


def fp_loss(net, z) -> Callable[[Tensor], Tensor]:
    """Squared distance to the full-precision output net(z)."""
    return mse_to(net(Tensor(np.asarray(z, dtype=F64), dtype=F64)).data)


def random_direction(shape, norm: float, seed: int) -> np.ndarray:
    d = np.random.default_rng([seed, 2]).standard_normal(shape)
    return d * (norm / np.linalg.norm(d))


# -- derivatives -------------------------------------------------------------------

def _objective(net, loss) -> Callable[[np.ndarray], float]:
    return lambda z: loss(net(Tensor(z, dtype=F64))).item()


def _gradient(net, loss, z: np.ndarray) -> np.ndarray:
    zt = Tensor(np.array(z, dtype=F64), requires_grad=True, dtype=F64)
    (g,) = ag.grad(loss(net(zt)), [zt])
    return np.zeros_like(zt.data) if g is None else g


def hessian_fd(net, loss, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Hessian of loss(net(z)) in z by central differences of the analytic gradient."""
    z = np.asarray(z, dtype=F64)
    n = z.size
    H = np.empty((n, n), dtype=F64)
    flat = z.reshape(-1).copy()
    for i in range(n):
        orig = flat[i]
        flat[i] = orig + h
        gp = _gradient(net, loss, flat.reshape(z.shape)).reshape(-1)
        flat[i] = orig - h
        gm = _gradient(net, loss, flat.reshape(z.shape)).reshape(-1)
        flat[i] = orig
        H[:, i] = (gp - gm) / (2 * h)
    bad = np.flatnonzero(~np.isfinite(H))
    if bad.size:
        raise NonFiniteError("non-finite Hessian entry", coordinate=int(bad[0]))
    return H


@dataclass
class TaylorReport:
    delta_norm: float
    exact_diff: float
    first_order: float
    second_order: float
    residual: float

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / abs(self.exact_diff) if self.exact_diff else math.inf


def _expansion(net, loss, z: np.ndarray, step: np.ndarray) -> tuple[float, float]:
    g = _gradient(net, loss, z).reshape(-1)
    H = hessian_fd(net, loss, z)
    e = step.reshape(-1)
    return float(e @ g), float(0.5 * e @ H @ e)


def taylor_check(net, loss, z, delta) -> TaylorReport:
    """Compare L(z + delta) - L(z) with its first- and second-order expansion at z."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=F64)
    delta = np.asarray(delta.data if isinstance(delta, Tensor) else delta, dtype=F64)
    if delta.shape != z.shape:
        raise ContractError(f"taylor_check: delta {delta.shape} does not match z {z.shape}")
    f = _objective(net, loss)
    exact = f(z + delta) - f(z)
    first, second = _expansion(net, loss, z, delta)
    return TaylorReport(float(np.linalg.norm(delta)), exact, first, second, exact - first - second)


def fit_residual_exponent(net, loss, z, direction: np.ndarray, norms=(1e-3, 3e-3, 1e-2, 3e-2, 1e-1)) -> tuple[float, list[TaylorReport]]:
    """Least-squares slope of log|residual| against log||delta|| along one direction."""
    unit = np.asarray(direction, dtype=F64) / np.linalg.norm(direction)
    reports = [taylor_check(net, loss, z, unit * r) for r in norms]
    slope = np.polyfit(np.log(norms), np.log([abs(r.residual) for r in reports]), 1)[0]
    return float(slope), reports


@dataclass
class DecompositionStep:
    i: int
    first_order: float
    second_order: float
    output_residual_norm: float


@dataclass
class DecompositionReport:
    K: int
    delta_norm: float
    epsilon_norm: float
    steps: list[DecompositionStep]
    lhs: float
    rhs: float
    gap: float
    z_fp: list
    metadata: dict = field(default_factory=dict)


def decomposition_check(net: ProbeNet, z, delta, K: int, loss=None) -> DecompositionReport:
    """Split ``delta`` into K equal steps and sum the local second-order
    expansions taken at z + (i - 1) * eps.

    The default loss is the batch-mean squared distance of the output to
    z_FP, the unperturbed full-precision output net(z).
    """
    if K < 1:
        raise ContractError(f"decomposition_check: K must be >= 1, got {K}")
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=F64)
    delta = np.asarray(delta.data if isinstance(delta, Tensor) else delta, dtype=F64)
    z_fp = net(Tensor(z, dtype=F64)).data
    loss = fp_loss(net, z) if loss is None else loss
    f = _objective(net, loss)
    eps = delta / K
    steps = []
    for i in range(1, K + 1):
        point = z + (i - 1) * eps
        first, second = _expansion(net, loss, point, eps)
        # the first-order term is driven by hidden(z_i) @ w_n + b_n - z_FP
        out = ag.add(ag.matmul(net.hidden(Tensor(point, dtype=F64)), net.weights[-1]), net.biases[-1]).data
        steps.append(DecompositionStep(i, first, second, float(np.linalg.norm(out - z_fp))))
    lhs = f(z + delta) - f(z)
    rhs = float(sum(s.first_order + s.second_order for s in steps))
    return DecompositionReport(K, float(np.linalg.norm(delta)), float(np.linalg.norm(eps)), steps, lhs, rhs, lhs - rhs,
                               z_fp.tolist(), {"z_fp": "full-precision output on the unperturbed input",
                                               "expectation": "mean over batch and output coordinates"})


# -- sensitivity and ablations on the toy model ----------------------------------------

def default_groups(model: ToyUNet) -> dict[str, list[str]]:
    """Partition of the quantizable layers into feed-forward, other linear, and conv."""
    groups: dict[str, list[str]] = {"feed_forward": [], "other_linear": [], "conv": []}
    for layer in model.quantizable_layers():
        if layer.role == "feed_forward":
            groups["feed_forward"].append(layer.id)
        elif layer.kind == "linear":
            groups["other_linear"].append(layer.id)
        else:
            groups["conv"].append(layer.id)
    return groups


@dataclass
class SensitivityReport:
    groups: dict[str, list[str]]
    baseline: float
    degradation: dict[str, dict[int, float]]

    def ranking(self, bits: int) -> list[str]:
        """Groups ordered from most to least degraded at ``bits``."""
        return sorted(self.degradation, key=lambda g: -self.degradation[g][bits])

    def rows(self) -> list[dict]:
        return [{"group": g, "bits": b, "trajectory_mse": v}
                for g, per in self.degradation.items() for b, v in sorted(per.items(), reverse=True)]


def sensitivity_sweep(teacher: ToyUNet, calib: CalibrationSet, evaluator: Evaluator, groups=None,
                      bits_list=(8, 6, 4), cfg: TrainConfig | None = None, base_bits: int = 8) -> SensitivityReport:
    """Quantize one group's activations at each bit-width with every other
    activation held at ``base_bits`` and weights left in full precision."""
    groups = default_groups(teacher) if groups is None else {k: list(v) for k, v in groups.items()}
    ids = [l.id for l in teacher.quantizable_layers()]
    flat = [lid for g in groups.values() for lid in g]
    if sorted(flat) != sorted(ids):
        raise ContractError("sensitivity_sweep: groups must partition the quantizable layers")
    cfg = cfg or TrainConfig()
    cfg = TrainConfig(**{**cfg.__dict__, "bits_w": PASSTHROUGH_BITS, "bits_a": base_bits, "io_bits": None})
    acts = collect_activations(teacher, calib)
    baseline = evaluator(attach_and_init(teacher, calib, cfg, activations=acts))
    degradation: dict[str, dict[int, float]] = {}
    for name, members in groups.items():
        degradation[name] = {}
        for bits in bits_list:
            qm = attach_and_init(teacher, calib, cfg, act_bits={lid: bits for lid in members}, activations=acts)
            degradation[name][bits] = evaluator(qm)
    return SensitivityReport(groups, baseline, degradation)


def naive_te_quantizers(qm: QuantizedModel, teacher: ToyUNet, calib: CalibrationSet, bits: int, grid: int = 80,
                        activations=None) -> None:
    """Replace every time-embedding activation quantizer with one shared,
    time-agnostic quantizer fitted on all sampled steps."""
    acts = activations if activations is not None else collect_activations(teacher, calib, qm.selection.C_TE)
    for lid in sorted(qm.selection.C_TE):
        pooled = np.concatenate([acts[t][lid].reshape(-1) for t in calib.sampled_steps])
        fq = FakeQuantizer.from_params(init_mse_search(pooled, bits, False, grid), name=f"{lid}@all")
        for k in range(qm.act_quantizers.num_clusters):
            qm.act_quantizers.quantizers[(lid, k)] = fq


def te_ablation(teacher: ToyUNet, calib: CalibrationSet, cfg: TrainConfig, evaluator: Evaluator) -> dict[str, float]:
    """Trajectory MSE with (a) naively quantized time-embedding activations,
    (b) full-precision time-embedding layers, (c) time-aware quantizers plus
    the time-embedding finetuning stage."""
    acts = collect_activations(teacher, calib)
    te = sorted(teacher.layer_ids("time_embed"))

    naive = attach_and_init(teacher, calib, cfg, activations=acts)
    if cfg.bits_a != PASSTHROUGH_BITS:
        naive_te_quantizers(naive, teacher, calib, cfg.bits_a, cfg.grid, acts)

    fp = attach_and_init(teacher, calib, cfg, act_bits={lid: PASSTHROUGH_BITS for lid in te}, activations=acts)
    for lid in te:
        fp.weight_quantizers[lid] = FakeQuantizer.passthrough(name=f"{lid}.wq")

    tuned = attach_and_init(teacher, calib, cfg, activations=acts)
    run_stage(tuned, calib, cfg, "TE")
    return {"quantized_te": evaluator(naive), "fp_te": evaluator(fp), "taquant_sla_te": evaluator(tuned)}


# -- activation distributions ------------------------------------------------------------

@dataclass
class LayerStats:
    min: float
    max: float
    std: float
    mean: float
    central_mass: float
    bin_edges: list[float]
    counts: list[int]

    @property
    def range_width(self) -> float:
        return self.max - self.min

    def histogram(self) -> list[tuple[float, float, int]]:
        return [(self.bin_edges[i], self.bin_edges[i + 1], self.counts[i]) for i in range(len(self.counts))]


def activation_stats(values, bins: int = 50, window: float = 2.0) -> LayerStats:
    """Range, spread, histogram and the mass within ``window`` standard
    deviations of the mean."""
    v = np.asarray(values, dtype=F64).reshape(-1)
    if v.size == 0:
        raise ContractError("activation_stats: empty activation record")
    lo, hi = float(v.min()), float(v.max())
    mu, sd = float(v.mean()), float(v.std())
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi) if hi > lo else (lo - 0.5, hi + 0.5))
    central = float(np.mean(np.abs(v - mu) <= window * sd)) if sd > 0 else 1.0
    return LayerStats(lo, hi, sd, mu, central, edges.tolist(), counts.tolist())


def distribution_stats(model, calib: CalibrationSet, layers, bins: int = 50, window: float = 2.0) -> dict[str, LayerStats]:
    """Statistics of each layer's real-valued output (before its activation
    quantizer) over every sampled step of the calibration set."""
    layers = list(layers)
    if not layers:
        raise ContractError("distribution_stats: no layers requested")
    collected: dict[str, list[np.ndarray]] = {lid: [] for lid in layers}

    def hook(lid, pre, post):
        if lid in collected:
            collected[lid].append(pre.data.reshape(-1))

    for t in calib.sampled_steps:
        rec = calib[t]
        if isinstance(model, QuantizedModel):
            model.forward(rec.x_t, t, hook=hook)
        else:
            model.forward(Tensor(rec.x_t), Tensor(rec.e_t), hook=hook)
    missing = [lid for lid, v in collected.items() if not v]
    if missing:
        raise ContractError(f"distribution_stats: no activations recorded for {missing}")
    return {lid: activation_stats(np.concatenate(v), bins, window) for lid, v in collected.items()}


def compare_distributions(before: dict[str, LayerStats], after: dict[str, LayerStats]) -> list[dict]:
    rows = []
    for lid in before:
        b, a = before[lid], after[lid]
        rows.append({"layer": lid, "min_before": b.min, "max_before": b.max, "std_before": b.std,
                     "min_after": a.min, "max_after": a.max, "std_after": a.std,
                     "range_ratio": a.range_width / b.range_width if b.range_width else math.inf})
    return rows


# -- report writers ------------------------------------------------------------------------

def write_csv(rows: list[dict], path, columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in columns})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
