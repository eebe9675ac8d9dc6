"""Uniform affine quantization, fake-quant with surrogate gradients, and
time-aware activation quantizer sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor, _make, _unbroadcast

PASSTHROUGH_BITS = 32
SCALE_FLOOR = 1e-8


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    signed: bool

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ContractError(f"QuantParams: bits must be in [2, 8], got {self.bits}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ContractError(f"QuantParams: scale must be positive and finite, got {self.scale}")
        lo, hi = qrange(self.bits, self.signed)
        if not lo <= self.zero_point <= hi:
            raise ContractError(f"QuantParams: zero point {self.zero_point} outside [{lo}, {hi}]")

    @property
    def q_min(self) -> int:
        return qrange(self.bits, self.signed)[0]

    @property
    def q_max(self) -> int:
        return qrange(self.bits, self.signed)[1]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


def quantize(x, p: QuantParams) -> np.ndarray:
    """clamp(round(x / s) + Z, q_min, q_max) as int32."""
    if not p.scale > 0:
        raise ContractError(f"quantize: scale must be positive, got {p.scale}")
    v = _data(x) / np.float32(p.scale)
    return np.clip(round_half_away(v) + p.zero_point, p.q_min, p.q_max).astype(np.int32)


def dequantize(q, p: QuantParams) -> Tensor:
    q = np.asarray(q)
    if q.size and (q.min() < p.q_min or q.max() > p.q_max):
        raise ContractError(f"dequantize: values outside [{p.q_min}, {p.q_max}]")
    return Tensor((q.astype(np.float32) - np.float32(p.zero_point)) * np.float32(p.scale))


def fake_quant_op(x: Tensor, scale: Tensor, zero_point, q_min: int, q_max: int) -> Tensor:
    """Quantize-dequantize with straight-through input gradient and a
    learned-step-size gradient for ``scale``.

    ``scale`` and ``zero_point`` broadcast against ``x`` (per-tensor or
    per-channel).
    """
    s = scale.data.astype(x.dtype, copy=False)
    if np.any(s <= 0):
        raise ContractError("fake_quant: scale must be positive")
    z = np.asarray(zero_point, dtype=x.dtype)
    v = x.data / s
    r = round_half_away(v)
    q = np.clip(r + z, q_min, q_max)
    out = (q - z) * s
    shifted = v + z
    below = shifted < q_min
    above = shifted > q_max
    inside = ~(below | above)

    def bw(g):
        gx = g * inside if x.requires_grad else None
        gs = None
        if scale.requires_grad:
            local = np.where(inside, r - v, np.where(below, q_min - z, q_max - z))
            gs = _unbroadcast(g * local, scale.shape)
        return gx, gs

    return _make(out.astype(x.dtype, copy=False), (x, scale), bw, "fake_quant")


class FakeQuantizer:
    """A quantizer with a (possibly learnable) scale and a fixed zero point.

    ``bits == 32`` is the pass-through sentinel: the quantizer is the identity.
    """

    def __init__(self, scale=1.0, zero_point=0, bits: int = 8, signed: bool = False,
                 scale_learnable: bool = True, frozen: bool = False, name: str | None = None):
        if bits != PASSTHROUGH_BITS and not 2 <= bits <= 8:
            raise ContractError(f"FakeQuantizer: bits must be in [2, 8] or {PASSTHROUGH_BITS}, got {bits}")
        self.bits = bits
        self.signed = signed
        self.scale_learnable = scale_learnable
        self.frozen = frozen
        self.name = name
        self.scale = Tensor(np.asarray(scale, dtype=np.float32), name=name and f"{name}.scale")
        self.zero_point = np.asarray(zero_point, dtype=np.int64)
        self._sync_grad_flag()

    @classmethod
    def from_params(cls, p: QuantParams, **kw) -> "FakeQuantizer":
        return cls(p.scale, p.zero_point, p.bits, p.signed, **kw)

    @classmethod
    def passthrough(cls, name: str | None = None) -> "FakeQuantizer":
        return cls(1.0, 0, PASSTHROUGH_BITS, False, scale_learnable=False, frozen=True, name=name)

    @property
    def is_passthrough(self) -> bool:
        return self.bits == PASSTHROUGH_BITS

    @property
    def q_range(self) -> tuple[int, int]:
        return qrange(self.bits, self.signed)

    @property
    def params(self) -> QuantParams:
        if self.is_passthrough:
            raise ContractError("pass-through quantizer has no QuantParams")
        if self.scale.size != 1:
            raise ContractError("per-channel quantizer has no single QuantParams")
        return QuantParams(float(self.scale.data.reshape(-1)[0]), int(self.zero_point.reshape(-1)[0]),
                           self.bits, self.signed)

    @property
    def trainable(self) -> bool:
        return self.scale_learnable and not self.frozen and not self.is_passthrough

    def _sync_grad_flag(self) -> None:
        self.scale.requires_grad = self.trainable

    def freeze(self) -> None:
        self.frozen = True
        self._sync_grad_flag()

    def clamp_scale(self) -> None:
        np.maximum(self.scale.data, SCALE_FLOOR, out=self.scale.data)

    def __call__(self, x: Tensor, detach_scale: bool = False) -> Tensor:
        return fake_quant(x, self, detach_scale=detach_scale)

    def __repr__(self) -> str:
        if self.is_passthrough:
            return f"FakeQuantizer(passthrough, name={self.name!r})"
        return (f"FakeQuantizer(bits={self.bits}, signed={self.signed}, scale={self.scale.data.ravel()[:4]}, "
                f"zp={self.zero_point.ravel()[:4]}, frozen={self.frozen})")


def fake_quant(x: Tensor, fq: FakeQuantizer, detach_scale: bool = False) -> Tensor:
    if fq.is_passthrough:
        return x
    lo, hi = fq.q_range
    scale = fq.scale.detach() if detach_scale else fq.scale
    zp = fq.zero_point.reshape(fq.scale.shape) if fq.zero_point.size > 1 else fq.zero_point
    return fake_quant_op(x, scale, zp, lo, hi)


# -- initialization -------------------------------------------------------------

def _check_samples(samples) -> np.ndarray:
    arr = np.asarray(_data(samples), dtype=np.float32).reshape(-1)
    if arr.size == 0:
        raise ContractError("quantizer init: empty samples")
    if not np.all(np.isfinite(arr)):
        raise ContractError("quantizer init: non-finite samples")
    return arr


def _params_for_range(lo: float, hi: float, bits: int, signed: bool) -> tuple[float, int]:
    q_min, q_max = qrange(bits, signed)
    s = float(np.float32((hi - lo) / (q_max - q_min)))
    if not s > SCALE_FLOOR:
        s = SCALE_FLOOR
    z = int(np.clip(round_half_away(np.float64(q_min - lo / s)), q_min, q_max))
    return s, z


def init_minmax(samples, bits: int, signed: bool) -> QuantParams:
    arr = _check_samples(samples)
    s, z = _params_for_range(float(arr.min()), float(arr.max()), bits, signed)
    return QuantParams(s, z, bits, signed)


def _roundtrip_mse(arr: np.ndarray, scales: np.ndarray, zps: np.ndarray, q_min: int, q_max: int) -> np.ndarray:
    s = scales[:, None].astype(np.float32)
    z = zps[:, None].astype(np.float32)
    q = np.clip(round_half_away(arr[None, :] / s) + z, q_min, q_max)
    err = (q - z) * s - arr[None, :]
    return np.mean(err.astype(np.float64) ** 2, axis=1)


def init_mse_search(samples, bits: int, signed: bool, grid: int = 80, max_eval: int | None = None) -> QuantParams:
    """Clip-ratio search over r = 1, 1 - 1/grid, ..., 1/grid of the min-max range.

    The range endpoints always come from all samples; ``max_eval`` caps how
    many (evenly strided) samples score each candidate.
    """
    if grid < 2:
        raise ContractError(f"init_mse_search: grid must be >= 2, got {grid}")
    arr = _check_samples(samples)
    lo, hi = float(arr.min()), float(arr.max())
    if max_eval is not None and arr.size > max_eval:
        arr = arr[:: int(np.ceil(arr.size / max_eval))]
    ratios = [1.0 - k / grid for k in range(grid)]
    cands = [_params_for_range(r * lo, r * hi, bits, signed) for r in ratios]
    q_min, q_max = qrange(bits, signed)
    errs = _roundtrip_mse(arr, np.array([c[0] for c in cands]), np.array([c[1] for c in cands]), q_min, q_max)
    best = int(np.argmin(errs))  # first minimum == largest ratio on ties
    return QuantParams(cands[best][0], cands[best][1], bits, signed)


def init_per_channel(weight: np.ndarray, bits: int, signed: bool, grid: int = 80) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-channel MSE search; returns broadcastable (scale, zero_point)."""
    shape = (weight.shape[0],) + (1,) * (weight.ndim - 1)
    ps = [init_mse_search(weight[c], bits, signed, grid) for c in range(weight.shape[0])]
    return (np.array([p.scale for p in ps], dtype=np.float32).reshape(shape),
            np.array([p.zero_point for p in ps], dtype=np.int64).reshape(shape))


# -- time-aware activation quantizers ---------------------------------------------

@dataclass
class TimeAwareQuantizerSet:
    """Activation quantizers indexed by (layer id, cluster of adjacent steps).

    Steps are 1-based; clusters are 0-based contiguous runs of ``T // num_clusters``
    steps, the last run absorbing the remainder.
    """

    T: int
    num_clusters: int
    quantizers: dict[tuple[str, int], FakeQuantizer] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.num_clusters <= self.T:
            raise ContractError(f"need 1 <= num_clusters <= T, got num_clusters={self.num_clusters}, T={self.T}")
        self.run = self.T // self.num_clusters

    def cluster_of(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ContractError(f"step {t} outside [1, {self.T}]")
        return min((t - 1) // self.run, self.num_clusters - 1)

    def cluster_steps(self, k: int) -> range:
        start = k * self.run + 1
        stop = self.T + 1 if k == self.num_clusters - 1 else start + self.run
        return range(start, stop)

    @property
    def representative_steps(self) -> list[int]:
        return [k * self.run + 1 for k in range(self.num_clusters)]

    def layers(self) -> list[str]:
        return sorted({layer for layer, _ in self.quantizers})

    def select(self, layer: str, t: int) -> FakeQuantizer:
        k = self.cluster_of(t)
        try:
            return self.quantizers[(layer, k)]
        except KeyError:
            raise KeyError(f"no activation quantizer for layer {layer!r}, cluster {k}") from None

    def select_params(self, layer: str, t: int) -> QuantParams:
        return self.select(layer, t).params

    def scales_for_cluster(self, k: int) -> dict[str, Tensor]:
        return {layer: fq.scale for (layer, kk), fq in self.quantizers.items() if kk == k}


def build_cluster_map(T: int, num_clusters: int) -> TimeAwareQuantizerSet:
    return TimeAwareQuantizerSet(T, num_clusters)


def select_params(qset: TimeAwareQuantizerSet, layer: str, t: int) -> QuantParams:
    return qset.select_params(layer, t)
