"""Toy denoising diffusion model: noise schedule, sinusoidal time embedding,
a small UNet with one attention block, DDIM (eta = 0) sampling, and teacher
training on synthetic images."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .optim import Adam, set_lr
from .quant import fake_quant

log = logging.getLogger(__name__)

ROLES = ("time_embed", "attention_qkv", "attention_proj", "feed_forward", "conv", "other")
ATTENTION_ROLES = ("attention_qkv", "attention_proj", "feed_forward")


# -- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step ``t`` (1-based); step 0 is the clean signal."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ContractError(f"step {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ContractError(f"make_schedule: T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ContractError(f"make_schedule: need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def timesteps(T: int, num_steps: int) -> list[int]:
    """Uniform DDIM sub-schedule, descending: 1 + k * (T // num_steps)."""
    if not 1 <= num_steps <= T:
        raise ContractError(f"num_steps must be in [1, {T}], got {num_steps}")
    stride = T // num_steps
    return [1 + k * stride for k in range(num_steps)][::-1]


# -- time embedding -------------------------------------------------------------

def time_embedding(t, d_e: int, T: int | None = None) -> Tensor:
    """Sinusoidal embedding, shape (1, d_e) for a scalar step or (B, d_e) for a batch."""
    if d_e % 2:
        raise ContractError(f"time_embedding: dimension must be even, got {d_e}")
    ts = np.atleast_1d(np.asarray(t))
    if np.any(ts < 1) or (T is not None and np.any(ts > T)):
        raise ContractError(f"time_embedding: steps must lie in [1, {T or 'T'}], got {ts.min()}..{ts.max()}")
    half = d_e // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = ts.astype(np.float64)[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.sin(args), np.cos(args)], axis=1))


# -- layers -----------------------------------------------------------------------

def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float32), name=name)


@dataclass
class Layer:
    id: str
    role: str
    kind: str  # "linear" | "conv" | "norm"
    params: dict[str, Tensor]
    groups: int = 1

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    @property
    def quantizable(self) -> bool:
        return self.kind in ("linear", "conv")


class _Ctx:
    __slots__ = ("quant", "t", "hook", "detach_scales")

    def __init__(self, quant, t, hook, detach_scales):
        self.quant = quant
        self.t = t
        self.hook = hook
        self.detach_scales = detach_scales


class ToyUNet:
    """Two down/up stages, one attention + feed-forward block at the bottleneck,
    and a 2-layer time-embedding MLP injected additively into every residual block.

    Parameterized layers carry a stable id and a role tag; linear and conv
    layers are the quantizable ones, norm layers keep role ``other``.
    """

    def __init__(self, resolution: int = 16, in_channels: int = 1, channels: tuple[int, int] = (8, 16),
                 d_e: int = 32, d_temb: int = 64, seed: int = 0, init: str = "random"):
        if resolution % 4:
            raise ContractError(f"resolution must be divisible by 4, got {resolution}")
        self.config = dict(resolution=resolution, in_channels=in_channels, channels=list(channels),
                           d_e=d_e, d_temb=d_temb)
        self.resolution = resolution
        self.in_channels = in_channels
        self.d_e = d_e
        self.d_temb = d_temb
        self.layers: dict[str, Layer] = {}
        rng = np.random.default_rng(seed)
        zero = init == "zeros"
        c1, c2 = channels

        def lin(lid, role, n_in, n_out, gain=1.0):
            w = np.zeros((n_in, n_out)) if zero else rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in)
            self.layers[lid] = Layer(lid, role, "linear", {"weight": _param(w, f"{lid}.weight"),
                                                           "bias": _param(np.zeros(n_out), f"{lid}.bias")})

        def conv(lid, n_in, n_out, gain=1.0):
            w = np.zeros((n_out, n_in, 3, 3)) if zero else rng.standard_normal((n_out, n_in, 3, 3)) * gain / math.sqrt(9 * n_in)
            self.layers[lid] = Layer(lid, "conv", "conv", {"weight": _param(w, f"{lid}.weight"),
                                                           "bias": _param(np.zeros(n_out), f"{lid}.bias")})

        def norm(lid, c):
            g = np.zeros(c) if zero else np.ones(c)
            self.layers[lid] = Layer(lid, "other", "norm", {"gamma": _param(g, f"{lid}.gamma"),
                                                             "beta": _param(np.zeros(c), f"{lid}.beta")},
                                     groups=min(4, c))

        def res(prefix, c):
            norm(f"{prefix}.norm1", c)
            conv(f"{prefix}.conv1", c, c)
            lin(f"{prefix}.temb_proj", "time_embed", d_temb, c)
            norm(f"{prefix}.norm2", c)
            conv(f"{prefix}.conv2", c, c, gain=0.5)

        lin("temb.fc1", "time_embed", d_e, d_temb)
        lin("temb.fc2", "time_embed", d_temb, d_temb)
        conv("conv_in", in_channels, c1)
        res("down1", c1)
        conv("down1.down", c1, c2)
        res("down2", c2)
        res("mid", c2)
        norm("mid.attn.norm", c2)
        lin("mid.attn.qkv", "attention_qkv", c2, 3 * c2)
        lin("mid.attn.proj", "attention_proj", c2, c2, gain=0.5)
        norm("mid.ff.norm", c2)
        lin("mid.ff.fc1", "feed_forward", c2, 2 * c2)
        lin("mid.ff.fc2", "feed_forward", 2 * c2, c2, gain=0.5)
        res("up2", c2)
        conv("up2.up", c2, c1)
        res("up1", c1)
        norm("out.norm", c1)
        conv("conv_out", c1, in_channels, gain=0.5)

        self._pool = {}
        self._unpool = {}
        for r in (resolution, resolution // 2):
            self._pool[r], self._unpool[r] = _pool_mats(r)

    # -- registry helpers ------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers.values() for p in layer.params.values()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def quantizable_layers(self) -> list[Layer]:
        return [l for l in self.layers.values() if l.quantizable]

    def layer_ids(self, roles) -> list[str]:
        roles = (roles,) if isinstance(roles, str) else tuple(roles)
        return [l.id for l in self.layers.values() if l.role in roles]

    def num_parameters(self, ids=None) -> int:
        layers = self.layers.values() if ids is None else (self.layers[i] for i in ids)
        return sum(p.size for l in layers for p in l.params.values())

    def clone(self) -> "ToyUNet":
        return copy.deepcopy(self)

    def set_requires_grad(self, flag: bool, ids=None) -> None:
        for lid, layer in self.layers.items():
            if ids is None or lid in ids:
                for p in layer.params.values():
                    p.requires_grad = flag

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ContractError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float32)

    # -- forward ---------------------------------------------------------------
    def _apply(self, lid: str, x: Tensor, ctx: _Ctx) -> Tensor:
        layer = self.layers[lid]
        w, b = layer.params["weight"], layer.params["bias"]
        q = ctx.quant
        if q is not None:
            w = fake_quant(w, q.weight_quantizers[lid])
        y = ag.add(ag.matmul(x, w), b) if layer.kind == "linear" else ag.conv2d_3x3(x, w, b)
        pre = y
        if q is not None:
            fq = q.act_quantizers.select(lid, ctx.t)
            y = fake_quant(y, fq, detach_scale=lid in ctx.detach_scales)
        if ctx.hook is not None:
            ctx.hook(lid, pre, y)
        return y

    def _norm(self, lid: str, x: Tensor) -> Tensor:
        layer = self.layers[lid]
        return ag.group_norm(x, layer.groups, layer.params["gamma"], layer.params["beta"])

    def _res(self, prefix: str, x: Tensor, temb_act: Tensor, ctx: _Ctx) -> Tensor:
        h = self._apply(f"{prefix}.conv1", ag.silu(self._norm(f"{prefix}.norm1", x)), ctx)
        e = self._apply(f"{prefix}.temb_proj", temb_act, ctx)
        h = h + e.reshape(e.shape[0], e.shape[1], 1, 1)
        h = self._apply(f"{prefix}.conv2", ag.silu(self._norm(f"{prefix}.norm2", h)), ctx)
        return x + h

    def _resample(self, x: Tensor, mats: dict, r: int) -> Tensor:
        B, C = x.shape[:2]
        m = mats[r]
        flat = ag.matmul(x.reshape(B * C, -1), m)
        side = int(round(math.sqrt(m.shape[1])))
        return flat.reshape(B, C, side, side)

    def _tokens_in(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        return x.reshape(B, C, H * W).transpose(0, 2, 1)

    def _tokens_out(self, x: Tensor, like: tuple[int, ...]) -> Tensor:
        B, C, H, W = like
        return x.transpose(0, 2, 1).reshape(B, C, H, W)

    def time_features(self, e_t: Tensor, ctx: _Ctx) -> Tensor:
        h = ag.silu(self._apply("temb.fc1", e_t, ctx))
        return self._apply("temb.fc2", h, ctx)

    def time_activations(self, e_t: Tensor, quantized=None, t: int | None = None,
                         detach_scales=frozenset()) -> dict[str, Tensor]:
        """Outputs of every time-embedding layer for embedding ``e_t`` alone."""
        acts: dict[str, Tensor] = {}
        ctx = _Ctx(quantized, t, lambda lid, pre, post: acts.__setitem__(lid, post), detach_scales)
        temb = ag.silu(self.time_features(e_t, ctx))
        for lid in self.layer_ids("time_embed"):
            if lid.endswith(".temb_proj"):
                self._apply(lid, temb, ctx)
        return acts

    def forward(self, x_t: Tensor, e_t: Tensor, quantized=None, t: int | None = None,
                hook: Callable | None = None, detach_scales=frozenset()) -> Tensor:
        if x_t.ndim != 4 or x_t.shape[1:] != (self.in_channels, self.resolution, self.resolution):
            raise ContractError(f"unet_forward: input shape {x_t.shape} does not match model "
                                f"({self.in_channels}, {self.resolution}, {self.resolution})")
        if e_t.ndim == 1:
            e_t = e_t.reshape(1, -1)
        if e_t.shape[1] != self.d_e or e_t.shape[0] not in (1, x_t.shape[0]):
            raise ContractError(f"unet_forward: embedding shape {e_t.shape} incompatible with batch {x_t.shape[0]}")
        if quantized is not None and t is None:
            raise ContractError("unet_forward: quantized forward needs the step t")
        ctx = _Ctx(quantized, t, hook, detach_scales)
        r = self.resolution
        temb = ag.silu(self.time_features(e_t, ctx))

        h = self._apply("conv_in", x_t, ctx)
        h = self._res("down1", h, temb, ctx)
        skip1 = h
        h = self._apply("down1.down", self._resample(h, self._pool, r), ctx)
        h = self._res("down2", h, temb, ctx)
        skip2 = h
        h = self._resample(h, self._pool, r // 2)
        h = self._res("mid", h, temb, ctx)

        shape = h.shape
        tok = self._tokens_in(self._norm("mid.attn.norm", h))
        qkv = self._apply("mid.attn.qkv", tok, ctx)
        c = shape[1]
        q, k, v = qkv[:, :, :c], qkv[:, :, c:2 * c], qkv[:, :, 2 * c:]
        att = ag.softmax(ag.scale(ag.matmul(q, k.transpose(0, 2, 1)), 1.0 / math.sqrt(c)))
        a = self._apply("mid.attn.proj", ag.matmul(att, v), ctx)
        h = h + self._tokens_out(a, shape)

        tok = self._tokens_in(self._norm("mid.ff.norm", h))
        f = self._apply("mid.ff.fc2", ag.silu(self._apply("mid.ff.fc1", tok, ctx)), ctx)
        h = h + self._tokens_out(f, shape)

        h = self._resample(h, self._unpool, r // 2) + skip2
        h = self._res("up2", h, temb, ctx)
        h = self._resample(self._apply("up2.up", h, ctx), self._unpool, r) + skip1
        h = self._res("up1", h, temb, ctx)
        return self._apply("conv_out", ag.silu(self._norm("out.norm", h)), ctx)

    __call__ = forward


def _pool_mats(r: int) -> tuple[Tensor, Tensor]:
    """Fixed 2x2 average-pool (r*r -> r*r/4) and nearest-upsample (reverse) matrices."""
    h = r // 2
    pool = np.zeros((r * r, h * h), dtype=np.float32)
    for i in range(r):
        for j in range(r):
            pool[i * r + j, (i // 2) * h + j // 2] = 0.25
    return Tensor(pool), Tensor((pool.T * 4.0).copy())


@dataclass
class LayerSelection:
    C_TE: frozenset[str]
    C_A: frozenset[str]

    def __post_init__(self):
        if self.C_TE & self.C_A:
            raise ContractError(f"layer selection overlaps: {sorted(self.C_TE & self.C_A)}")

    @property
    def all(self) -> frozenset[str]:
        return self.C_TE | self.C_A


def layer_selection(model: ToyUNet) -> LayerSelection:
    return LayerSelection(frozenset(model.layer_ids("time_embed")), frozenset(model.layer_ids(ATTENTION_ROLES)))


def unet_forward(model: ToyUNet, x_t, e_t, quantized=None, t: int | None = None, hook=None) -> Tensor:
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    return model.forward(x_t, e_t, quantized, t, hook)


# -- sampling -----------------------------------------------------------------------

def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update x_t -> x_{t_prev}."""
    if not t > t_prev >= 0:
        raise ContractError(f"ddim_step: need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
    eps = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
    a_t, a_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
    return (math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps).astype(np.float32)


def initial_noise(model: ToyUNet, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, model.in_channels, model.resolution, model.resolution)).astype(np.float32)


def sample(model: ToyUNet, schedule: NoiseSchedule, num_steps: int, seed: int = 0, quantized=None,
           n: int = 1, x_T: np.ndarray | None = None, hook=None) -> list[np.ndarray]:
    """DDIM trajectory [x_T, ..., x_0] from seeded Gaussian noise.

    ``hook(t, x_t, eps_hat)`` is called at every visited step.
    """
    steps = timesteps(schedule.T, num_steps)
    x = initial_noise(model, n, seed) if x_T is None else np.asarray(x_T, dtype=np.float32)
    traj = [x]
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps = model.forward(Tensor(x), time_embedding(t, model.d_e, schedule.T), quantized, t).data
        if hook is not None:
            hook(t, x, eps)
        x = ddim_step(x, eps, t, t_prev, schedule)
        traj.append(x)
    return traj


def trajectory_mse(reference: list[np.ndarray], other: list[np.ndarray]) -> float:
    """Mean squared difference over all states after the shared starting noise."""
    if len(reference) != len(other):
        raise ContractError("trajectories differ in length")
    errs = [np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2) for a, b in zip(reference[1:], other[1:])]
    return float(np.mean(errs))


# -- data and teacher training --------------------------------------------------------

def make_dataset(kind: str = "blobs", n: int = 2048, resolution: int = 16, seed: int = 0) -> np.ndarray:
    """Synthetic single-channel images in [-1, 1] on a zero background, shape (n, 1, r, r).

    ``blobs`` draws one Gaussian bump per image with random center, width,
    amplitude and sign; ``constant`` repeats a single centered bump.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    if kind == "blobs":
        cy = rng.uniform(2.5, resolution - 3.5, n)
        cx = rng.uniform(2.5, resolution - 3.5, n)
        sig = rng.uniform(1.0, 2.5, n) * resolution / 16
        amp = rng.uniform(0.5, 1.0, n) * rng.choice([-1.0, 1.0], n)
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        img = amp[:, None, None] * np.exp(-d2 / (2 * sig[:, None, None] ** 2))
    elif kind == "constant":
        c = (resolution - 1) / 2
        one = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2 * (resolution / 8) ** 2))
        img = np.broadcast_to(one, (n, resolution, resolution))
    else:
        raise ContractError(f"unknown dataset kind {kind!r}")
    return img.astype(np.float32)[:, None]


class TeacherTrainingError(RuntimeError):
    def __init__(self, message: str, final_loss: float):
        super().__init__(message)
        self.final_loss = final_loss


@dataclass
class TeacherConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    min_lr: float = 1e-4
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.1
    channels: tuple[int, int] = (8, 16)
    d_e: int = 32
    d_temb: int = 64
    loss_threshold: float = 0.5
    eval_samples: int = 512
    log_every: int = 0
    history: list[float] = field(default_factory=list, repr=False)


def _noised(x0: np.ndarray, ts: np.ndarray, schedule: NoiseSchedule, rng) -> tuple[np.ndarray, np.ndarray]:
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    ab = schedule.alpha_bars[ts - 1].reshape(-1, 1, 1, 1)
    return (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(np.float32), eps


def denoising_loss(model: ToyUNet, data: np.ndarray, schedule: NoiseSchedule, n: int, seed: int,
                   batch: int = 256) -> float:
    """Held-out epsilon-prediction MSE at uniformly drawn steps."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data), n)
    ts = rng.integers(1, schedule.T + 1, n)
    x_t, eps = _noised(data[idx], ts, schedule, rng)
    total = 0.0
    for i in range(0, n, batch):
        sl = slice(i, i + batch)
        pred = model.forward(Tensor(x_t[sl]), time_embedding(ts[sl], model.d_e, schedule.T)).data
        total += float(np.sum((pred.astype(np.float64) - eps[sl]) ** 2))
    return total / eps.size


def train_teacher(dataset: np.ndarray, config: TeacherConfig | None = None, seed: int = 0) -> ToyUNet:
    cfg = config or TeacherConfig()
    if dataset is None or len(dataset) == 0:
        raise ContractError("train_teacher: empty dataset")
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    model = ToyUNet(resolution=dataset.shape[-1], in_channels=dataset.shape[1], channels=tuple(cfg.channels),
                    d_e=cfg.d_e, d_temb=cfg.d_temb, seed=seed)
    model.set_requires_grad(True)
    opt = Adam([{"params": model.parameters(), "lr": cfg.lr}], clip_norm=1.0)
    rng = np.random.default_rng([seed, 1])
    cfg.history.clear()
    for step in range(cfg.steps):
        lr = cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * step / max(cfg.steps, 1)))
        set_lr(opt, [lr])
        idx = rng.integers(0, len(dataset), cfg.batch_size)
        ts = rng.integers(1, cfg.T + 1, cfg.batch_size)
        x_t, eps = _noised(dataset[idx], ts, schedule, rng)
        pred = model.forward(Tensor(x_t), time_embedding(ts, cfg.d_e, cfg.T))
        loss = ag.mse(pred, Tensor(eps))
        opt.zero_grad()
        ag.backward(loss)
        opt.step()
        cfg.history.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("teacher step %d loss %.4f", step, loss.item())
    model.set_requires_grad(False)
    held_out = denoising_loss(model, dataset, schedule, cfg.eval_samples, seed=seed + 7919)
    if not held_out < cfg.loss_threshold:
        raise TeacherTrainingError(f"teacher did not converge: held-out loss {held_out:.4f} "
                                   f">= threshold {cfg.loss_threshold}", held_out)
    return model
