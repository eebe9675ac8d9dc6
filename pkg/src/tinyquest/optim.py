from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autograd import Tensor


class Adam:
    """Adam over parameter groups, updating only parameters that hold a gradient.

    Parameters without ``.grad`` this step are left untouched (no momentum
    drift), so quantizer scales of clusters not visited stay put.
    """

    def __init__(self, groups: list[dict], betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None):
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"]), "relative": bool(g.get("relative", False))}
                       for g in groups]
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state: dict[int, dict] = {}

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def step(self) -> float:
        norm = self.grad_norm()
        coef = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            coef = self.clip_norm / (norm + 1e-12)
        b1, b2 = self.betas
        for group in self.groups:
            lr = group["lr"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad * np.float32(coef)
                st = self.state.setdefault(id(p), {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
                st["t"] += 1
                st["m"] = b1 * st["m"] + (1 - b1) * g
                st["v"] = b2 * st["v"] + (1 - b2) * g * g
                mhat = st["m"] / (1 - b1 ** st["t"])
                vhat = st["v"] / (1 - b2 ** st["t"])
                upd = lr * mhat / (np.sqrt(vhat) + self.eps)
                if group["relative"]:
                    # step in log space: the move is proportional to the value itself
                    p.data *= np.exp(-upd).astype(p.dtype)
                else:
                    p.data -= upd.astype(p.dtype)
        return norm


def set_lr(opt: Adam, lrs: Iterable[float]) -> None:
    for g, lr in zip(opt.groups, lrs):
        g["lr"] = float(lr)
