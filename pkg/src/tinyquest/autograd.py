"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the recorded
graph in reverse topological order, so each node is visited exactly once.
Tensors are float32 by default; the finite-difference oracle and the analysis
probes run the same ops in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ContractError(ValueError):
    """An op was called with arguments violating its contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def backward(self) -> dict[str, np.ndarray]:
        return backward(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise --------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


# -- reductions and losses ------------------------------------------------------

def mean(x: Tensor, axis=None) -> Tensor:
    out = x.data.mean(axis=axis)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ContractError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _make(np.asarray(np.mean(diff * diff), dtype=_result_dtype(a, b)), (a, b), bw, "mse")


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw, "matmul")


def _flat_padded(x: np.ndarray) -> tuple[np.ndarray, int]:
    """(B, C, H, W) -> (C, B*(H+2)*(W+2) + tail) zero-padded rows.

    A 3x3 tap (i, j) is then a plain column offset i*(W+2) + j, so each tap is
    one GEMM over a strided slice. ``tail`` keeps the last offsets in bounds.
    """
    B, C, H, W = x.shape
    Hp, Wp = H + 2, W + 2
    n = B * Hp * Wp
    flat = np.zeros((C, n + 2 * Wp + 2), dtype=x.dtype)
    flat[:, :n].reshape(C, B, Hp, Wp)[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    return flat, n


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution (cross-correlation), stride 1, zero padding 1, NCHW."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ContractError(f"conv2d_3x3: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ContractError(f"conv2d_3x3: bias {b.shape} does not match weight {w.shape}")
    B, C, H, W = x.shape
    O = w.shape[0]
    Hp, Wp = H + 2, W + 2
    flat, n = _flat_padded(x.data)
    taps = [(i * Wp + j, np.ascontiguousarray(w.data[:, :, i, j])) for i in range(3) for j in range(3)]
    acc = np.zeros((O, n), dtype=x.dtype)
    for off, wij in taps:
        acc += wij @ flat[:, off:off + n]
    out = acc.reshape(O, B, Hp, Wp)[:, :, :H, :W].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        G = np.zeros((O, B, Hp, Wp), dtype=g.dtype)
        G[:, :, :H, :W] = g.transpose(1, 0, 2, 3)
        G = G.reshape(O, n)
        gx = gw = gb = None
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            for off, wij in taps:
                gflat[:, off:off + n] += wij.T @ G
            gx = gflat[:, :n].reshape(C, B, Hp, Wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=w.dtype)
            for k, (off, _) in enumerate(taps):
                gw[:, :, k // 3, k % 3] = G @ flat[:, off:off + n].T
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d_3x3")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim < 2 or x.shape[1] % num_groups:
        raise ContractError(f"group_norm: {x.shape[1] if x.ndim > 1 else x.shape} channels not divisible into {num_groups} groups")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ContractError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {x.shape[1]}")
    B, C = x.shape[:2]
    xg = x.data.reshape(B, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(B, num_groups, -1)
            xh = xhat.reshape(B, num_groups, -1)
            n = xh.shape[2]
            gx = (inv / n) * (n * dxhat - dxhat.sum(axis=2, keepdims=True) - xh * (dxhat * xh).sum(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "group_norm")


# -- structural ops (no arithmetic) -----------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), bw, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- graph traversal ----------------------------------------------------------

def tape(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root`` in forward (topological) order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, targets: set[int] | None = None) -> dict[int, np.ndarray]:
    order = tape(root)
    if targets is not None:
        # only nodes with a path to a requested input need gradients
        needed: set[int] = set()
        for node in order:
            if id(node) in targets or any(id(p) in needed for p in node._parents):
                needed.add(id(node))
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        if targets is not None and id(node) not in needed:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if targets is not None and id(p) not in needed:
                continue
            key = id(p)
            pg = np.asarray(pg, dtype=p.dtype)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def _check_loss(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is detached from the tape (no input requires grad)")


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every reachable leaf.

    Returns the gradient map keyed by leaf name (unnamed leaves get a
    positional key). Gradients add onto any existing ``.grad``; call
    ``zero_grad`` between optimizer steps.
    """
    _check_loss(loss)
    grads = _propagate(loss)
    gmap: dict[str, np.ndarray] = {}
    for i, node in enumerate(tape(loss)):
        if not node.is_leaf or id(node) not in grads:
            continue
        g = grads[id(node)]
        node.grad = g.copy() if node.grad is None else node.grad + g
        gmap[node.name or f"leaf{i}"] = node.grad
    return gmap


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray | None]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs``; ``.grad`` is untouched.

    Inputs that the output does not depend on get ``None``.
    """
    _check_loss(output)
    grads = _propagate(output, {id(t) for t in inputs})
    return [grads.get(id(t)) for t in inputs]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite differences ---------------------------------------------------------

class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if not h > 0:
        raise ContractError(f"finite_difference_grad: step must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def evaluate(i: int) -> float:
        v = f(Tensor(base.copy(), dtype=np.float64))
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}", coordinate=i)
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(i)
        flat[i] = orig - h
        fm = evaluate(i)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by name over the op basis."""
    table = {
        "matmul": matmul,
        "conv2d_3x3": conv2d_3x3,
        "add": add,
        "mul": mul,
        "scale": scale,
        "silu": silu,
        "softmax": softmax,
        "group_norm": group_norm,
        "mean": mean,
        "mse": mse,
    }
    if op_kind not in table:
        raise ContractError(f"unknown op {op_kind!r}")
    return table[op_kind](*inputs, **kwargs)
