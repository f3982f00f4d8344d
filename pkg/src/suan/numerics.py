"""Dense float64 tensors with tape-based reverse-mode gradients.

Ops executed while a :class:`Tape` is active are appended to it in execution
order, so the tape is already a topological order of the graph and backward
is a single reverse sweep. Outside a tape, ops run in inference mode and
record nothing.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

SIGMOID_CLAMP = 1e-12
PROB_CLAMP = 1e-12

_active_tapes: list["Tape"] = []


class Tape:
    """Ordered trace of recorded ops (the computation record)."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)
        self._ids.add(id(node))

    def __contains__(self, node: "Tensor") -> bool:
        return id(node) in self._ids

    def __len__(self) -> int:
        return len(self.nodes)


def _recording() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "_owned")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to Tensor's reflected op

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        # the first incoming array may be shared, so copy lazily on the second
        if self.grad is None:
            self.grad = g
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)


class Param(Tensor):
    """Trainable leaf with a persistent gradient buffer and Adam moments."""

    __slots__ = ("m", "v", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.name = name

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _recording()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through every recorded node into Params."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss not in tape:
        raise RuntimeError("backward called on a loss that was not recorded on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        node.backward_fn(g)
        node.grad = None  # intermediate grads are not kept


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: x._accumulate(g * out))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: x._accumulate(g * 0.5 / out))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: x._accumulate(g * inside))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: x._accumulate(g * on))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped to [1e-12, 1 - 1e-12]."""
    s = np.clip(expit(x.data), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    return _make(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)))


def swish(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: x._accumulate(g * (s + out * (1.0 - s))))


# ------------------------------------------------------------------- shaping

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(out, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: x._accumulate(g.transpose(inv)))


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: x._accumulate(_unbroadcast(g, x.shape)))


# ----------------------------------------------------------------- contraction

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 and b.ndim == 2:
        return _matmul_flat(a, b)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    """Stacked rows times one matrix, as a single 2-D product."""
    lead, k = a.shape[:-1], a.shape[-1]
    a2 = a.data.reshape(-1, k)

    def bw(g):
        g2 = g.reshape(-1, b.shape[1])
        if a.requires_grad:
            a._accumulate((g2 @ b.data.T).reshape(a.shape))
        if b.requires_grad:
            b._accumulate(a2.T @ g2)

    return _make((a2 @ b.data).reshape(*lead, b.shape[1]), (a, b), bw)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]``; the gradient scatters back with bincount."""
    idx = np.asarray(idx, dtype=np.int64)
    n_rows, width = table.shape

    def bw(g):
        flat = idx.ravel()
        rows = g.reshape(flat.size, width)
        acc = np.empty((n_rows, width))
        for c in range(width):
            acc[:, c] = np.bincount(flat, weights=rows[:, c], minlength=n_rows)
        table._accumulate(acc)

    return _make(table.data[idx], (table,), bw)


# ------------------------------------------------------------------- kernels

def masked_softmax(logits: Tensor, allow: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allow``; disallowed entries are exactly 0."""
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), logits.shape)
    if not allow.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no allowed entries")
    z = np.where(allow, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)  # exp(-inf) == 0 exactly
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        logits._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (logits,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"rms_norm: last axis {x.shape[-1]} != gain size {gain.shape[-1]}")
    denom = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    # all-zero rows with eps == 0 map to zero instead of nan
    inv = np.where(denom > 0, 1.0 / np.sqrt(np.where(denom > 0, denom, 1.0)), 0.0)
    xhat = x.data * inv
    out = xhat * gain.data
    n = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n))

    return _make(out, (x, gain), bw)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-8) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gain + shift


def dice(x: Tensor, alpha: Tensor, stats: "DiceStats", train_mode: bool) -> Tensor:
    """Data-adaptive activation over the batch axis (axis 0), per channel."""
    if train_mode:
        if x.shape[0] < 2:
            raise ValueError("dice in train mode needs a batch of at least 2")
        mean = x.mean(axis=0, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=0, keepdims=True)
        p = sigmoid_raw(xc / sqrt(var + stats.eps))
        stats.update(mean.data[0], var.data[0])
    else:
        p = Tensor(expit((x.data - stats.mean) / np.sqrt(stats.var + stats.eps)))
    return p * x + (1.0 - p) * alpha * x


def sigmoid_raw(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)))


class DiceStats:
    """Running batch statistics for one dice layer.

    The moving averages are bias-corrected like Adam's moments, so inference
    statistics are usable after a handful of updates instead of hundreds.
    """

    def __init__(self, width: int, momentum: float = 0.99, eps: float = 1e-8):
        self.mean = np.zeros(width)
        self.var = np.ones(width)
        self.acc_mean = np.zeros(width)
        self.acc_var = np.zeros(width)
        self.updates = 0
        self.momentum = momentum
        self.eps = eps

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.updates += 1
        self.acc_mean = m * self.acc_mean + (1.0 - m) * mean
        self.acc_var = m * self.acc_var + (1.0 - m) * var
        corr = 1.0 - m ** self.updates
        self.mean = self.acc_mean / corr
        self.var = self.acc_var / corr


def bce(prob, target) -> Tensor:
    """Elementwise binary cross-entropy; targets may be soft."""
    prob = as_tensor(prob)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    p = clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(t * log(p) + (1.0 - t) * log(1.0 - p))


# ----------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: Iterable[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_index = 0

    def step(self) -> None:
        self.step_index += 1
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.step_index)


def adam_step(params: Iterable[Param], lr: float, beta1: float, beta2: float,
              eps: float, step_index: int) -> None:
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    c1 = 1.0 - beta1 ** step_index
    c2 = 1.0 - beta2 ** step_index
    for p in params:
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        if lr != 0.0:
            p.data -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.zero_grad()


# ------------------------------------------------------------ gradient check

def finite_difference(loss_fn: Callable[[], float], param: Param, index: tuple,
                      step: float = 1e-5) -> float:
    """Central difference of ``loss_fn`` w.r.t. one entry of ``param``."""
    orig = param.data[index]
    param.data[index] = orig + step
    up = loss_fn()
    param.data[index] = orig - step
    down = loss_fn()
    param.data[index] = orig
    return (up - down) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def is_finite(x: Tensor | np.ndarray) -> bool:
    data = x.data if isinstance(x, Tensor) else x
    return bool(np.all(np.isfinite(data)))


def scalar_sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
