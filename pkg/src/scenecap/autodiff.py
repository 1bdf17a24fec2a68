"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a plain tape: every operation returns a new ``Tensor`` whose
backward closure scatters the incoming gradient to its parents. A backward
pass topologically replays the tape from a scalar root. Data buffers are
float64 throughout so gradients survive central-difference verification;
reductions use numpy's sequential row-major accumulation, which makes every
operation bitwise deterministic for identical inputs.

A tape is confined to the thread that built it. ``no_grad()`` switches tape
recording off for the current thread only, so concurrent inference streams
never share graph state.
"""

from __future__ import annotations

import math
import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, OptimizerError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    Tensors are immutable after forward construction; only the optimizer
    mutates leaf data and only backward passes touch ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other):
        a, b = self, _as_tensor(other)

        def bw(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        return _node(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(g):
            _accum(a, -g)

        return _node(-a.data, (a,), bw)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        a, b = self, _as_tensor(other)

        def bw(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return _node(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_tensor(other)

        def bw(g):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return _node(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)

        def bw(g):
            _accum(a, g * e * np.power(a.data, e - 1.0))

        return _node(np.power(a.data, e), (a,), bw)

    def __matmul__(self, other):
        a, b = self, _as_tensor(other)
        if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2] \
                or a.data.shape[:-2] != b.data.shape[:-2]:
            raise DimensionError(
                f"matmul shapes do not align: {a.data.shape} x {b.data.shape}")

        def bw(g):
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

        return _node(a.data @ b.data, (a, b), bw)

    def __getitem__(self, key):
        a = self

        def bw(g):
            gx = np.zeros_like(a.data)
            gx[key] += g
            _accum(a, gx)

        return _node(a.data[key], (a,), bw)

    # ------------------------------------------------------------------
    # elementwise functions
    # ------------------------------------------------------------------
    def exp(self):
        a = self
        y = np.exp(a.data)

        def bw(g):
            _accum(a, g * y)

        return _node(y, (a,), bw)

    def log(self):
        a = self

        def bw(g):
            _accum(a, g / a.data)

        return _node(np.log(a.data), (a,), bw)

    def sqrt(self):
        a = self
        y = np.sqrt(a.data)

        def bw(g):
            _accum(a, g * 0.5 / y)

        return _node(y, (a,), bw)

    def tanh(self):
        a = self
        y = np.tanh(a.data)

        def bw(g):
            _accum(a, g * (1.0 - y * y))

        return _node(y, (a,), bw)

    # ------------------------------------------------------------------
    # reductions and reshaping
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        y = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

        return _node(y, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bw(g):
            _accum(a, g.reshape(a.data.shape))

        return _node(a.data.reshape(shape), (a,), bw)

    def transpose(self, *axes):
        a = self
        perm = axes if axes else tuple(reversed(range(a.data.ndim)))
        inv = np.argsort(perm)

        def bw(g):
            _accum(a, g.transpose(inv))

        return _node(a.data.transpose(perm), (a,), bw)

    @property
    def T(self):
        return self.transpose()

    # ------------------------------------------------------------------
    # autodiff driver
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad set."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        if not self.requires_grad:
            return
        self.grad = np.ones_like(self.data)
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward(node.grad)


def _scalar_err(t: Tensor):
    raise ValueError(f"item() on non-scalar tensor of shape {t.shape}")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()
    return order


# ----------------------------------------------------------------------
# neural building blocks
# ----------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1 within 1e-12.

    NaN inputs yield NaN outputs; no masking is attempted here.
    """
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, (g - dot) * y)

    return _node(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        p = np.exp(y)
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gg = g * gain.data
        _accum(x, inv * (gg - gg.mean(axis=-1, keepdims=True)
                         - xhat * (gg * xhat).mean(axis=-1, keepdims=True)))
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth tanh-form GELU; smoothness keeps finite-difference checks clean."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _node(0.5 * x.data * (1.0 + t), (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the identity region."""
    mask = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        _accum(x, g * mask)

    return _node(np.clip(x.data, lo, hi), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    return concat([t.reshape(1, -1) for t in tensors], axis=0)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding); gradient scatters back into the table."""
    idx = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _node(table.data[idx], (table,), bw)


def gather_rows(x: Tensor, ids) -> Tensor:
    """Pick one column per row: y[t] = x[t, ids[t]]."""
    idx = np.asarray(ids, dtype=np.int64)
    rows = np.arange(x.data.shape[0])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _accum(x, gx)

    return _node(x.data[rows, idx], (x,), bw)


def max_along(x: Tensor, axis: int) -> Tensor:
    """Maximum over one axis; gradient routes to the first argmax entry."""
    am = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(am, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(am, axis),
                          np.expand_dims(g, axis), axis=axis)
        _accum(x, gx)

    return _node(y, (x,), bw)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------
def cosine_lr(base_lr: float, epoch: float, total_epochs: float) -> float:
    """Cosine anneal from ``base_lr`` at epoch 0 down to 0 at ``total_epochs``."""
    frac = min(max(epoch, 0.0), total_epochs) / total_epochs
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay and an optional cosine schedule.

    ``params`` maps names to leaf tensors; moment buffers are allocated
    lazily and stay shape-congruent with their parameters.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, schedule_epochs: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule_epochs = schedule_epochs
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self, epoch: float | None = None) -> float:
        if epoch is not None and self.schedule_epochs:
            return cosine_lr(self.lr, epoch, self.schedule_epochs)
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, epoch: float | None = None) -> None:
        self.step_count += 1
        lr = self.current_lr(epoch)
        b1, b2 = self.betas
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"parameter '{name}' has no gradient")
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps)
                            + self.weight_decay * p.data)


# ----------------------------------------------------------------------
# verification
# ----------------------------------------------------------------------
def finite_difference_check(f, x, h: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    Returns max over coordinates of
    ``|analytic - central| / max(1e-8, |central|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        fp = f(Tensor(bump.reshape(x0.shape))).item()
        bump[i] -= 2.0 * h
        fm = f(Tensor(bump.reshape(x0.shape))).item()
        central = (fp - fm) / (2.0 * h)
        rel = abs(float(analytic.reshape(-1)[i]) - central) / max(1e-8, abs(central))
        worst = max(worst, rel)
    return worst


def checksum_params(params: dict[str, Tensor]) -> str:
    """Order-independent digest of parameter bytes, for freeze contracts."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(struct.pack("<Q", params[name].data.nbytes))
        digest.update(params[name].data.tobytes())
    return digest.hexdigest()
