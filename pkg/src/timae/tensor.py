"""A small dense tensor with reverse-mode autodiff, backed by numpy.

Only the operations the Ti-MAE network needs are provided. Every op builds
its output from numpy arrays and, when gradients are being tracked, records
a closure mapping the output gradient to one gradient per parent.

Nodes carry a monotonically increasing creation id. A node is always created
after its parents, so visiting reachable nodes in decreasing id order is a
valid reverse topological order; ``backward`` relies on exactly that.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_consumed", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self._consumed = False
        self._retain = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> Tensor:
        """Keep the gradient of this intermediate after backward (leaves always keep theirs)."""
        self._retain = True
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    # --------------------------------------------------------------- backward
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires it.

        Intermediates keep their gradient only when ``retain_grad()`` was called.
        The graph is released afterwards; calling again on the same loss
        without re-running the forward pass raises ContractError.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("backward() already called on this graph; re-run the forward pass")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = pending.pop(nid, None)
            if g is None:
                continue
            if node._backward is None or node._retain or node is self:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent._id)
                pending[parent._id] = pg if prev is None else prev + pg
            node._parents = ()
            node._backward = None
        self._consumed = True


# ---------------------------------------------------------------- internals
def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0), (x,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw)


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return {"gelu": gelu, "relu": relu}[name]
    except KeyError:
        raise ParameterError(f"unknown activation {name!r}") from None


# ------------------------------------------------------------------- linalg
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims instead of materialising a broadcast b-gradient
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias), weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bw)


def _row_index(idx, batch: int, length: int) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"row indices must be integers, got {idx.dtype}")
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (batch, idx.shape[0]))
    if idx.ndim != 2 or idx.shape[0] != batch:
        raise ShapeError(f"row indices of shape {idx.shape} do not match batch {batch}")
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError(f"row index out of range for length {length}")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select token rows: x [B, L, d], idx [B, V] (or [V]) -> [B, V, d]."""
    if x.ndim != 3:
        raise ShapeError(f"gather_rows expects [B, L, d], got {x.shape}")
    B, L, d = x.shape
    idx = _row_index(idx, B, L)
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def bw(g):
        gx = np.zeros_like(x.data)
        rows = (np.arange(B)[:, None] * L + idx).reshape(-1)
        np.add.at(gx.reshape(B * L, d), rows, g.reshape(-1, d))
        return (gx,)

    return _make(out, (x,), bw)


def scatter_rows(x: Tensor, idx, length: int) -> Tensor:
    """Write rows x [B, V, d] at positions idx into a zero target [B, length, d]."""
    if x.ndim != 3:
        raise ShapeError(f"scatter_rows expects [B, V, d], got {x.shape}")
    B, V, d = x.shape
    idx = _row_index(idx, B, length)
    if idx.shape[1] != V:
        raise ShapeError(f"scatter_rows: {V} rows but {idx.shape[1]} indices")
    out = np.zeros((B, length, d), dtype=x.dtype)
    np.put_along_axis(out, idx[:, :, None], x.data, axis=1)
    return _make(out, (x,), lambda g: (np.take_along_axis(g, idx[:, :, None], axis=1),))


# --------------------------------------------------------------- reductions
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis, keepdims), 1.0 / n)


# --------------------------------------------------------------- NN kernels
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (z * (g - (g * z).sum(axis=axis, keepdims=True)),)

    return _make(z, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: feature dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation along time: x [B, L, m], kernel [k, m, d] -> [B, L', d]."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects x [B, L, m] and kernel [k, m, d], got {x.shape}, {kernel.shape}")
    B, L, m = x.shape
    k, km, d = kernel.shape
    if km != m:
        raise ShapeError(f"conv1d: input has {m} channels, kernel expects {km}")
    if stride < 1 or padding < 0:
        raise ParameterError("conv1d needs stride >= 1 and padding >= 0")
    span = L + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv1d: (L + 2*padding - k) / stride = ({L} + {2 * padding} - {k}) / {stride} is not a whole number")
    Lo = span // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    stop = lambda j: j + stride * (Lo - 1) + 1  # noqa: E731
    out = np.zeros((B, Lo, d), dtype=np.result_type(x.dtype, kernel.dtype))
    for j in range(k):
        out += xp[:, j : stop(j) : stride, :] @ kernel.data[j]
    if bias is not None:
        out += bias.data

    def bw(g):
        gk = np.empty_like(kernel.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        g2 = g.reshape(-1, d)
        for j in range(k):
            win = xp[:, j : stop(j) : stride, :]
            gk[j] = win.reshape(-1, m).T @ g2
            if gxp is not None:
                gxp[:, j : stop(j) : stride, :] += g @ kernel.data[j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, padding : padding + L, :] if padding else gxp
        grads = (gx, gk)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))
