"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable result registers itself on a thread-local tape in
creation order, which is already a valid topological order.  ``backward``
walks the tape in reverse, accumulating gradients into leaves, and then
clears it.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "ContractError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "current_tape",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ComputationTape:
    """Ordered record of the differentiable operations of one step."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.in_backward = False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def current_tape() -> ComputationTape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = ComputationTape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype.kind in "iub" and dtype is None:
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            current_tape().record(out)
        return out

    def backward(self) -> None:
        backward(self)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.dtype))
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.dtype))
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> Tensor:
        return Tensor(_as_array(other, self.dtype)) - self

    def __mul__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.dtype))
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other, self.dtype))
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> Tensor:
        return Tensor(_as_array(other, self.dtype)) / self

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(exponent)
        return Tensor._make(
            a.data**p, (a,), lambda g: a._accumulate(g * p * a.data ** (p - 1.0))
        )

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        a = self
        out = a.data[index]

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._make(out, (a,), bw)

    # -- unary functions -----------------------------------------------------

    def exp(self) -> Tensor:
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out))

    def log(self) -> Tensor:
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))

    def sqrt(self) -> Tensor:
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * 0.5 / out))

    def abs(self) -> Tensor:
        a = self
        return Tensor._make(
            np.abs(a.data), (a,), lambda g: a._accumulate(g * np.sign(a.data))
        )

    def relu(self) -> Tensor:
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))

    def sigmoid(self) -> Tensor:
        a = self
        out = _stable_sigmoid(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))

    def tanh(self) -> Tensor:
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))

    def clamp(self, lo: float | None = None, hi: float | None = None) -> Tensor:
        """Clip values; the gradient is zero where clipping is active."""
        a = self
        out = np.clip(a.data, lo, hi)
        keep = np.ones(a.shape, dtype=bool)
        if lo is not None:
            keep &= a.data >= lo
        if hi is not None:
            keep &= a.data <= hi
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * keep))

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(np.asarray(out), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape) -> Tensor:
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(
            a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape))
        )

    def transpose(self, *axes) -> Tensor:
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(
            a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inv))
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def softmax(self, axis: int = -1) -> Tensor:
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1) -> Tensor:
        return log_softmax(self, axis)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Intermediate nodes receive gradients during the sweep; they are
    discarded when the tape is cleared, leaving only leaf gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if tape.in_backward:
        raise RuntimeError("nested backward on the same tape")
    tape.in_backward = True
    try:
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            node.grad = None
        if loss._backward is None:
            loss.grad = np.ones_like(loss.data)
    finally:
        tape.in_backward = False
        tape.clear()


# ---------------------------------------------------------------------------
# free functions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            if p.requires_grad:
                p._accumulate(piece)

    return Tensor._make(out, parts, bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([p.reshape(p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts], axis)


def maximum(x: Tensor, floor: float) -> Tensor:
    return x.clamp(lo=floor)


def minimum(x: Tensor, ceiling: float) -> Tensor:
    return x.clamp(hi=ceiling)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return Tensor._make(table.data[ids], (table,), bw)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each channel of a time-major ``T x D`` input across time."""
    return _normalize(x, axis=-2, eps=eps)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row across its features (no affine part)."""
    return _normalize(x, axis=-1, eps=eps)


def _normalize(x: Tensor, axis: int, eps: float) -> Tensor:
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    n = x.shape[axis]

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * out).mean(axis=axis, keepdims=True)
        x._accumulate(inv * (g - gm - out * gx))

    del n
    return Tensor._make(out, (x,), bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Length-preserving dilated 1-D convolution over a ``T x C_in`` input.

    ``weight`` has shape ``(k, C_in, C_out)`` with odd ``k``; the input is
    zero-padded by ``dilation * (k - 1) / 2`` frames on both sides.
    """
    k, cin, cout = weight.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if x.ndim != 2 or x.shape[1] != cin:
        raise ShapeError(f"conv1d: input {x.shape} does not match weight {weight.shape}")
    if dilation < 1:
        raise ContractError("conv1d: dilation must be >= 1")
    t = x.shape[0]
    pad = dilation * (k - 1) // 2
    xp = np.zeros((t + 2 * pad, cin), dtype=x.dtype)
    xp[pad : pad + t] = x.data
    cols = np.concatenate([xp[j * dilation : j * dilation + t] for j in range(k)], axis=1)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if weight.requires_grad:
            weight._accumulate((cols.T @ g).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gcols = g @ w2.T
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j * dilation : j * dilation + t] += gcols[:, j * cin : (j + 1) * cin]
            x._accumulate(gxp[pad : pad + t])

    return Tensor._make(out, parents, bw)


def window_bounds(length: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive-exclusive key range ``[lo, hi)`` attended by each query.

    A window at least as long as the sequence covers everything; otherwise
    query ``i`` sees ``[i - window // 2, i - window // 2 + window)`` clipped
    to the sequence.
    """
    idx = np.arange(length)
    if window >= length:
        return np.zeros(length, dtype=np.int64), np.full(length, length, dtype=np.int64)
    lo = idx - window // 2
    hi = lo + window
    return np.clip(lo, 0, length), np.clip(hi, 0, length)


def window_mask(length: int, window: int) -> np.ndarray:
    lo, hi = window_bounds(length, window)
    j = np.arange(length)
    return (j[None, :] >= lo[:, None]) & (j[None, :] < hi[:, None])


def local_attention(q: Tensor, k: Tensor, v: Tensor, window: int,
                    return_weights: bool = False):
    """Single-head scaled dot-product attention restricted to a local window.

    ``q`` and ``k`` are ``T x Dk``, ``v`` is ``T_v x Dv`` with ``T_v == T``.
    Scores outside the window are excluded before the softmax, so their
    weights are exactly zero.  Short windows use a banded layout that costs
    ``O(T * window)``; long ones fall back to a dense masked matrix.
    """
    if window < 1:
        raise ContractError("attention window must be >= 1")
    t, dk = q.shape
    if k.shape != q.shape or v.shape[0] != t:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    scale = 1.0 / np.sqrt(dk)
    if window >= t or 2 * window >= t:
        return _dense_local_attention(q, k, v, window, scale, return_weights)
    return _banded_local_attention(q, k, v, window, scale, return_weights)


def _dense_local_attention(q, k, v, window, scale, return_weights):
    t = q.shape[0]
    mask = window_mask(t, window)
    s = (q.data @ k.data.T) * scale
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=1, keepdims=True)
    out = w @ v.data

    def bw(g):
        if v.requires_grad:
            v._accumulate(w.T @ g)
        gw = g @ v.data.T
        gs = w * (gw - (gw * w).sum(axis=1, keepdims=True)) * scale
        if q.requires_grad:
            q._accumulate(gs @ k.data)
        if k.requires_grad:
            k._accumulate(gs.T @ q.data)

    res = Tensor._make(out, (q, k, v), bw)
    return (res, w) if return_weights else res


def _rowdot(a, windows):
    # a: t x d, windows: t x d x w  ->  t x w
    return np.matmul(a[:, None, :], windows)[:, 0, :]


def _rowmix(weights, windows):
    # weights: t x w, windows: t x d x w  ->  t x d
    return np.matmul(windows, weights[:, :, None])[:, :, 0]


def _banded_local_attention(q, k, v, window, scale, return_weights):
    t, dk = q.shape
    half = window // 2
    right = window - half - 1
    # padded rows sit at [0, half) and [half + t, half + t + right)
    kp = np.zeros((t + window - 1, dk), dtype=k.dtype)
    kp[half : half + t] = k.data
    vp = np.zeros((t + window - 1, v.shape[1]), dtype=v.dtype)
    vp[half : half + t] = v.data
    kw = np.lib.stride_tricks.sliding_window_view(kp, window, axis=0)  # t, dk, w
    vw = np.lib.stride_tricks.sliding_window_view(vp, window, axis=0)  # t, dv, w
    pos = np.arange(t)[:, None] - half + np.arange(window)[None, :]
    valid = (pos >= 0) & (pos < t)
    s = _rowdot(q.data, kw) * scale
    s = np.where(valid, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=1, keepdims=True)
    out = _rowmix(w, vw)

    # key-major view: key r receives from query r + half - j at offset j
    qrow = np.arange(t)[:, None] + half - np.arange(window)[None, :]
    qvalid = (qrow >= 0) & (qrow < t)
    qrow = np.clip(qrow, 0, t - 1)
    offs = np.arange(window)[None, :]

    def to_key_major(a):
        return np.ascontiguousarray(np.where(qvalid, a[qrow, offs], 0.0)[:, ::-1])

    def rev_windows(a):
        # out[r, :, m] = a[r + half - (window - 1 - m)], zero outside
        ap = np.zeros((t + window - 1, a.shape[1]), dtype=a.dtype)
        ap[right : right + t] = a
        return np.lib.stride_tricks.sliding_window_view(ap, window, axis=0)

    def bw(g):
        gw = _rowdot(g, vw)
        if v.requires_grad:
            v._accumulate(_rowmix(to_key_major(w), rev_windows(g)))
        gs = w * (gw - (gw * w).sum(axis=1, keepdims=True)) * scale
        if q.requires_grad:
            q._accumulate(_rowmix(gs, kw))
        if k.requires_grad:
            k._accumulate(_rowmix(to_key_major(gs), rev_windows(q.data)))

    res = Tensor._make(out, (q, k, v), bw)
    if return_weights:
        dense = np.zeros((t, t), dtype=w.dtype)
        rows = np.repeat(np.arange(t), window)
        cols = pos.reshape(-1)
        keep = valid.reshape(-1)
        dense[rows[keep], cols[keep]] = w.reshape(-1)[keep]
        return res, dense
    return res
