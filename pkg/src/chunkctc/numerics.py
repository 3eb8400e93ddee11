"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the encoder and the CTC losses are provided.
Every op records its inputs and a closure that maps the output adjoint to
input adjoints; :meth:`Tensor.backward` walks the graph in reverse
topological order and sums adjoints of shared subexpressions.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "tensor",
    "matmul",
    "add",
    "mul",
    "log_softmax",
    "logsumexp",
    "softmax",
    "relu",
    "gelu",
    "sigmoid",
    "glu",
    "layer_norm",
    "frames",
    "pad_time",
    "take",
    "concat",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build values only; no graph is recorded inside this block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def backward(self) -> None:
        """Populate ``grad`` of every leaf that requires it.

        The graph below this node may be backpropagated once; leaf gradients
        accumulate until explicitly zeroed.
        """
        if self.value.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it first")
        self._consumed = True

        order = _topological(self)
        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(x, requires_grad: bool = False, name: str | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad, name=name)


def _make(value: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED:
        parents = tuple(parents)
        if any(_needs_grad(p) for p in parents):
            out._parents = parents
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(value, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.value), (x,), lambda g: (g / x.value,))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.value
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    y = 0.5 * v * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return _make(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """First half gated by the sigmoid of the second half along ``axis``."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu needs an even size along axis {axis}, got {n}")
    a, b = np.split(x.value, 2, axis=axis)
    s = 0.5 * (1.0 + np.tanh(0.5 * b))
    y = a * s

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return _make(y, (x,), backward)


# ------------------------------------------------------------------ reshaping

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    value = x.value[index]

    def backward(g):
        out = np.zeros_like(x.value)
        out[index] += g
        return (out,)

    return _make(np.array(value, copy=True), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    value = np.concatenate([x.value for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(value, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def pad_time(x: Tensor, left: int, right: int, axis: int = -2) -> Tensor:
    """Zero-pad ``x`` along ``axis``."""
    axis = axis % x.ndim
    width = [(0, 0)] * x.ndim
    width[axis] = (left, right)
    value = np.pad(x.value, width)
    n = x.shape[axis]

    def backward(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(left, left + n)
        return (g[tuple(sl)],)

    return _make(value, (x,), backward)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``x`` (first axis) with an integer index array of any shape."""
    index = np.asarray(index, dtype=np.intp)
    value = x.value[index]

    def backward(g):
        out = np.zeros_like(x.value)
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (out,)

    return _make(value, (x,), backward)


def frames(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Strided sliding windows over the time axis.

    ``x`` is ``[B, T, C]``; the result is ``[B, T_out, kernel, C]`` with
    ``T_out = (T - kernel) // stride + 1``. Contracting the last two axes
    with a weight gives a strided 1-D convolution.
    """
    if x.ndim != 3:
        raise ShapeError(f"frames expects [B, T, C], got {x.shape}")
    B, T, C = x.shape
    if T < kernel:
        raise ShapeError(f"sequence of {T} frames is shorter than kernel {kernel}")
    n = (T - kernel) // stride + 1
    stop = stride * (n - 1) + 1
    value = np.stack([x.value[:, j:j + stop:stride] for j in range(kernel)], axis=2)

    def backward(g):
        out = np.zeros_like(x.value)
        for j in range(kernel):
            out[:, j:j + stop:stride] += g[:, :, j]
        return (out,)

    return _make(value, (x,), backward)


# ----------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None) -> Tensor:
    value = np.sum(x.value, axis=axis)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(value, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        if a.shape[-2] == 1:
            # one-row products take a gemv path with a different summation
            # order; routing them through gemm keeps rows independent of row count
            value = np.matmul(np.concatenate([a.value, a.value], axis=-2), b.value)[..., :1, :]
        else:
            value = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(value, (a, b), backward)


def _check_finite(v: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"{op}: non-finite input")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.value, "logsumexp")
    m = np.max(x.value, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(x.value - m), axis=axis, keepdims=True)) + m
    p = np.exp(x.value - s)

    def backward(g):
        return (np.expand_dims(g, axis) * p,)

    return _make(np.squeeze(s, axis=axis), (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 2:
        raise ShapeError("log_softmax needs at least two classes")
    _check_finite(x.value, "log_softmax")
    m = np.max(x.value, axis=axis, keepdims=True)
    z = x.value - m
    y = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    p = np.exp(y)

    def backward(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.value, "softmax")
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.value + bias.value
    n = v.shape[-1]

    def backward(g):
        gx_hat = g * gain.value
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(y, (x, gain, bias), backward)


def custom(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an externally computed value whose adjoints come from ``backward``."""
    return _make(np.asarray(value, dtype=np.float64), parents, backward)
