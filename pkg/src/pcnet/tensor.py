"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
current thread's tape. :func:`backward` walks the tape in reverse from the
loss node, hands each leaf its gradient and then clears the tape, so the
graph must be re-recorded before the next backward pass.

Only the operations needed by small fully-connected and convolutional
networks are provided; there is no general broadcasting.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pcnet.errors import ContractError, DimensionError, ValidationError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "add_bias",
    "reshape",
    "sum",
    "mean",
    "bce_loss",
    "elementwise",
    "backward",
    "no_grad",
    "grad_enabled",
    "tape_size",
    "clear_tape",
]


class _Node:
    __slots__ = ("output", "inputs", "vjp", "generation")

    def __init__(self, output, inputs, vjp, generation):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp
        self.generation = generation


class _Tape(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0
        self.enabled = True

    def clear(self):
        self.nodes = []
        self.generation += 1


_tape = _Tape()


class Tensor:
    """An n-dimensional float64 array that can sit on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording on this thread."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def grad_enabled() -> bool:
    return _tape.enabled


def tape_size() -> int:
    return len(_tape.nodes)


def clear_tape() -> None:
    _tape.clear()


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if _tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, tuple(inputs), vjp, _tape.generation)
        out._node = node
        _tape.nodes.append(node)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _record(A @ B, (a, b), vjp)


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``input`` (c_in×h×w, or batched n×c_in×h×w) with
    ``kernel`` (c_out×c_in×k×k).

    No kernel flip, zero padding on all four sides.
    """
    if stride < 1 or pad < 0:
        raise ValidationError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    x = input.data
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise DimensionError(f"conv2d: input must be c×h×w or n×c×h×w, got {input.shape}")
        x = x[None]
    K = kernel.data
    if K.ndim != 4 or K.shape[2] != K.shape[3]:
        raise DimensionError(f"conv2d: kernel must be c_out×c_in×k×k, got {kernel.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = K.shape
    if c_in != c:
        raise DimensionError(f"conv2d: input {input.shape} has {c} channels, kernel {kernel.shape} expects {c_in}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {input.shape} (pad={pad})")
    ho, wo = _conv_out_size(h, k, stride, pad), _conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.einsum("nchwpq,ocpq->nohw", win, K, optimize=True)

    def vjp(g):
        if not batched:
            g = g[None]
        dK = np.einsum("nchwpq,nohw->ocpq", win, g, optimize=True)
        dxp = np.zeros_like(xp)
        for p in range(k):
            for q in range(k):
                dxp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += np.einsum(
                    "nohw,oc->nchw", g, K[:, :, p, q]
                )
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return (dx if batched else dx[0]), dK

    return _record(out if batched else out[0], (input, kernel), vjp)


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


_ELEMENTWISE = {"add": add, "sub": sub, "relu": relu, "sigmoid": sigmoid, "scale": scale, "mul": mul}


def elementwise(op: str, *args):
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValidationError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 (features of n×k, channels of n×c×h×w)."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis 1 of {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    red = tuple(i for i in range(x.data.ndim) if i != 1)
    return _record(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=red)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean(a: Tensor) -> Tensor:
    src, n = a.shape, a.size
    return _record(np.array(a.data.mean()), (a,), lambda g: (np.full(src, float(g) / n),))


def bce_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    _same_shape(logits, labels, "bce_loss")
    y = labels.data
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("bce_loss: labels must be 0 or 1")
    x = logits.data
    n = x.size
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)

    def vjp(g):
        return (float(g) * (s - y) / n, np.zeros_like(y))

    return _record(np.array(loss.mean()), (logits, labels), vjp)


# --- reverse pass ---------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) to every leaf with ``requires_grad``.

    Gradients are accumulated into ``leaf.grad`` and also returned as a
    ``{leaf: grad}`` map. The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.generation != _tape.generation:
        raise ContractError("loss is not on the recorded graph (was backward already called?)")
    nodes = _tape.nodes
    try:
        start = len(nodes) - 1 - next(i for i, n in enumerate(reversed(nodes)) if n is node)
    except StopIteration:
        raise ContractError("loss is not on the recorded graph") from None

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for i in range(start, -1, -1):
        nd = nodes[i]
        g = pending.pop(id(nd.output), None)
        if g is None:
            continue
        for inp, gi in zip(nd.inputs, nd.vjp(g)):
            if not inp.requires_grad:
                continue
            if inp._node is None or inp._node.generation != _tape.generation:
                leaves[inp] = leaves[inp] + gi if inp in leaves else np.array(gi, dtype=np.float64)
            else:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
    _tape.clear()
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves
