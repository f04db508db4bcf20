"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When recording is on and at
least one input participates in gradients, the output keeps a reference to
its inputs plus a closure mapping the output gradient to input gradients.
:func:`backward` walks that graph in reverse topological order and returns
gradients for the leaf tensors that have ``grad_enabled`` set.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, VocabError

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / decoding)."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    __slots__ = ("data", "grad_enabled", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, grad_enabled: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad_enabled = bool(grad_enabled)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = "trainable" if self.grad_enabled and self.is_leaf else ("frozen" if self.is_leaf else "op")
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if _recording() and any(p.grad_enabled for p in parents):
        out.grad_enabled = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.grad_enabled = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise and shape ops -------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (bias add, additive masks)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast (batched attention)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.grad_enabled:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.grad_enabled:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, parts, backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    x = _as_tensor(x)
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return _make(np.where(positive, x.data, 0.0), (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.array(x.data.sum()), (x,), backward)


def tensor_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size

    def backward(g):
        return (np.full(x.shape, float(g) / count),)

    return _make(np.array(x.data.mean()), (x,), backward)


# --- fused numerics ------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    x = _as_tensor(x)
    p = _softmax(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean / unit variance, then apply gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({width},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.grad_enabled:
            dxhat = g * gain.data
            gx = inv_std / width * (
                width * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        if gain.grad_enabled:
            ggain = (g * xhat).reshape(-1, width).sum(axis=0)
        if bias.grad_enabled:
            gbias = g.reshape(-1, width).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; output shape is ``ids.shape + (width,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        raise VocabError(f"token id {int(ids[bad].flat[0])} out of range for vocabulary of size {vocab}")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _make(table.data[ids], (table,), backward)


def cross_entropy_logits(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` has shape ``(..., V)`` and ``targets`` the leading shape.
    Positions whose target equals ``pad_id`` contribute neither loss nor gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    if ((tgt < 0) | (tgt >= vocab)).any():
        raise VocabError(f"target id out of range for vocabulary of size {vocab}")
    keep = tgt != pad_id
    count = int(keep.sum())
    if count == 0:
        raise DataError("degenerate batch: every target position is padding")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    nll = log_z - shifted[np.arange(tgt.size), tgt]
    loss = np.array((nll * keep).sum() / count)

    def backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(tgt.size), tgt] -= 1.0
        probs *= (keep / count)[:, None] * float(g)
        return (probs.reshape(logits.shape),)

    return _make(loss, (logits,), backward)


# --- reverse pass --------------------------------------------------------------

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
        for parent in node._parents:
            if parent.grad_enabled and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every grad-enabled leaf in its graph.

    Tensors with ``grad_enabled=False`` never get an entry.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[Tensor, np.ndarray] = {}
    if not loss.grad_enabled:
        return leaves
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.grad_enabled:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Largest ``|numeric - analytic| / max(1, |analytic|)`` over the coordinates of ``x``.

    ``f`` maps ``x`` (possibly via closures over other tensors) to a scalar loss.
    Numeric derivatives are central differences; ``x.data`` is restored afterwards.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    analytic = backward(f(x)).get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    worst = 0.0
    with no_grad():
        for idx in np.ndindex(*x.shape):
            orig = x.data[idx]
            x.data[idx] = orig + eps
            up = f(x).item()
            x.data[idx] = orig - eps
            down = f(x).item()
            x.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(numeric - analytic[idx]) / max(1.0, abs(analytic[idx])))
    return worst


def parameters_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Run :func:`finite_diff_check` over several tensors of one loss and return the worst error."""
    return max((finite_diff_check(lambda _x: loss_fn(), p, eps) for p in params), default=0.0)
