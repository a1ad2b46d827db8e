"""Small reverse-mode automatic differentiation over dense numpy arrays.

Only the operations this project's networks need: broadcast arithmetic,
matmul, relu, fused softmax/layer-norm, gathers for embeddings and token
reordering, reductions, and an action-selection helper. Backward functions
are closures captured per node; ``backward`` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def parameter(array) -> Tensor:
    return Tensor(array, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, grad) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _unbroadcast(grad, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data, parents) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(p for p in parents if p.requires_grad) if out.requires_grad else ()
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data + b.data, (a, b))

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data - b.data, (a, b))

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(-grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data * b.data, (a, b))

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    out._backward = backward
    return out


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    out = _node(a.data * factor, (a,))

    def backward(grad):
        _accumulate(a, grad * factor)

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data @ b.data, (a, b))

    def backward(grad):
        if a.requires_grad:
            ga = grad @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ grad
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    out._backward = backward
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.maximum(a.data, 0.0), (a,))

    def backward(grad):
        _accumulate(a, grad * (a.data > 0))

    out._backward = backward
    return out


def softmax(a) -> Tensor:
    """Numerically stable softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=-1, keepdims=True)
    out = _node(y, (a,))

    def backward(grad):
        inner = (grad * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (grad - inner))

    out._backward = backward
    return out


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis, then apply elementwise gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _node(xhat * gain.data + bias.data, (a, gain, bias))

    def backward(grad):
        d = a.data.shape[-1]
        gy = grad * gain.data
        gx = (
            inv / d * (d * gy - gy.sum(axis=-1, keepdims=True) - xhat * (gy * xhat).sum(axis=-1, keepdims=True))
        )
        _accumulate(a, gx)
        reduce_axes = tuple(range(grad.ndim - 1))
        _accumulate(gain, (grad * xhat).sum(axis=reduce_axes))
        _accumulate(bias, grad.sum(axis=reduce_axes))

    out._backward = backward
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = _node(a.data.reshape(shape), (a,))

    def backward(grad):
        _accumulate(a, grad.reshape(old))

    out._backward = backward
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.transpose(a.data, axes), (a,))
    inverse = np.argsort(axes)

    def backward(grad):
        _accumulate(a, np.transpose(grad, inverse))

    out._backward = backward
    return out


def gather_rows(table, idx) -> Tensor:
    """Embedding lookup: rows of ``table`` (V, d) at integer ``idx`` (...)."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    out = _node(table.data[idx], (table,))

    def backward(grad):
        g = np.zeros_like(table.data)
        np.add.at(g, idx.ravel(), grad.reshape(-1, table.data.shape[-1]))
        _accumulate(table, g)

    out._backward = backward
    return out


def gather_tokens(a, order) -> Tensor:
    """Reorder axis 1 of a (B, N, d) tensor by an index vector."""
    a = _as_tensor(a)
    order = np.asarray(order)
    out = _node(a.data[:, order, :], (a,))

    def backward(grad):
        g = np.zeros_like(a.data)
        np.add.at(g, (slice(None), order), grad)
        _accumulate(a, g)

    out._backward = backward
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad):
        for t, piece in zip(tensors, np.split(grad, splits, axis=axis)):
            _accumulate(t, piece)

    out._backward = backward
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _node(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(grad):
        g = np.asarray(grad)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / count)

    out._backward = backward
    return out


def total(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(a.data.sum(), (a,))

    def backward(grad):
        _accumulate(a, np.broadcast_to(grad, a.data.shape).copy())

    out._backward = backward
    return out


def select_actions(q, idx) -> Tensor:
    """Pick one entry per row: q (B, A), idx (B,) -> (B,)."""
    q = _as_tensor(q)
    idx = np.asarray(idx)
    rows = np.arange(q.data.shape[0])
    out = _node(q.data[rows, idx], (q,))

    def backward(grad):
        g = np.zeros_like(q.data)
        g[rows, idx] = grad
        _accumulate(q, g)

    out._backward = backward
    return out
