"""Dense 2D tensors with a small reverse-mode autodiff engine.

Only what the location encoders need is supported: matrix products,
row-broadcast bias addition, elementwise ReLU / sigmoid / dropout, column
concatenation and reductions to a scalar. Every tensor is a 2D float array;
scalars are 1x1 tensors.

Example::

    >>> w = Tensor(np.ones((2, 1)), requires_grad=True)
    >>> x = Tensor([[1.0, 2.0]])
    >>> loss = sum_all(matmul(x, w))
    >>> backward(loss)
    >>> w.grad.ravel().tolist()
    [1.0, 2.0]
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

DTYPE = np.float64

# Largest float64 strictly below 1 and the smallest positive normal; sigmoid
# outputs are clipped into this range so log(p) and log(1 - p) stay finite.
_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A 2D array plus an optional gradient buffer.

    Tensors produced by an operation remember their parents and a closure that
    pushes the output gradient back to them. Leaves created with
    ``requires_grad=True`` are trainable parameters.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.asarray(values, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2D, got shape {arr.shape}")
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self):
        return self.values

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(values, parents, backward_fn):
    """Create the output of a custom operation.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent, in order. Nothing is recorded when no parent needs a gradient.
    """
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return from_op(av @ bv, (a, b), back)


def add(a, b):
    """Elementwise sum; ``b`` may also be a 1 x cols row broadcast over rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return from_op(a.values + b.values, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return from_op(a.values + b.values, (a, b),
                       lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as in_features x out_features."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def scale(x, c):
    c = float(c)
    return from_op(x.values * c, (x,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    return from_op(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    v = x.values
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    np.clip(out, _SIG_LO, _SIG_HI, out=out)
    return from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def dropout(x, p, training, rng):
    """Inverted dropout: survivors are scaled by 1/(1-p) during training."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return from_op(x.values * keep, (x,), lambda g: (g * keep,))


def concat_cols(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    p = a.cols
    return from_op(np.concatenate([a.values, b.values], axis=1), (a, b),
                   lambda g: (g[:, :p], g[:, p:]))


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return from_op(np.array([[x.values.sum()]]), (x,),
                   lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x):
    x = as_tensor(x)
    n = x.values.size
    return scale(sum_all(x), 1.0 / n)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Each recorded operation is replayed exactly once, in reverse execution
    order. Gradients add up across multiple uses of the same tensor.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
