"""Reverse-mode automatic differentiation on dense float64 tensors.

The graph is dynamic: each operation records its parent tensors and a
backward closure on its output, and :func:`backward` replays the recording
in reverse topological order. Everything is double precision; the
convergence tolerances used elsewhere in the package (state distances
around 1e-4) are too tight for float32.

Numerical primitives: matmul, add, sub, mul, sigmoid, tanh, exp, log,
square, sqrt, maximum-with-constant, sum-reduce, max-reduce with argmax,
concatenate, slice (``Tensor.__getitem__``), Euclidean norm over the last
axis, softmax and stable log-softmax. ``reshape`` is a structural view
helper (no arithmetic). ``reciprocal`` is a composition, exp(-log(x)),
valid on strictly positive input.

Not thread safe: build and differentiate a graph on one thread.
Independent graphs on separate threads are fine.
"""

from __future__ import annotations

import contextlib
import json

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "constant",
    "custom",
    "backward",
    "zero_grads",
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "square",
    "sqrt",
    "maximum",
    "tsum",
    "tmax",
    "concat",
    "norm",
    "softmax",
    "log_softmax",
    "mean",
    "reciprocal",
    "relu",
    "reshape",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite is not."""


class GraphError(RuntimeError):
    """The recorded graph cannot be differentiated as requested."""


_grad_enabled = True


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array participating in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; all arithmetic goes through the module-level ops
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def constant(value):
    """Tensor that never requires a gradient."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom(data, parents, backward_fn):
    """Record an externally computed op (used by the fused sequence kernels).

    ``backward_fn(grad)`` must accumulate into the parents itself via
    :func:`accumulate`.
    """
    return _node(data, parents, backward_fn)


def accumulate(tensor, grad):
    """Add ``grad`` into ``tensor.grad`` (allocating on first touch)."""
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _toposort(root):
    order = []
    seen = {id(root)}
    node, parents, i = root, root._parents, 0
    stack = []
    while True:
        while i < len(parents):
            p = parents[i]
            i += 1
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((node, i))
                node, parents, i = p, p._parents, 0
        order.append(node)
        if not stack:
            return order
        node, i = stack.pop()
        parents = node._parents


def backward(root, params=None):
    """Backpropagate from a scalar ``root`` through the recorded graph.

    Every reachable tensor with ``requires_grad`` accumulates its gradient
    in ``.grad``. When ``params`` is given, parameters the root does not
    depend on get an explicit zero gradient.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise GraphError("backward root does not depend on any differentiable tensor")
    root.grad = np.ones_like(root.data)
    for node in reversed(_toposort(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul needs (m,k)@(k,n), got {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward_fn)


def _elementwise_pair(a, b, fwd, da, db):
    a, b = constant(a), constant(b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as err:
        raise ShapeMismatch(f"shapes {a.data.shape} and {b.data.shape} do not broadcast") from err

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(da(g, a.data, b.data), a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(db(g, a.data, b.data), b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def add(a, b):
    return _elementwise_pair(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _elementwise_pair(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _elementwise_pair(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def _stable_sigmoid(x):
    # tanh form: overflow-free and uses the vectorised tanh kernel
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(x):
    x = constant(x)
    s = _stable_sigmoid(x.data)

    def backward_fn(g):
        accumulate(x, g * s * (1.0 - s))

    return _node(s, (x,), backward_fn)


def tanh(x):
    x = constant(x)
    t = np.tanh(x.data)

    def backward_fn(g):
        accumulate(x, g * (1.0 - t * t))

    return _node(t, (x,), backward_fn)


def exp(x):
    x = constant(x)
    e = np.exp(x.data)

    def backward_fn(g):
        accumulate(x, g * e)

    return _node(e, (x,), backward_fn)


def log(x):
    x = constant(x)

    def backward_fn(g):
        accumulate(x, g / x.data)

    return _node(np.log(x.data), (x,), backward_fn)


def square(x):
    x = constant(x)

    def backward_fn(g):
        accumulate(x, g * 2.0 * x.data)

    return _node(x.data * x.data, (x,), backward_fn)


def sqrt(x):
    x = constant(x)
    s = np.sqrt(x.data)

    def backward_fn(g):
        accumulate(x, g * 0.5 / s)

    return _node(s, (x,), backward_fn)


def maximum(x, threshold):
    """Elementwise max(x, c) for a constant c; subgradient 0 at x == c."""
    x = constant(x)
    c = float(threshold)
    mask = x.data > c

    def backward_fn(g):
        accumulate(x, g * mask)

    return _node(np.maximum(x.data, c), (x,), backward_fn)


def relu(x):
    return maximum(x, 0.0)


def tsum(x, axis=None, keepdims=False):
    """Sum-reduce over ``axis`` (all axes when None)."""
    x = constant(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            accumulate(x, np.broadcast_to(g, x.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.data.shape))

    return _node(out_data, (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    x = constant(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(x, axis=None):
    """Max-reduce; returns (max tensor, argmax indices).

    Ties route the gradient to the first maximal entry, matching
    ``np.argmax``.
    """
    x = constant(x)
    if axis is None:
        idx = int(np.argmax(x.data))
        out_data = x.data.reshape(-1)[idx]

        def backward_fn(g):
            buf = np.zeros_like(x.data)
            buf.reshape(-1)[idx] = g
            accumulate(x, buf)

        return _node(out_data, (x,), backward_fn), idx

    idx = np.argmax(x.data, axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward_fn(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        accumulate(x, buf)

    return _node(out_data, (x,), backward_fn), idx


def concat(tensors, axis=0):
    tensors = [constant(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            accumulate(t, piece)

    return _node(out_data, tuple(tensors), backward_fn)


def _slice(x, key):
    x = constant(x)
    out_data = x.data[key]

    def backward_fn(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, key, g)
        accumulate(x, buf)

    return _node(out_data, (x,), backward_fn)


def reshape(x, *shape):
    x = constant(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape

    def backward_fn(g):
        accumulate(x, g.reshape(old))

    return _node(x.data.reshape(shape), (x,), backward_fn)


def norm(x):
    """Euclidean norm over the last axis; gradient at the zero vector is 0."""
    x = constant(x)
    d = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def backward_fn(g):
        safe = np.where(d > 0.0, d, 1.0)
        accumulate(x, (g / safe)[..., None] * x.data)

    return _node(d, (x,), backward_fn)


def softmax(x, axis=-1):
    x = constant(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        accumulate(x, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _node(s, (x,), backward_fn)


def log_softmax(x, axis=-1):
    x = constant(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward_fn(g):
        accumulate(x, g - np.exp(ls) * np.sum(g, axis=axis, keepdims=True))

    return _node(ls, (x,), backward_fn)


def reciprocal(x):
    """1/x for strictly positive x, composed as exp(-log(x))."""
    return exp(mul(log(x), -1.0))


# ---------------------------------------------------------------------------
# verification


def gradient_check(f, params, step=1e-5, tol=None):
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must rebuild its graph on every call and return a scalar
    Tensor. The relative error per component is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    zero_grads(params)
    out = f(params)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("function value is not finite at the unperturbed point")
    backward(out, params=params)
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)

    max_rel = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                f_plus = float(f(params).data)
                flat[j] = orig - step
                f_minus = float(f(params).data)
                flat[j] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NonFiniteError(
                        f"non-finite value while perturbing parameter {pi}, component {j}"
                    )
                numeric[j] = (f_plus - f_minus) / (2.0 * step)
            a = analytic[pi].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
            rel = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
            max_rel = max(max_rel, rel)
    if tol is not None and max_rel > tol:
        raise NonFiniteError(f"gradient check failed: max relative error {max_rel:.3e} > {tol:.3e}")
    return max_rel


# ---------------------------------------------------------------------------
# parameter checkpoints (JSON name -> shape + row-major values; Python's
# shortest-repr float serialisation round-trips doubles bit-exactly)


def save_checkpoint(path, named_tensors):
    payload = {
        "format": "rnnwarmup-checkpoint",
        "version": 1,
        "tensors": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in named_tensors.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    """Load a checkpoint as a dict of name -> float64 ndarray."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "rnnwarmup-checkpoint":
        raise ValueError(f"{path} is not a parameter checkpoint")
    out = {}
    for name, entry in payload["tensors"].items():
        out[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return out
