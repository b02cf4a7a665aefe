"""Minimal tape-based reverse-mode automatic differentiation over numpy.

Every operation builds a node holding its parents and a closure that maps
the output gradient to parent-gradient contributions.  ``backward`` on a
scalar walks the recorded graph once in reverse topological order.  Shapes
follow numpy broadcasting; gradients are summed back down to each parent's
shape.  This is enough machinery for attention blocks, layer norm, GELU
feed-forwards, and sigmoid cross-entropy heads at desk scale.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf, expit as _expit


class GraphNotRecorded(RuntimeError):
    """backward was requested where no computation graph is attached."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # Keep numpy from absorbing mixed expressions like ndarray * Tensor;
    # with ufunc dispatch refused, Python falls back to our reflected ops.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise GraphNotRecorded("backward needs a scalar loss")
        if self._vjp is None and not self.requires_grad:
            raise GraphNotRecorded("no computation graph recorded on this tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for parent in node._parents:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                node.grad = grad if node.grad is None else node.grad + grad
            if node._vjp is None:
                continue
            for parent, contribution in zip(node._parents, node._vjp(grad)):
                if contribution is None:
                    continue
                key = id(parent)
                grads[key] = contribution if key not in grads \
                    else grads[key] + contribution

    # -- primitive operations ----------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        a_shape, b_shape = self.data.shape, other.data.shape
        return Tensor(out_data, _parents=(self, other),
                      _vjp=lambda g: (_unbroadcast(g, a_shape),
                                      _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _vjp=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data * b.data, _parents=(a, b),
                      _vjp=lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                      _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data / b.data, _parents=(a, b),
                      _vjp=lambda g: (
                          _unbroadcast(g / b.data, a.data.shape),
                          _unbroadcast(-g * a.data / b.data**2, b.data.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def vjp(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return (_unbroadcast(ga, a.data.shape),
                    _unbroadcast(gb, b.data.shape))

        return Tensor(a.data @ b.data, _parents=(a, b), _vjp=vjp)

    def __pow__(self, exponent: float):
        a = self
        return Tensor(a.data**exponent, _parents=(a,),
                      _vjp=lambda g: (g * exponent * a.data**(exponent - 1),))

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(out_data, _parents=(self,), _vjp=lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor(np.log(a.data), _parents=(a,),
                      _vjp=lambda g: (g / a.data,))

    def erf(self):
        a = self
        return Tensor(_erf(a.data), _parents=(a,),
                      _vjp=lambda g: (
                          g * (2.0 / np.sqrt(np.pi)) * np.exp(-a.data**2),))

    def sigmoid(self):
        out_data = _expit(self.data)
        return Tensor(out_data, _parents=(self,),
                      _vjp=lambda g: (g * out_data * (1.0 - out_data),))

    def clamp(self, low: float, high: float):
        """Hard clip; gradient passes only through the interior."""
        a = self
        inside = (a.data >= low) & (a.data <= high)
        return Tensor(np.clip(a.data, low, high), _parents=(a,),
                      _vjp=lambda g: (g * inside,))

    def sum(self, axis=None, keepdims=False):
        a = self

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, a.data.shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                      _parents=(a,), _vjp=vjp)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def swapaxes(self, a: int, b: int):
        src = self
        return Tensor(np.swapaxes(src.data, a, b), _parents=(src,),
                      _vjp=lambda g: (np.swapaxes(g, a, b),))

    def reshape(self, *shape):
        src = self
        old = src.data.shape
        return Tensor(src.data.reshape(*shape), _parents=(src,),
                      _vjp=lambda g: (g.reshape(old),))

    def softmax(self, axis=-1):
        """Numerically stable softmax along one axis."""
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        out_data = exp / exp.sum(axis=axis, keepdims=True)

        def vjp(g):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            return ((g - inner) * out_data,)

        return Tensor(out_data, _parents=(self,), _vjp=vjp)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=float), requires_grad=True)


def concatenate(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _vjp=vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf form: 0.5 x (1 + erf(x / sqrt(2)))."""
    return x * ((x * (1.0 / np.sqrt(2.0))).erf() + 1.0) * 0.5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing feature axis, then apply affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + eps) ** -0.5) * gain + bias
