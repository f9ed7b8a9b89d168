"""A small reverse-mode differentiation engine over float64 numpy arrays.

Each :class:`Tensor` produced by a primitive keeps references to its
parents and a vector-Jacobian closure. :class:`GradTape` linearises the
graph reachable from a scalar loss and replays it backwards. There is no
global state, so independent graphs can be built on separate threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from channelkan.errors import DimensionError
from channelkan.numerics import kernels


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (2.0 * a.data * g,)

    return _node(a.data * a.data, (a,), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), vjp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _node(y, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    y, dy = kernels.gelu_forward(a.data)

    def vjp(g):
        return (g * dy,)

    return _node(y, (a,), vjp)


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"gelu": gelu, "tanh": tanh, "identity": identity}


# -- shape -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def vjp(g):
        return (g.reshape(src),)

    return _node(a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def tsum(a: Tensor, axis=None) -> Tensor:
    src = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a: Tensor) -> Tensor:
    return mul(tsum(a), 1.0 / a.size)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., n) and b of shape (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} incompatible")

    def vjp(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp)


# -- model-specific primitives -----------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 1-D convolution, channels last.

    x (N, W, Cin), w (Cout, Cin, k), b (Cout,) -> (N, W, Cout).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or w.shape[2] % 2 == 0:
        raise DimensionError(f"conv1d shapes x{x.shape} w{w.shape} incompatible")

    def vjp(g):
        gx, gw, gb = kernels.conv1d_backward(x.data, w.data, g)
        return gx, gw, gb

    return _node(kernels.conv1d_forward(x.data, w.data, b.data), (x, w, b), vjp)


def chebyshev_map(xh: Tensor, coef: Tensor) -> Tensor:
    """``sum_m coef[m] * T_m(xh)`` elementwise.

    ``xh`` has shape (B, *S) and ``coef`` has shape (M + 1, *S); the
    coefficients are shared across the leading batch axis.
    """
    feat = coef.shape[1:]
    if xh.shape[1:] != feat:
        raise DimensionError(f"chebyshev_map shapes {xh.shape} and {coef.shape} incompatible")
    batch = xh.shape[0]
    n = int(np.prod(feat))
    x2 = xh.data.reshape(batch, n)
    c2 = coef.data.reshape(coef.shape[0], n)

    def vjp(g):
        gx, gc = kernels.chebyshev_backward(x2, c2, g.reshape(batch, n))
        return gx.reshape(xh.shape), gc.reshape(coef.shape)

    y = kernels.chebyshev_forward(x2, c2).reshape(xh.shape)
    return _node(y, (xh, coef), vjp)


def linear_filter(x: Tensor, apply: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a fixed self-adjoint linear map; its VJP is the map itself."""

    def vjp(g):
        return (apply(g),)

    return _node(apply(x.data), (x,), vjp)


# -- reverse pass ------------------------------------------------------------


class GradTape:
    """Reverse-topological record of the graph feeding a scalar output."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._linearize(output)

    @staticmethod
    def _linearize(output: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                stack.append((parent, False))
        order.reverse()
        return order

    def replay(self) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        for node in self.nodes:
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
        return grads


def backward(loss: Tensor, params: Iterable[Tensor] | Mapping[str, Tensor]):
    """Gradients of scalar ``loss`` w.r.t. ``params``.

    Tracked parameters the loss does not depend on get zeros; parameters
    created with ``requires_grad=False`` get ``None``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradTape(loss).replay() if loss.requires_grad else {}

    def one(p: Tensor):
        if not p.requires_grad:
            return None
        g = grads.get(id(p))
        return np.zeros_like(p.data) if g is None else g.reshape(p.shape)

    if isinstance(params, Mapping):
        return {k: one(p) for k, p in params.items()}
    return [one(p) for p in params]
