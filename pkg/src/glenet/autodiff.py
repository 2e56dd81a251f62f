"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

The op set is exactly what the uncertainty estimator and the toy
probabilistic regressor need: matmul, bias add, elementwise nonlinearities,
concat, max-pooling over a point axis with argmax routing, Huber and
binary-cross-entropy losses, and reparameterized Gaussian sampling.

Graphs are built eagerly; ``backward`` walks the DAG in reverse topological
order exactly once and accumulates gradients, so shared subexpressions sum
rather than overwrite. Any op whose forward value contains NaN/Inf raises
``NumericFault`` immediately instead of letting the fault propagate.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, NumericFault, ShapeError

Array = np.ndarray


def _as_f64(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A dense float64 array plus the graph edges needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None
        self.op = "leaf"

    # -- construction -------------------------------------------------------

    @staticmethod
    def const(x) -> "Tensor":
        return Tensor(x, requires_grad=False)

    @staticmethod
    def param(x) -> "Tensor":
        return Tensor(x, requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the graph.

        Gradients accumulate into ``.grad`` of every tensor on a path from a
        ``requires_grad`` leaf to this node; constants keep ``grad = None``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # Later paths accumulate in place, so the slot must own
                    # its array.  A backward may pass the incoming gradient
                    # through (addition, broadcasting) or hand out views of
                    # it (split, reshape); anything else is freshly built and
                    # safe to adopt without a copy.
                    if g is node.grad or g.base is not None:
                        g = np.array(g)
                    parent.grad = g
                else:
                    parent.grad += g

    def zero_grad(self) -> None:
        self.grad = None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.const(x)


def _node(data: Array, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    # One-pass probe: any nan/inf in the block poisons the sum, and a float64
    # sum of genuinely finite activations cannot overflow.  The elementwise
    # scan only runs to build the error message.
    if not math.isfinite(float(data.sum())):
        if not np.all(np.isfinite(data)):
            raise NumericFault(f"non-finite values in forward op '{op}'")
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient back to ``shape`` after scalar/bias broadcasting."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # Bias case: shape (D,) broadcast over leading axes.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_addable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also covers (N, D) + (D,) bias addition."""
    _check_addable(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product (M, K) @ (K, N)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # Branch on sign to avoid overflow in exp.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    widths = [t.shape[axis] for t in ts]
    data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(ts), backward, "concat")


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient is routed to the (first) argmax."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gi = np.zeros_like(a.data)
        np.put_along_axis(gi, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gi,)

    return _node(out, (a,), backward, "reduce_max")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    return _node(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),),
        "sum",
    )


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), Tensor.const(1.0 / n))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: quadratic within ``delta``, linear outside."""
    if delta <= 0:
        raise DomainError("huber delta must be positive")
    absx = np.abs(x.data)
    quad = absx <= delta
    val = np.where(quad, 0.5 * x.data * x.data, delta * (absx - 0.5 * delta))
    dval = np.where(quad, x.data, delta * np.sign(x.data))
    return _node(val, (x,), lambda g: (g * dval,), "huber")


_BCE_EPS = 1e-12


def bce(p: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on probabilities in (0, 1).

    Inputs are clamped to [1e-12, 1 - 1e-12] before the logs; the gradient
    is zeroed where the clamp is active.
    """
    t = _as_f64(target if not isinstance(target, Tensor) else target.data)
    pc = np.clip(p.data, _BCE_EPS, 1.0 - _BCE_EPS)
    val = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    n = val.size
    active = (p.data > _BCE_EPS) & (p.data < 1.0 - _BCE_EPS)

    def backward(g):
        dp = (-t / pc + (1.0 - t) / (1.0 - pc)) * active / n
        return (g * dp,)

    return _node(np.asarray(val.mean()), (p,), backward, "bce")


def bce_logits(logit: Tensor, target) -> Tensor:
    """Mean binary cross-entropy straight from logits (numerically stable)."""
    t = _as_f64(target if not isinstance(target, Tensor) else target.data)
    x = logit.data
    val = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = val.size
    p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * (p - t) / n,)

    return _node(np.asarray(val.mean()), (logit,), backward, "bce_logits")


# ---------------------------------------------------------------------------
# Stochastic sampling
# ---------------------------------------------------------------------------


def sample_reparameterized(mu: Tensor, sigma: Tensor, rng: np.random.Generator) -> Tensor:
    """Draw ``mu + sigma * eps`` with ``eps ~ N(0, I)``.

    The noise is a constant of the graph, so gradients flow to ``mu``
    (identity) and ``sigma`` (scaled by the drawn noise).
    """
    if np.any(sigma.data < 0.0):
        raise DomainError("sigma must be elementwise non-negative")
    _check_addable(mu, sigma, "sample_reparameterized")
    eps = rng.standard_normal(np.broadcast_shapes(mu.shape, sigma.shape))
    data = mu.data + sigma.data * eps

    def backward(g):
        return (_unbroadcast(g, mu.shape), _unbroadcast(g * eps, sigma.shape))

    return _node(data, (mu, sigma), backward, "sample_reparameterized")
