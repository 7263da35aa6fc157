"""Dense float64 tensors with reverse-mode differentiation.

The op set is deliberately closed: matrix products, pointwise arithmetic
and activations, softmax, reductions, data movement, row normalization,
and inverted dropout -- exactly what the forecaster needs. Every op whose
inputs require gradients records its parents and a local gradient rule;
the creation-ordered op records form the computation tape, and
``backward`` replays the reachable part of that tape in reverse creation
order, accumulating gradients on every leaf that asked for them. With
fixed inputs the replay order is fixed, so forward values and gradients
are bitwise reproducible.

Tensors are immutable after construction except for gradient accumulation
(and the optimizer, which owns its parameters exclusively). Independent
graphs never share state, so separate workers may each run their own tape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

Array = np.ndarray

_ids = itertools.count()

# A gradient rule maps the output gradient to (parent, contribution) pairs.
BackwardRule = Callable[[Array], Iterable[tuple["Tensor", Array]]]


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    Leaf tensors created with ``requires_grad=True`` carry a
    zero-initialised ``grad`` buffer, so a leaf untouched by ``backward``
    reads as zero gradient. Gradients accumulate across backward calls
    until explicitly reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardRule | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    # operator sugar; every overload routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: Array, parents: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Wrap an op result, recording parents only when gradients can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    out._parents = tuple(parents) if needs else ()
    out._backward = rule if needs else None
    out._id = next(_ids)
    return out


def _broadcast_check(a_shape: tuple, b_shape: tuple) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"incompatible broadcast: {a_shape} vs {b_shape}") from None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    data = a.data + b.data

    def rule(g: Array):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _result(data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    data = a.data - b.data

    def rule(g: Array):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _result(data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape)
    data = a.data * b.data

    def rule(g: Array):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return _result(data, (a, b), rule)


# elementwise product under its conventional name
hadamard = mul


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def rule(g: Array):
        return [(x, g * (x.data > 0.0))]

    return _result(data, (x,), rule)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g: Array):
        return [(x, g * out * (1.0 - out))]

    return _result(out, (x,), rule)


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at 0 (matching the relu convention)."""
    x = _as_tensor(x)
    data = np.abs(x.data)

    def rule(g: Array):
        return [(x, g * np.sign(x.data))]

    return _result(data, (x,), rule)


def smooth_l1(x) -> Tensor:
    """Pointwise smoothed-L1 with threshold 1: 0.5x^2 for |x|<1 else |x|-0.5."""
    x = _as_tensor(x)
    small = np.abs(x.data) < 1.0
    data = np.where(small, 0.5 * x.data * x.data, np.abs(x.data) - 0.5)

    def rule(g: Array):
        return [(x, g * np.where(small, x.data, np.sign(x.data)))]

    return _result(data, (x,), rule)


def softmax(x) -> Tensor:
    """Stable softmax of a 1-D tensor (max subtraction before exp)."""
    x = _as_tensor(x)
    if x.ndim != 1:
        raise ShapeError(f"softmax expects a 1-D tensor, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericalError("softmax input contains NaN")
    z = x.data - x.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def rule(g: Array):
        return [(x, s * (g - np.dot(g, s)))]

    return _result(s, (x,), rule)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes.

    Both operands must be at least 2-D; ``dA = dC @ B^T`` and
    ``dB = A^T @ dC`` with broadcast axes summed back out.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_check(a.shape[:-2], b.shape[:-2])
    data = np.matmul(a.data, b.data)

    def rule(g: Array):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _result(data, (a, b), rule)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


def _expand_reduced(g: Array, shape: tuple[int, ...], axes: tuple[int, ...]) -> Array:
    keep = list(shape)
    for ax in axes:
        keep[ax] = 1
    return np.broadcast_to(g.reshape(keep), shape)


def reduce_sum(x, axes=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _normalize_axes(axes, x.ndim)
    data = x.data.sum(axis=ax, keepdims=keepdims)

    def rule(g: Array):
        gg = g if keepdims else g.reshape([1 if i in ax else n for i, n in enumerate(x.shape)])
        return [(x, np.broadcast_to(gg, x.shape).copy())]

    return _result(data, (x,), rule)


def reduce_mean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _normalize_axes(axes, x.ndim)
    count = 1
    for a in ax:
        count *= x.shape[a]
    data = x.data.mean(axis=ax, keepdims=keepdims)

    def rule(g: Array):
        gg = g if keepdims else g.reshape([1 if i in ax else n for i, n in enumerate(x.shape)])
        return [(x, np.broadcast_to(gg / count, x.shape).copy())]

    return _result(data, (x,), rule)


# ---------------------------------------------------------------------------
# data movement


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} (size {x.size}) to {shape}")
    data = x.data.reshape(shape)

    def rule(g: Array):
        return [(x, g.reshape(x.shape))]

    return _result(data, (x,), rule)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(int(a) for a in axes)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"invalid transpose axes {perm} for shape {x.shape}")
    data = x.data.transpose(perm)
    inverse = tuple(np.argsort(perm))

    def rule(g: Array):
        return [(x, g.transpose(inverse))]

    return _result(data, (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ndim = ts[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat axis {axis} out of range for ndim {ndim}")
    axis = axis % ndim
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != ndim or other[:axis] + other[axis + 1 :] != base[:axis] + base[axis + 1 :]:
            raise ShapeError(f"concat shapes differ off-axis: {ts[0].shape} vs {t.shape}")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g: Array):
        pieces = np.split(g, offsets, axis=axis)
        return list(zip(ts, pieces))

    return _result(data, ts, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack identically shaped tensors along a new axis (leading by default)."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack needs at least one tensor")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack operands must share a shape: {shape} vs {t.shape}")
    if not -(len(shape) + 1) <= axis <= len(shape):
        raise ShapeError(f"stack axis {axis} out of range")
    data = np.stack([t.data for t in ts], axis=axis)
    pos = axis % (len(shape) + 1)

    def rule(g: Array):
        return [(t, np.take(g, i, axis=pos)) for i, t in enumerate(ts)]

    return _result(data, ts, rule)


def normalize_rows(x) -> Tensor:
    """Divide each row of a 2-D tensor by its sum; all-zero rows stay zero.

    For positive-sum rows the gradient is (g_il - sum_j g_ij out_ij) / r_i;
    zero rows propagate nothing.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got shape {x.shape}")
    rs = x.data.sum(axis=1, keepdims=True)
    live = rs > 0.0
    safe = np.where(live, rs, 1.0)
    out = np.where(live, x.data / safe, 0.0)

    def rule(g: Array):
        rowdot = (g * out).sum(axis=1, keepdims=True)
        return [(x, np.where(live, (g - rowdot) / safe, 0.0))]

    return _result(out, (x,), rule)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    data = x.data * mask

    def rule(g: Array):
        return [(x, g * mask)]

    return _result(data, (x,), rule)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The reachable records are ordered by creation id (the tape order) and
    replayed in reverse, so repeated runs on identical inputs accumulate in
    an identical order and reproduce gradients bitwise.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[Tensor] = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad:
                stack_.append(p)
    nodes.sort(key=lambda t: t._id)

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            # leaf: accumulate into its buffer
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        for parent, contribution in t._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
