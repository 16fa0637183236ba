"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is sized for attention-style adapters over frozen embeddings:
matmul and elementwise arithmetic, shape surgery (reshape / transpose /
concatenate / split / broadcast), softmax, GELU, ReLU, L2 normalization
and cross-entropy. Everything is double precision so analytic gradients
can be checked against central finite differences at tight tolerances.

Gradients accumulate additively when a tensor feeds several downstream
ops; broadcasting a single text-embedding tensor across a batch relies
on this. A graph is meant to be backpropagated once and discarded.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    DegenerateMaskError,
    LabelError,
    NormalizationError,
    RankError,
    ShapeError,
)

# Additive-mask sentinel. A true -inf produces NaN in (-inf) - (-inf)
# paths during the softmax max-subtraction, so masked positions use a
# finite sentinel large enough that exp() underflows to exactly 0.0.
MASK_NEG_INF = -1e30
_DEGENERATE_CUTOFF = -1e29

_NORM_EPS = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Node:
    """Backpropagation record: input tensors plus the local backward rule."""

    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node = node
        self.requires_grad = requires_grad

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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    # arithmetic sugar; constants become non-trainable tensors
    def __add__(self, other):
        return add(self, ensure_tensor(other))

    def __radd__(self, other):
        return add(ensure_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(ensure_tensor(other)))

    def __rsub__(self, other):
        return add(ensure_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, ensure_tensor(other))

    def __rmul__(self, other):
        return mul(ensure_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, ensure_tensor(other))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Parameter:
    """Trainable tensor with a path-like name (e.g. "mma.down.weight")."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(inputs: Sequence[Tensor]) -> bool:
    return any(t.requires_grad or t.node is not None for t in inputs)


def _from_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _tracked(inputs):
        return Tensor(data, node=Node(tuple(inputs), backward_fn))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    a = ensure_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = ensure_tensor(a)
    s = float(s)
    return _from_op(a.data * s, (a,), lambda g: (g * s,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a float exponent (inputs must stay in domain)."""
    a = ensure_tensor(a)
    p = float(p)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _from_op(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _from_op(out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape surgery


def reshape(a: Tensor, shape) -> Tensor:
    a = ensure_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = ensure_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inverse = tuple(int(x) for x in np.argsort(axes))
    return _from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = ensure_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    return _from_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [ensure_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concatenate: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
        )
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _from_op(out, tuple(ts), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = ensure_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}, {start + length}) out of range for axis {axis} of {a.shape}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim)
    )

    def backward(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _from_op(a.data[index].copy(), (a,), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along an axis into consecutive chunks of the given sizes."""
    a = ensure_tensor(a)
    if sum(sizes) != a.shape[axis % a.ndim]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    pieces, start = [], 0
    for s in sizes:
        pieces.append(narrow(a, axis, start, s))
        start += s
    return pieces


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _from_op(out, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size / out.size

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _from_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; sentinel-masked entries come out exactly 0.

    A slice whose every entry is masked has no distribution to form, so
    it raises ``DegenerateMaskError`` rather than returning NaNs.
    """
    a = ensure_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    if np.any(m <= _DEGENERATE_CUTOFF):
        raise DegenerateMaskError(f"softmax: fully masked slice along axis {axis}")
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _from_op(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU, x * Phi(x)."""
    a = ensure_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return _from_op(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = ensure_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, 0.0), (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Rescale slices along ``axis`` to unit L2 norm."""
    a = ensure_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norms <= _NORM_EPS):
        raise NormalizationError(
            f"l2_normalize: slice norm {norms.min():.3e} along axis {axis} is below {_NORM_EPS:g}"
        )
    out = a.data / norms

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * inner) / norms,)

    return _from_op(out, (a,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax-probability of the true class.

    ``logits`` is (N, K); ``labels`` holds N class indices in [0, K).
    """
    logits = ensure_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"cross_entropy: labels must lie in [0, {k})")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    out = np.asarray((lse - z[np.arange(n), labels]).mean())

    def backward(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _from_op(out, (logits,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine map."""
    mu = reduce_mean(a, axis=-1, keepdims=True)
    centered = add(a, neg(mu))
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = power(add(var, Tensor(eps)), -0.5)
    return add(mul(mul(centered, inv_std), gamma), beta)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if tensor.node is None or id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        for parent in tensor.node.inputs:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from a scalar loss.

    Each graph node's backward rule runs exactly once, in reverse
    topological order; repeated uses of a tensor sum their gradients.
    """
    loss = ensure_tensor(loss)
    if loss.data.shape != ():
        raise RankError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for tensor in reversed(_topological_order(loss)):
        grads = tensor.node.backward_fn(tensor.grad)
        for parent, g in zip(tensor.node.inputs, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
