"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Every operation here is polymorphic: given plain ndarrays it returns a plain
ndarray (fast inference path, no tape), and as soon as one operand is a
:class:`Tensor` the result is a Tensor carrying a backward closure.  The same
forward code therefore serves both gradient-tracked training and tape-free
evaluation, which keeps finite-difference auditing cheap.

The engine is deliberately small: only the primitives needed by the models in
this package are implemented.  All values are float64; gradients accumulate
by summation in a fixed topological order, so results are deterministic.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "value_of",
    "add",
    "sub",
    "mul",
    "neg",
    "absolute",
    "tanh",
    "matmul",
    "einsum2",
    "softmax",
    "sum_",
    "reshape",
    "transpose",
    "pad",
    "index",
    "take_rows",
    "stack_seq",
    "stack_last",
]


class Tensor:
    """A node in the reverse-mode tape.

    ``_parents`` holds the Tensor operands only; ``_backward`` maps the
    output gradient to one gradient per parent, in order.
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    # keep numpy from consuming Tensors in mixed expressions; Python then
    # falls back to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def backward(self):
        """Run reverse accumulation seeding this (scalar) node with grad 1."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # operator sugar; right-hand constants are fine
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
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __getitem__(self, idx):
        return index(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def value_of(x):
    """Unwrap a Tensor (or pass an array/scalar through) as float64 ndarray."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _is_tensor(a, b):
        return out
    parents = [x for x in (a, b) if isinstance(x, Tensor)]

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(g, bv.shape))
        return grads

    return Tensor(out, parents, backward)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _is_tensor(a, b):
        return out
    parents = [x for x in (a, b) if isinstance(x, Tensor)]

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(-g, bv.shape))
        return grads

    return Tensor(out, parents, backward)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _is_tensor(a, b):
        return out
    parents = [x for x in (a, b) if isinstance(x, Tensor)]

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(g * av, bv.shape))
        return grads

    return Tensor(out, parents, backward)


def neg(a):
    if not isinstance(a, Tensor):
        return -value_of(a)
    return Tensor(-a.value, [a], lambda g: [-g])


def absolute(a):
    """Elementwise |a| with sign subgradient (0 at the kink)."""
    av = value_of(a)
    out = np.abs(av)
    if not isinstance(a, Tensor):
        return out
    s = np.sign(av)
    return Tensor(out, [a], lambda g: [g * s])


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    if not isinstance(a, Tensor):
        return out
    return Tensor(out, [a], lambda g: [g * (1.0 - out * out)])


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not _is_tensor(a, b):
        return out
    parents = [x for x in (a, b) if isinstance(x, Tensor)]

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g @ _swap_last(bv), av.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(_swap_last(av) @ g, bv.shape))
        return grads

    return Tensor(out, parents, backward)


def einsum2(spec: str, a, b):
    """Two-operand einsum.

    Gradients use the standard index-swap rule, valid because every operand
    index used here also appears in the output or the other operand.
    """
    av, bv = value_of(a), value_of(b)
    out = np.einsum(spec, av, bv, optimize=True)
    if not _is_tensor(a, b):
        return out
    lhs, out_spec = spec.split("->")
    a_spec, b_spec = lhs.split(",")
    parents = [x for x in (a, b) if isinstance(x, Tensor)]

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, bv,
                                   optimize=True))
        if isinstance(b, Tensor):
            grads.append(np.einsum(f"{a_spec},{out_spec}->{b_spec}", av, g,
                                   optimize=True))
        return grads

    return Tensor(out, parents, backward)


def softmax(a, axis: int = -1):
    av = value_of(a)
    out = av - np.max(av, axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= np.sum(out, axis=axis, keepdims=True)
    if not isinstance(a, Tensor):
        return out

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return [(g - inner) * out]

    return Tensor(out, [a], backward)


def sum_(a, axis=None):
    av = value_of(a)
    out = np.sum(av, axis=axis)
    if not isinstance(a, Tensor):
        return out

    def backward(g):
        if axis is None:
            return [np.broadcast_to(g, av.shape).copy()]
        g_exp = np.expand_dims(g, axis)
        return [np.broadcast_to(g_exp, av.shape).copy()]

    return Tensor(out, [a], backward)


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if not isinstance(a, Tensor):
        return out
    return Tensor(out, [a], lambda g: [g.reshape(av.shape)])


def transpose(a, axes):
    av = value_of(a)
    out = np.transpose(av, axes)
    if not isinstance(a, Tensor):
        return out
    inverse = np.argsort(axes)
    return Tensor(out, [a], lambda g: [np.transpose(g, inverse)])


def pad(a, pad_width):
    av = value_of(a)
    out = np.pad(av, pad_width)
    if not isinstance(a, Tensor):
        return out
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, av.shape))
    return Tensor(out, [a], lambda g: [g[slices]])


def index(a, idx):
    """Basic slicing/integer indexing; backward scatters into zeros."""
    av = value_of(a)
    out = av[idx]
    if not isinstance(a, Tensor):
        return out

    def backward(g):
        full = np.zeros_like(av)
        full[idx] = g
        return [full]

    return Tensor(out, [a], backward)


def take_rows(table, idx):
    """Embedding lookup ``table[idx]`` with duplicate-safe scatter-add."""
    idx = np.asarray(idx)
    tv = value_of(table)
    out = tv[idx]
    if not isinstance(table, Tensor):
        return out

    def backward(g):
        full = np.zeros_like(tv)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return [full]

    return Tensor(out, [table], backward)


def stack_seq(items, axis: int = 1):
    """Stack a list of same-shape grids along a new axis (default time)."""
    vals = [value_of(x) for x in items]
    out = np.stack(vals, axis=axis)
    if not _is_tensor(*items):
        return out
    parents = [x for x in items if isinstance(x, Tensor)]
    tensor_slots = [i for i, x in enumerate(items) if isinstance(x, Tensor)]

    def backward(g):
        return [np.take(g, i, axis=axis) for i in tensor_slots]

    return Tensor(out, parents, backward)


def stack_last(a, b):
    """Stack two same-shape grids along a new trailing axis."""
    av, bv = value_of(a), value_of(b)
    out = np.stack([av, bv], axis=-1)
    if not _is_tensor(a, b):
        return out
    parents = [x for x in (a, b) if isinstance(x, Tensor)]

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(g[..., 0])
        if isinstance(b, Tensor):
            grads.append(g[..., 1])
        return grads

    return Tensor(out, parents, backward)
