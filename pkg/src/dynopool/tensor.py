"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward rule on the output
tensor. ``Tensor.backward`` walks the graph in reverse topological order,
visiting each node once and summing gradients where a tensor feeds more
than one consumer.

Data is float32 unless a float64 array is passed in explicitly; results
follow numpy's promotion rules. The finite-difference oracles run the same
graphs in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data
    if isinstance(data, np.floating):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "",
    ):
        arr = _as_array(data, dtype)
        if arr.size == 0:
            raise ShapeError("tensors must have every dimension >= 1")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = _op

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no graph edge."""
        return Tensor(self.data)

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without a seed gradient needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = _topological_order(self)
        for node in order:
            if not node.is_leaf:
                node.grad = None
        self._accumulate(seed)

        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent._accumulate(unbroadcast(np.asarray(g), parent.shape))

    def _accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # ------------------------------------------------------------- arithmetic
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        if isinstance(other, np.ndarray):
            return Tensor(other)
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other) -> "Tensor":
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, -self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return add(self._lift(other), -self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return mul(self, self._lift(other).reciprocal())

    def __rtruediv__(self, other) -> "Tensor":
        return mul(self._lift(other), self.reciprocal())

    def __neg__(self) -> "Tensor":
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        x = self.data

        def backward(g):
            return (g * exponent * x ** (exponent - 1),)

        return _make(x**exponent, (self,), backward, f"pow{exponent}")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, self._lift(other))

    def reciprocal(self) -> "Tensor":
        x = self.data
        out = 1 / x

        def backward(g):
            return (g * (-1 / (x * x)),)

        return _make(out, (self,), backward, "reciprocal")

    def clamp_min(self, floor: float) -> "Tensor":
        """max(x, floor); gradient passes only where x > floor."""
        x = self.data
        mask = x > floor
        out = np.where(mask, x, np.asarray(floor, dtype=x.dtype))
        return _make(out, (self,), lambda g: (g * mask,), "clamp_min")

    def relu(self) -> "Tensor":
        return relu(self)

    # ------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---------------------------------------------------------------- reshape
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    def take(self, indices: np.ndarray) -> "Tensor":
        """Gather along the first axis with an integer index array."""
        idx = np.asarray(indices, dtype=np.intp)
        shape = self.shape

        def backward(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), backward, "take")


def _make(data: np.ndarray, parents: tuple, backward: BackwardFn, op: str) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# --------------------------------------------------------------------- binary
def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    x, y = a.data, b.data
    return _make(out, (a, b), lambda g: (g * y, g * x), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    items = list(tensors)
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in items], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _make(out, tuple(items), backward, "stack")


# ---------------------------------------------------------------------- unary
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN so a diverged run is caught downstream
    return _make(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_ste(x: Tensor) -> Tensor:
    """Round in the forward pass, identity gradient in the backward pass.

    Equivalent to ``round(x) + x - sg(x)`` but the forward value is the
    rounded number exactly, without the float cancellation of the sum.
    Ties round away from zero.
    """
    return _make(round_half_away(x.data).astype(x.dtype), (x,), lambda g: (g,), "round_ste")


def max_over_axis(x: Tensor, axis: int = -1) -> Tensor:
    """Max reduction; the gradient goes to the first arg-max only."""
    axis = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), backward, "max")


def softmax_cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, K], got {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    batch, classes = logits.shape
    if y.shape != (batch,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {batch}")
    if y.min() < 0 or y.max() >= classes:
        raise ShapeError("labels out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(batch)
    loss = -logp[rows, y].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1
        return (p * (g / batch),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "xent")
