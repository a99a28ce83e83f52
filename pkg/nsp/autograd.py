"""
Autograd
Reverse-mode automatic differentiation over float64 numpy arrays
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import NonScalarOutputError, ShapeMismatchError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread"""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _is_basic_index(index) -> bool:
    """Ints, slices and Ellipsis never select an element twice"""
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(part, (int, np.integer, slice, type(Ellipsis))) for part in parts)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node of the computation graph.

    `data` is a float64 array (0-, 1- or 2-D); `grad` has the same shape once
    backward has reached the node.
    """

    # numpy defers binary operators to Tensor
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""

    # -- graph construction -------------------------------------------------

    @classmethod
    def _make(cls, data, parents: Tuple["Tensor", ...], backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(data={self.data}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g)
            other._accumulate(g)

        return Tensor._make(self.data + other.data, (self, other), backward, "+")

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self + other

    def __neg__(self) -> "Tensor":
        def backward(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward, "neg")

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g)
            other._accumulate(-g)

        return Tensor._make(self.data - other.data, (self, other), backward, "-")

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        return Tensor._make(self.data * other.data, (self, other), backward, "*")

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self * other

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data * other.data))

        return Tensor._make(self.data / other.data, (self, other), backward, "/")

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(self.data ** exponent, (self,), backward, f"**{exponent}")

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        def backward(g):
            full = np.zeros_like(self.data)
            if _is_basic_index(index):
                full[index] += g
            else:
                np.add.at(full, index, g)
            self._accumulate(full)

        return Tensor._make(self.data[index], (self,), backward, "index")

    # -- reductions and elementwise functions --------------------------------

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), self.data.shape))

        return Tensor._make(self.data.sum(axis=axis), (self,), backward, "sum")

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / float(count)

    def exp(self) -> "Tensor":
        value = np.exp(self.data)

        def backward(g):
            self._accumulate(g * value)

        return Tensor._make(value, (self,), backward, "exp")

    def log(self) -> "Tensor":
        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._make(np.log(self.data), (self,), backward, "log")

    def sqrt(self) -> "Tensor":
        value = np.sqrt(self.data)

        def backward(g):
            self._accumulate(g * 0.5 / value)

        return Tensor._make(value, (self,), backward, "sqrt")

    def tanh(self) -> "Tensor":
        value = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - value * value))

        return Tensor._make(value, (self,), backward, "tanh")

    def sigmoid(self) -> "Tensor":
        # tanh form stays finite for large |x|
        value = 0.5 * (1.0 + np.tanh(0.5 * self.data))

        def backward(g):
            self._accumulate(g * value * (1.0 - value))

        return Tensor._make(value, (self,), backward, "sigmoid")

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._make(self.data * mask, (self,), backward, "relu")

    def norm(self) -> "Tensor":
        """Euclidean norm of a vector"""
        return (self * self).sum().sqrt()

    # -- reverse pass ---------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        if a.data.ndim == 1 and b.data.ndim == 1:
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)
        elif a.data.ndim == 1:
            a._accumulate(b.data @ g)
            b._accumulate(np.outer(a.data, g))
        elif b.data.ndim == 1:
            a._accumulate(np.outer(g, b.data))
            b._accumulate(a.data.T @ g)
        else:
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: ArrayLike, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for a vector or a batch of row vectors"""
    x = as_tensor(x)
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ShapeMismatchError(f"input {x.shape} does not match weight {weight.shape}")

    def backward(g):
        if x.data.ndim == 1:
            weight._accumulate(np.outer(g, x.data))
            bias._accumulate(g)
        else:
            weight._accumulate(g.T @ x.data)
            bias._accumulate(g.sum(axis=0))
        x._accumulate(g @ weight.data)

    return Tensor._make(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "linear")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            part._accumulate(piece)

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, part in enumerate(parts):
            part._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(np.stack([p.data for p in parts], axis=axis), tuple(parts), backward, "stack")


def _topological_order(root: Tensor) -> List[Tensor]:
    # Iterative post-order DFS; rollout graphs are deeper than the recursion limit
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """
    Populate `.grad` on every tensor reachable from a scalar output

    Args:
        output: Scalar tensor (size 1)
    """
    if output.data.size != 1:
        raise NonScalarOutputError(f"backward needs a scalar output, got shape {output.shape}")
    order = _topological_order(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, floor: float = 1e-5
) -> float:
    """
    Compare analytic gradients with central finite differences

    Every scalar entry is checked on its own:
    |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, floor * scale)
    with scale = max(1, largest analytic magnitude over all params). A single
    wrong entry is reported even inside a large, otherwise correct tensor.

    Args:
        f: Zero-argument function rebuilding the scalar output from `params`
        params: Parameters to check
        eps: Finite-difference step
        floor: Relative floor of the denominator for entries whose gradient is ~0

    Returns:
        Maximum element-wise relative error
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if floor <= 0:
        raise ValueError("floor must be positive")

    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    scale = max([1.0] + [float(np.max(np.abs(a))) for a in analytic if a.size])

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            out = numeric.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = f().item()
                flat[i] = original - eps
                minus = f().item()
                flat[i] = original
                out[i] = (plus - minus) / (2.0 * eps)
            if not a.size:
                continue
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor * scale)
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
