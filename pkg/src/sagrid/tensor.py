"""Dense tensors with reverse-mode automatic differentiation.

Values are flat numpy arrays, float32 by default. A global dtype switch
(`use_dtype`) flips new tensors to float64 for gradient checking, where
central finite differences are actually trustworthy.

The tape is implicit: every op that has a differentiable parent stores its
parents and a backward closure on the result. `backward()` walks the graph
once in reverse topological order, accumulates gradients into leaf tensors
that require them, and clears the tape as it goes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeMismatchError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "tsum",
    "tmean",
    "tmax",
    "elementwise",
    "reduce",
    "finite_difference_grad",
    "no_grad",
    "use_dtype",
    "set_default_dtype",
    "default_dtype",
]

_DEFAULT_DTYPE: type = np.float32
_GRAD_ENABLED: bool = True


class ShapeMismatchError(ValueError):
    """Operand shapes cannot be combined."""


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default tensor dtype (e.g. float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / finite differences)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """Dense N-dimensional real array, optionally attached to the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # Internal constructor for op results: keeps the computed dtype and only
    # records a tape node when some parent actually needs gradients.
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Optional[Callable]) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        t.requires_grad = needs
        if needs and backward is not None:
            t._parents = parents
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires grad.

        `self` must be a scalar (size 1). The traversal visits each tape node
        exactly once and releases the tape afterwards.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
                node._parents = ()
                node._backward = None
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable tensor: always requires grad, with a zero-initialized gradient buffer."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(value, dtype=dtype)
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    b = _coerce(b, a.data.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"cannot add shapes {a.shape} and {b.shape}") from None
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return Tensor._result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    b = _coerce(b, a.data.dtype)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"cannot subtract shapes {a.shape} and {b.shape}") from None
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return Tensor._result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    b = _coerce(b, a.data.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    b = _coerce(b, a.data.dtype)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatchError(f"cannot divide shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)

    def backward(g):
        return (-g,)

    return Tensor._result(-a.data, (a,), backward)


def relu(a) -> Tensor:
    a = _coerce(a, _DEFAULT_DTYPE)
    out = np.maximum(a.data, 0)
    ad = a.data

    def backward(g):
        return (g * (ad > 0),)

    return Tensor._result(out, (a,), backward)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if np.isscalar(axis):
        axis = (int(axis),)
    axes = tuple(sorted(a % ndim if -ndim <= a < ndim else _axis_error(a, ndim) for a in axis))
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axis in {axis}")
    return axes


def _axis_error(a, ndim):
    raise ValueError(f"axis {a} out of range for {ndim}-d tensor")


def tsum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _coerce(t, _DEFAULT_DTYPE)
    axes = _normalize_axes(axis, t.data.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)
    shape = t.data.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(out, (t,), backward)


def tmean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _coerce(t, _DEFAULT_DTYPE)
    axes = _normalize_axes(axis, t.data.ndim)
    out = t.data.mean(axis=axes, keepdims=keepdims)
    shape = t.data.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return Tensor._result(out, (t,), backward)


def tmax(t, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction. On ties the gradient goes to the first (lowest linear index) maximum."""
    t = _coerce(t, _DEFAULT_DTYPE)
    axes = _normalize_axes(axis, t.data.ndim)
    data = t.data
    out = data.max(axis=axes, keepdims=keepdims)

    kept = tuple(i for i in range(data.ndim) if i not in axes)
    perm = kept + axes
    reduced = int(np.prod([data.shape[a] for a in axes])) if axes else 1
    moved_shape = tuple(data.shape[i] for i in perm)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        flat = data.transpose(perm).reshape(-1, reduced)
        idx = flat.argmax(axis=1)  # first occurrence on ties
        onehot = np.zeros_like(flat)
        onehot[np.arange(flat.shape[0]), idx] = 1
        onehot = onehot.reshape(moved_shape).transpose(np.argsort(perm))
        return (onehot * g,)

    return Tensor._result(out, (t,), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu}
_REDUCE = {"sum": tsum, "mean": tmean, "max": tmax}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name: add, sub, mul (binary) or relu (unary)."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op == "relu":
        if b is not None:
            raise ValueError("relu takes a single operand")
        return relu(a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    return _ELEMENTWISE[op](a, b)


def reduce(op: str, t, axis=None, keepdims: bool = False) -> Tensor:
    """Dispatch a reduction by name: sum, mean or max."""
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](t, axis, keepdims)


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, the oracle for backward().

    Perturbs each element of `x` in place (and restores it), so `f` must be
    deterministic and must not retain references into `x.data`. Requires
    float64 data; float32 finite differences are noise.
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_difference_grad requires float64 tensors (use use_dtype)")
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return Tensor._result(out.reshape(x.data.shape), (), None)
