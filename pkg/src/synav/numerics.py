"""Dense arrays with tape-based reverse-mode gradients.

Every differentiable op builds a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

GradientMap = dict[str, np.ndarray]


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class OracleError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float64):
        self._init(np.array(value, dtype=dtype), requires_grad or name is not None, name)

    def _init(self, arr: np.ndarray, requires_grad: bool, name: str | None) -> None:
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, value: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        """Wrap a freshly computed array as the output of a differentiable op."""
        out = cls.__new__(cls)
        out._init(np.asarray(value), False, None)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(as_tensor(other), self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(as_tensor(other), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(as_tensor(other), self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape),
                                                  _unbroadcast(g * a.value, b.shape)))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.value))
    out = x.value * s
    return Tensor.from_op(out, (x,), lambda g: (g * (s * (1.0 + x.value * (1.0 - s))),))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    c = np.sqrt(2.0 / np.pi)
    v = x.value
    inner = c * (v + 0.044715 * v ** 3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return Tensor.from_op(out, (x,), back)


def square(x: Tensor) -> Tensor:
    return Tensor.from_op(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a.value, b.value)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return Tensor.from_op(out, (a, b), back)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.value.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return Tensor.from_op(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def index(x: Tensor, idx) -> Tensor:
    out = x.value[idx]

    basic = isinstance(idx, (slice, int)) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx))

    def back(g):
        full = np.zeros_like(x.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(out), (x,), back)


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), back)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused ops


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), back)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return Tensor.from_op(out, (x,), back)


# ---------------------------------------------------------------------------
# gradients


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. every named tensor on its tape."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    out: GradientMap = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.name is not None:
            out[node.name] = out[node.name] + g if node.name in out else g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return out


def finite_diff_grad(f: Callable[[Mapping[str, np.ndarray]], float],
                     params: Mapping[str, np.ndarray], h: float = 1e-3,
                     names: Iterable[str] | None = None) -> GradientMap:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``f`` receives a dict of plain arrays. Determinism is checked by evaluating
    the unperturbed point twice.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    f0 = f(base)
    if f(base) != f0:
        raise OracleError("objective is not deterministic")
    grads: GradientMap = {}
    for name in (names if names is not None else base.keys()):
        p = base[name]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(base)
            flat[i] = orig - h
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads
