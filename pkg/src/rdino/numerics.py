"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Only the operations needed by the encoder, projection head and losses are
provided. A graph is built during the forward pass and walked once by
:meth:`Tensor.backward`; every leaf created with ``requires_grad=True`` ends
up with a ``.grad`` array of its own shape.

Tensors that do not require a gradient never record parents, so running a
network on plain constants (the teacher branch) costs only the forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar hyperparameter is out of range."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        # free the graph
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self)))

    def __rsub__(self, other):
        return add(as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # plain scalars/arrays take the partner's dtype so float32 graphs stay float32
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c) against a constant."""
    mask = a.data > c
    return _make(np.where(mask, a.data, np.asarray(c, dtype=a.dtype)), (a,), lambda g: (g * mask,), "maximum")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -- shape ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def var(a: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Biased (divide-by-N) variance along ``axis``."""
    centered = a - mean(a, axis, keepdims=True)
    return mean(square(centered), axis, keepdims)


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and a 2-d ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize along the last axis to unit Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    u = a.data / norm

    def backward(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / norm,)

    return _make(u, (a,), backward, "l2_normalize")


def weight_norm_linear(x: Tensor, direction: Tensor, magnitude: Tensor) -> Tensor:
    """``x @ W`` with ``W[:, k] = magnitude[k] * direction[:, k] / ||direction[:, k]||``."""
    x = as_tensor(x)
    direction, magnitude = as_tensor(direction, x), as_tensor(magnitude, x)
    if direction.shape[0] != x.shape[-1] or magnitude.shape != (direction.shape[1],):
        raise DimensionError(
            f"weight_norm_linear shape mismatch: x {x.shape}, direction {direction.shape}, magnitude {magnitude.shape}"
        )
    col_norm = sqrt(tsum(square(direction), axis=0, keepdims=True))
    weight = direction * (reshape(magnitude, (1, -1)) * reciprocal(col_norm))
    return matmul(x, weight)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Valid 1-d convolution along time.

    ``x`` is (B, T, C_in), ``weight`` is (k, C_in, C_out); output is
    (B, T - dilation*(k-1), C_out).
    """
    k, c_in, c_out = weight.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise DimensionError(f"conv1d shape mismatch: x {x.shape}, weight {weight.shape}")
    t_out = x.shape[1] - dilation * (k - 1)
    if t_out < 1:
        raise DimensionError(f"conv1d input length {x.shape[1]} shorter than receptive field {dilation * (k - 1) + 1}")
    cols = np.concatenate([x.data[:, j * dilation: j * dilation + t_out, :] for j in range(k)], axis=2)
    w2 = weight.data.reshape(k * c_in, c_out)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = g @ w2.T
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[:, j * dilation: j * dilation + t_out, :] += gcols[:, :, j * c_in:(j + 1) * c_in]
        if weight.requires_grad:
            gw = (cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, c_out).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv1d")


# -- softmax family ------------------------------------------------------


def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Row softmax of ``logits / tau`` along the last axis, max-shifted."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return _make(p, (logits,), backward, "softmax_temp")


def log_softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Log of :func:`softmax_temp` via log-sum-exp; never evaluates log(0)."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return _make(out, (logits,), backward, "log_softmax_temp")


# -- checking utilities --------------------------------------------------


def numerical_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``fn()`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||)``; tiny-norm pairs compare absolutely."""
    diff = float(np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale if scale > floor else diff


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-4) -> list[float]:
    """Compare backward() with finite differences for each input; returns relative errors."""
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    errors = []
    for leaf, arr in zip(leaves, arrays):
        numeric = numerical_grad(lambda: fn(*[Tensor(a) for a in arrays]).item(), arr, h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        errors.append(relative_error(analytic, numeric))
    return errors
