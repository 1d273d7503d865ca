"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a fresh ``Tensor`` and records a backward closure,
so a forward pass builds an acyclic graph that ``backward`` walks once in
reverse topological order. Tensors are immutable after construction except
for their ``grad`` buffer; gradients accumulate additively, so callers must
zero them between optimizer updates.

CPU only, float64 only. Shapes are kept deliberately small; clarity and
gradient-check fidelity win over speed everywhere.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf, expit as _expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Large negative logit standing in for -inf; exp() underflows to exactly 0.
_MASK_FILL = -1e30

# When False, ops skip graph construction (used for evaluation passes).
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row had every entry masked out."""


class no_grad:
    """Context manager disabling graph construction inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array plus an optional differentiation node.

    ``_parents`` and ``_backward`` together form the graph node: the closure
    reads ``self.grad`` and accumulates into each parent's ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

    # -- basic introspection ------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_rank(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    # -- graph plumbing -----------------------------------------------------

    def detach(self) -> "Tensor":
        """Same values, severed from the graph."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add ``g`` into the grad buffer.

        ``own=True`` promises ``g`` is freshly allocated and never aliased by
        the caller afterwards, letting the first accumulation adopt it
        without a copy.
        """
        if self.grad is None:
            self.grad = g if own else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swap_last_axes(self):
        axes = list(range(self.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter:
    """A named learnable tensor. Names must be unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def check_unique_names(params) -> list[Parameter]:
    """Validate name uniqueness across a parameter collection."""
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise ValueError(f"duplicate parameter name: {p.name}")
        seen.add(p.name)
    return list(params)


def _raise_rank(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, own=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b._accumulate(gb, own=gb is not g)

    return _make(out_data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, own=ga is not g)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape), own=True)

    return _make(out_data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(out_data, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), own=True)

    return _make(out_data, (a, b), backward_fn, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics; operands must be >= 2-D.

    Backward: dA = dC @ B^T, dB = A^T @ dC, summed over broadcast batch dims.
    The common case of a 2-D right operand (a weight matrix under a stack of
    batch dimensions) runs as single flattened GEMMs in both directions.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    k = a.shape[-1]
    flat_weight = b.ndim == 2
    if flat_weight:
        out_data = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        try:
            out_data = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from exc

    def backward_fn(g):
        if flat_weight:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape), own=True)
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, k).T @ g2, own=True)
            return
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), own=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape), own=True)

    return _make(out_data, (a, b), backward_fn, "matmul")


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out_data = x.data.reshape(shape)
    in_shape = x.shape

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(in_shape))

    return _make(out_data, (x,), backward_fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) for a in axes)
    out_data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inverse))

    return _make(out_data, (x,), backward_fn, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    out_data = np.asarray(x.data[key])  # np.asarray keeps 0-d results 0-d

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)  # accumulates over repeated fancy indices
            x._accumulate(gx, own=True)

    return _make(out_data, (x,), backward_fn, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _make(out_data, tuple(tensors), backward_fn, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack of an empty sequence")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis), own=True)

    return _make(out_data, tuple(tensors), backward_fn, "stack")


# -- reductions ---------------------------------------------------------------


def _restore_axes(g: np.ndarray, in_shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(in_shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, in_shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(_restore_axes(g, in_shape, axis, keepdims))

    return _make(out_data, (x,), backward_fn, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    in_shape = x.shape
    count = x.size if out_data.size == 0 else x.size // max(out_data.size, 1)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(_restore_axes(g, in_shape, axis, keepdims) / count, own=True)

    return _make(out_data, (x,), backward_fn, "mean")


# -- elementwise nonlinearities ------------------------------------------------


def tabs(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.abs(x.data)
    sign = np.sign(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * sign, own=True)

    return _make(out_data, (x,), backward_fn, "abs")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.log(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g / x.data, own=True)

    return _make(out_data, (x,), backward_fn, "log")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * out_data, own=True)

    return _make(out_data, (x,), backward_fn, "exp")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.sqrt(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * 0.5 / out_data, own=True)

    return _make(out_data, (x,), backward_fn, "sqrt")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out_data * out_data), own=True)

    return _make(out_data, (x,), backward_fn, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = _expit(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * out_data * (1.0 - out_data), own=True)

    return _make(out_data, (x,), backward_fn, "sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through unclipped entries."""
    x = as_tensor(x)
    out_data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * inside, own=True)

    return _make(out_data, (x,), backward_fn, "clip")


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact erf form of the standard normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward_fn(g):
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x._accumulate(g * (cdf + x.data * pdf), own=True)

    return _make(out_data, (x,), backward_fn, "gelu")


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``False`` mask entries get weight exactly 0.

    ``mask`` is a boolean array broadcastable to ``logits.shape`` where True
    marks positions that participate. Masked logits are filled with a large
    negative constant before the max-subtracted normalization, and the
    corresponding outputs are zeroed so the exclusion is exact.
    """
    logits = as_tensor(logits)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        full = np.broadcast_to(mask, logits.shape)
        if not full.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every position masked")
        filled = np.where(full, logits.data, _MASK_FILL)
    else:
        full = None
        filled = logits.data
    shifted = filled - filled.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    if full is not None:
        expd = np.where(full, expd, 0.0)
    out_data = expd / expd.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if logits.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            logits._accumulate(out_data * (g - inner), own=True)

    return _make(out_data, (logits,), backward_fn, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0), own=True)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0), own=True)
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv, own=True)

    return _make(out_data, (x, gain, bias), backward_fn, "layer_norm")


# -- backward pass --------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar. Nodes are visited once, in reverse topological
    order, so gradients through shared subexpressions accumulate correctly.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
