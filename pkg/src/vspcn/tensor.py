"""Dense float tensors with reverse-mode differentiation.

Small self-contained kernel: row-major numpy storage, a fixed set of
primitives (matmul, row softmax, layer normalisation, elementwise maths,
slicing and concatenation), reverse accumulation through per-node closures,
and an independent central-difference oracle for verifying gradients.

Every primitive checks its result for non-finite values and raises
NumericError immediately, so NaN/Inf cannot propagate silently. All math is
float64 by default; float32 is an opt-in speed mode (see set_precision) and
is excluded from gradient verification.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_DTYPE = np.float64
_GRAD_ENABLED = True

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def set_precision(name: str) -> None:
    """Switch the kernel dtype: "float64" (default) or "float32"."""
    global _DTYPE
    if name == "float64":
        _DTYPE = np.float64
    elif name == "float32":
        _DTYPE = np.float32
    else:
        raise ValueError(f"unknown precision {name!r}; use float64 or float32")


def precision() -> str:
    return "float32" if _DTYPE is np.float32 else "float64"


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forwards run value-only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense array plus the closures needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_DTYPE, order="C")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents, vjp) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._vjp = vjp
        else:
            t.requires_grad = False
            t._parents = ()
            t._vjp = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    _check_finite(out, "add")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._wrap(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    _check_finite(out, "sub")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._wrap(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    _check_finite(out, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._wrap(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    _check_finite(out, "div")

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return Tensor._wrap(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return Tensor._wrap(-a.data, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data
    _check_finite(out, "matmul")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._wrap(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.data.shape}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return Tensor._wrap(np.ascontiguousarray(a.data.T), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor._wrap(out, (a,), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    n = a.data.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of shape {a.data.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._wrap(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def vjp(g):
        grads = []
        off = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + n)
            grads.append(g[tuple(idx)])
            off += n
        return tuple(grads)

    return Tensor._wrap(out, tuple(parts), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    _check_finite(out, "sum")

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor._wrap(out, (a,), vjp)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    _check_finite(out, "sum")

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return Tensor._wrap(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")

    def vjp(g):
        return (g * out,)

    return Tensor._wrap(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite(out, "log")

    def vjp(g):
        return (g / a.data,)

    return Tensor._wrap(out, (a,), vjp)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the full gradient to the first operand."""
    out = np.maximum(a.data, b.data)
    _check_finite(out, "maximum")
    take_a = a.data >= b.data

    def vjp(g):
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.data.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.data.shape)
        return ga, gb

    return Tensor._wrap(out, (a, b), vjp)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form; derivative is exact for this form."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)
    _check_finite(out, "gelu")

    def vjp(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * local,)

    return Tensor._wrap(out, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor; every output row sums to 1."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D operand, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    _check_finite(out, "softmax_rows")

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._wrap(out, (a,), vjp)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log softmax, computed with the log-sum-exp shift for stability."""
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D operand, got {a.data.shape}")
    m = a.data.max(axis=1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    _check_finite(out, "log_softmax_rows")
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor._wrap(out, (a,), vjp)


def layer_norm_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise each row to zero mean and unit variance (no affine part)."""
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows needs a 2-D operand, got {a.data.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    _check_finite(out, "layer_norm_rows")
    n = a.data.shape[1]

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * out).mean(axis=1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return Tensor._wrap(out, (a,), vjp)


def entry(a: Tensor, i: int, j: int) -> Tensor:
    """Scalar tensor holding a[i, j]; keeps the graph connected for losses."""
    return sum_all(narrow(narrow(a, 0, i, 1), 1, j, 1))


# ---------------------------------------------------------------------------
# reverse accumulation


def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(leaf) into .grad for every tensor feeding `out`.

    `out` must hold a single value. Grad buffers are never mutated in place,
    so vjp closures may safely return views.
    """
    if out.data.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {out.data.shape}")
    if not out.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for p, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_gradient(f: Callable[..., Tensor], leaves: Sequence[Tensor], h: float = 1e-5):
    """Two-sided central-difference gradient of scalar f at the given leaves.

    Independent of the reverse-mode path: it only re-evaluates f with single
    coordinates displaced by +/- h, under no_grad. Returns one array per leaf.
    Raises ShapeError if f does not produce a single value.
    """

    def value() -> float:
        r = f(*leaves)
        d = r.data if isinstance(r, Tensor) else np.asarray(r)
        if d.size != 1:
            raise ShapeError(f"fd_gradient needs a scalar function, got shape {d.shape}")
        return float(d.reshape(()))

    grads = []
    with no_grad():
        value()  # surface shape/contract errors before the sweep
        for leaf in leaves:
            flat = leaf.data.reshape(-1)
            g = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = value()
                flat[i] = orig - h
                fm = value()
                flat[i] = orig
                g[i] = (fp - fm) / (2.0 * h)
            grads.append(g.reshape(leaf.data.shape))
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max over coordinates of |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


@dataclass
class GradCheckResult:
    per_leaf: list[float]
    worst: float

    def ok(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol


def gradient_check(
    f: Callable[..., Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar f against central differences."""
    for leaf in leaves:
        leaf.grad = None
        leaf.requires_grad = True
    out = f(*leaves)
    backward(out)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]
    numeric = fd_gradient(f, leaves, h=h)
    per_leaf = [max_relative_error(a, n, floor) for a, n in zip(analytic, numeric)]
    worst = max(per_leaf) if per_leaf else 0.0
    return GradCheckResult(per_leaf=per_leaf, worst=worst)
