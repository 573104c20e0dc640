"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable value in the package is a :class:`Tensor` wrapping a
row-major numpy array. Operations record themselves on an implicit tape:
each tensor carries a monotonically increasing node id, so creation order
is a valid topological order of the forward computation and ``backward``
walks it in reverse, visiting each node exactly once.

Conventions, fixed so gradients stay unambiguous:

* everything is float64;
* binary broadcasting is numpy-style singleton stretching only (missing
  leading axes count as singletons), anything else raises ``ShapeError``;
* ``max`` reductions break ties toward the lowest flat index;
* GELU is the tanh approximation
  ``0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, ShapeError

_node_counter = itertools.count()
_grad_enabled = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class no_grad:
    """Context manager that suspends tape recording (e.g. for evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


Like = Union["Tensor", np.ndarray, float, int, list]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_parents", "_backward",
                 "_grad_alias")

    def __init__(self, data: Like, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = next(_node_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._grad_alias = False

    # ---- basic introspection -------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- gradient plumbing ---------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # First write aliases the incoming buffer (safe: a node's upstream
        # gradient is final before its own backward runs, in reverse node
        # order). Any second write copies before mutating.
        if not self.requires_grad:
            return
        if self.grad is None:
            g = np.asarray(g)
            if g.shape != self.data.shape:
                g = np.broadcast_to(g, self.data.shape)
            self.grad = g
            self._grad_alias = True
        else:
            if self._grad_alias:
                self.grad = self.grad.astype(np.float64, copy=True)
                self._grad_alias = False
            self.grad += g

    # ---- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return self.scale(-1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def scale(self, s: float) -> "Tensor":
        return scale(self, s)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def gelu(self) -> "Tensor":
        return gelu(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_max(self, axis, keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def softmax(self, axis: int) -> "Tensor":
        return softmax(self, axis)

    def log_softmax(self, axis: int) -> "Tensor":
        return log_softmax(self, axis)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x: Like) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap ``out_data`` in a Tensor recorded on the tape.

    ``backward_fn`` receives the upstream gradient and must call
    ``_accumulate`` on each parent that requires grad. When recording is
    disabled or no parent requires grad, the result is a detached leaf.
    Other modules use this hook to register fused ops (convolution,
    resampling) with hand-written adjoints.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._grad_alias = False
    out.node = next(_node_counter)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---- broadcasting helpers ------------------------------------------------


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not singleton-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing singleton stretching."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data + b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return make_op(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data - b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return make_op(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    out_data = a.data * b.data

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_op(out_data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("division by exact zero")
    out_data = a.data / b.data

    def bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * s

    def bw(g):
        a._accumulate(g * s)

    return make_op(out_data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return make_op(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out_data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return make_op(out_data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / out_data)

    return make_op(out_data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return make_op(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        a._accumulate(g * (a.data > 0.0))

    return make_op(out_data, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    inner = x2 * (_GELU_A * _GELU_C)
    inner += _GELU_C
    inner *= x
    t = np.tanh(inner)
    half_x = 0.5 * x
    out_data = half_x * (1.0 + t)

    def bw(g):
        d_inner = x2 * (3.0 * _GELU_A * _GELU_C)
        d_inner += _GELU_C
        da = 1.0 - t * t
        da *= d_inner
        da *= half_x
        da += 0.5 * (1.0 + t)
        da *= g
        a._accumulate(da)

    return make_op(out_data, (a,), bw)


_ELEMENTWISE_UNARY = {"exp": exp, "relu": relu, "gelu": gelu}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``scale`` expects ``b`` to be a scalar (python number or 0-d tensor).
    """
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} requires two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, _as_tensor(b))
    if op_kind == "scale":
        if b is None:
            raise ShapeError("scale requires a scalar operand")
        s = b.item() if isinstance(b, Tensor) else float(b)
        return scale(a, s)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ShapeError(f"{op_kind} takes a single operand")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---- matmul ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch axes (must match exactly)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch axes differ: {a.shape} vs {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return make_op(out_data, (a, b), bw)


# ---- softmax ----------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    _check_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return make_op(out_data, (x,), bw)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    _check_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def bw(g):
        x._accumulate(g - sm * np.sum(g, axis=axis, keepdims=True))

    return make_op(out_data, (x,), bw)


# ---- reductions -------------------------------------------------------------


def _check_axis(x: Tensor, axis) -> None:
    if axis is None:
        return
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    _check_axis(x, axis)
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge, x.shape).copy())

    return make_op(np.asarray(out_data), (x,), bw)


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    out_data = np.mean(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / n, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge / n, x.shape).copy())

    return make_op(np.asarray(out_data), (x,), bw)


def reduce_max(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties route the full gradient to the lowest index."""
    _check_axis(x, axis)
    out_data = np.max(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        gx = np.zeros_like(x.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(x.data), x.shape)
            gx[idx] = np.asarray(g).reshape(())
        else:
            am = np.expand_dims(np.argmax(x.data, axis=axis), axis)
            ge = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, am, ge, axis=axis)
        x._accumulate(gx)

    return make_op(np.asarray(out_data), (x,), bw)


def reduce(op_kind: str, x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Dispatch a reduction by name (``sum``, ``mean``, ``max``)."""
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if op_kind not in fns:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return fns[op_kind](x, axis, keepdims)


# ---- shape ops -------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return make_op(out_data, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    out_data = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return make_op(out_data, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return make_op(out_data, tensors, bw)


# ---- backward pass -----------------------------------------------------------


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Gradients accumulate additively into ``.grad``; call ``zero_grad`` on
    parameters between steps. Repeated calls keep accumulating.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t.node, reverse=True)
    # interior node grads are per-sweep scratch; only leaves accumulate across calls
    for t in nodes:
        if t._backward is not None:
            t.grad = None
    root._accumulate(np.ones_like(root.data))
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ---- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    worst_index: Optional[tuple] = None

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"grad_check {state}: max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum.reduce([np.abs(a), np.abs(n), np.ones_like(a)])


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` at ``x`` against
    central finite differences.

    Relative error per component is ``|a - n| / max(|a|, |n|, 1)``.
    """
    probe = Tensor(x.data, requires_grad=True)
    y = f(probe)
    if y.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise DomainError("function not finite at probe point")
    backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(probe).item()
            flat[i] = orig - step
            fm = f(probe).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise DomainError("function not finite at finite-difference probe")
            nflat[i] = (fp - fm) / (2.0 * step)

    errs = _rel_err(analytic, numeric)
    worst = np.unravel_index(np.argmax(errs), errs.shape) if errs.size else None
    max_err = float(errs.max()) if errs.size else 0.0
    return GradCheckReport(max_rel_error=max_err, passed=max_err < tol, tol=tol, worst_index=worst)


def directional_grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Directional finite-difference check over a group of parameters.

    Draws one random unit direction per parameter tensor and compares
    ``<grad, v>`` against the central difference of the loss along ``v``.
    Much cheaper than elementwise probing for whole models.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    y = f()
    backward(y)
    dirs = []
    for p in params:
        v = rng.standard_normal(p.shape)
        v /= max(np.linalg.norm(v), 1e-12)
        dirs.append(v)
    analytic = sum(
        float(np.sum((p.grad if p.grad is not None else 0.0) * v))
        for p, v in zip(params, dirs)
    )
    with no_grad():
        for p, v in zip(params, dirs):
            p.data += step * v
        fp = f().item()
        for p, v in zip(params, dirs):
            p.data -= 2.0 * step * v
        fm = f().item()
        for p, v in zip(params, dirs):
            p.data += step * v
    numeric = (fp - fm) / (2.0 * step)
    err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
    return GradCheckReport(max_rel_error=err, passed=err < tol, tol=tol)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))
