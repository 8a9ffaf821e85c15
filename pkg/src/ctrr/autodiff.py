"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output adjoint back to them. :func:`backward` walks the
recorded nodes in reverse topological order, visiting parents in input-index
order, so accumulation is deterministic run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_FLOOR = 1e-8


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    pass


class DegenerateRowError(ValueError):
    """A row had (near) zero norm where a direction was required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple[Tensor, ...] = ()):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis: int | None = None) -> Tensor:
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean(self, axis)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    return arr


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(op, data)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op
    out._parents = parents
    out._backward = backward if out.requires_grad else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node("add", a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _broadcast_shape("mul", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node("mul", a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node("matmul", a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node("transpose", a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node("dot", np.array(a.data @ b.data), (a, b), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node("relu", np.where(mask, a.data, 0.0), (a,), lambda g: _accumulate(a, g * mask))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError("softmax", a.shape)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accumulate(a, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _node("softmax", s, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        # every log in this package sits behind a clamp
        raise NonFiniteError("log: non-positive input; a clamp was bypassed")
    return _node("log", np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("sqrt: non-positive input")
    r = np.sqrt(a.data)
    return _node("sqrt", r, (a,), lambda g: _accumulate(a, g * 0.5 / r))


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NonFiniteError("reciprocal: zero input")
    r = 1.0 / a.data
    return _node("reciprocal", r, (a,), lambda g: _accumulate(a, -g * r * r))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient passes only where ``lo <= x <= hi``."""
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    return _node("clamp", np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, g * inside))


def normalize_rows(a: Tensor) -> Tensor:
    """Divide each row by its L2 norm. 1-D input is treated as a single row."""
    x = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    if x.ndim != 2:
        raise ShapeError("normalize_rows", a.shape)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] < NORM_FLOOR)
    if bad.size:
        raise DegenerateRowError(
            f"normalize_rows: row(s) {bad.tolist()} have norm below {NORM_FLOOR:g}")
    y = x / norms

    def bw(g):
        g2 = g.reshape(y.shape)
        gx = (g2 - y * (g2 * y).sum(axis=1, keepdims=True)) / norms
        _accumulate(a, gx.reshape(a.shape))

    return _node("normalize_rows", y.reshape(a.shape), (a,), bw)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _node("sum", np.array(a.data.sum()), (a,),
                     lambda g: _accumulate(a, np.broadcast_to(g, a.shape).copy()))
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"sum(axis={axis})", a.shape)

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node("sum", a.data.sum(axis=axis), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), Tensor(1.0 / n))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity on values; the result is a fresh leaf so no adjoint reaches ``a``."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.requires_grad = False
    out.op = "stop_gradient"
    out._parents = ()
    out._backward = None
    return out


_BINARY = {"add": add, "mul": mul, "matmul": matmul, "dot": dot}
_UNARY = {"neg": neg, "relu": relu, "softmax": softmax, "log": log, "sqrt": sqrt,
          "reciprocal": reciprocal,
          "normalize_rows": normalize_rows, "transpose": transpose,
          "sum": sum_, "mean": mean, "stop_gradient": stop_gradient}


def apply_primitive(op_kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch by name; ``clamp`` takes ``lo``/``hi`` keywords, ``sum``/``mean`` take ``axis``."""
    inputs = tuple(_lift(x) for x in inputs)
    if op_kind == "clamp":
        (a,) = inputs
        return clamp(a, kwargs["lo"], kwargs["hi"])
    if op_kind in _BINARY:
        if len(inputs) != 2:
            raise ShapeError(op_kind, *(x.shape for x in inputs))
        return _BINARY[op_kind](*inputs)
    if op_kind in _UNARY:
        if len(inputs) != 1:
            raise ShapeError(op_kind, *(x.shape for x in inputs))
        return _UNARY[op_kind](inputs[0], **kwargs)
    raise KeyError(f"unknown primitive {op_kind!r}")


# ---------------------------------------------------------------- backward


def topological_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(output, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(output: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every node that requires it; returns the leaves reached.

    Gradients are reset first, so calling twice gives the same result.
    """
    if output.data.size != 1:
        raise ShapeError("backward (scalar output required)", output.shape)
    order = topological_order(output)
    for node in order:
        node.grad = np.zeros_like(node.data) if node.requires_grad else None
    if output.requires_grad:
        output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return [n for n in order if not n._parents and n.requires_grad]


# ---------------------------------------------------------------- finite differences


def finite_diff_gradient(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(x.copy()))
        flat[i] = orig - step
        fm = float(fn(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, x.shape)
            raise NonFiniteError(f"finite_diff_gradient: non-finite value at coordinate {idx}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass
class GradCheckReport:
    max_relative_error: float
    errors: list[float] = field(default_factory=list)
    step: float = 1e-5


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-coordinate |a - n| scaled by the larger of the two gradient inf-norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return np.abs(analytic - numeric).reshape(-1) / scale


def grad_check(build: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> GradCheckReport:
    """Compare :func:`backward` against :func:`finite_diff_gradient` for ``build(x)``."""
    x = Tensor(point, requires_grad=True)
    out = build(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = finite_diff_gradient(lambda v: build(Tensor(v)).item(), point, step)
    errs = relative_errors(analytic, numeric)
    return GradCheckReport(float(errs.max(initial=0.0)), errs.tolist(), step)


def grad_check_many(build: Callable[[Sequence[Tensor]], Tensor], points: Sequence[np.ndarray],
                    step: float = 1e-5) -> GradCheckReport:
    """Gradient check over several input tensors jointly."""
    leaves = [Tensor(p, requires_grad=True) for p in points]
    backward(build(leaves))
    errs = []
    for k, leaf in enumerate(leaves):
        def f(v, k=k):
            args = [Tensor(p) for p in points]
            args[k] = Tensor(v)
            return build(args).item()

        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errs.append(relative_errors(analytic, finite_diff_gradient(f, points[k], step)))
    all_errs = np.concatenate(errs)
    return GradCheckReport(float(all_errs.max(initial=0.0)), all_errs.tolist(), step)
