"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written with the same differentiable primitives used in
the forward pass, so ``grad(..., create_graph=True)`` returns tensors that can
be differentiated again. That is what makes gradients of Jacobian-dependent
quantities (the NTK term of the transfer objective) exact.

Conventions:

* ReLU is ``x * (x > 0)`` with the comparison held constant, so its derivative
  at exactly 0 is 0 and its second derivative is 0 everywhere.
* All values are float64. Any op producing a NaN or Inf raises
  :class:`NonFiniteError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError

__all__ = [
    "NonFiniteError",
    "Tensor",
    "DiffGraph",
    "as_tensor",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "evaluate",
    "gradient",
    "per_sample_jacobian",
    "second_order_gradient",
    "hvp",
    "primitive",
]


class NonFiniteError(NumericalError, FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: operations inside are not recorded."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """An immutable float64 array with an optional place in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out.data = data
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def primitive(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Register a fused operation on the tape.

    ``backward(g, needs)`` returns one gradient (or None) per parent. Fused
    operations whose backward is plain numpy should raise when called under
    ``create_graph``; see :func:`is_grad_enabled`.
    """
    return _make(data, parents, backward, op)


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape

    def backward(g, needs):
        return (broadcast_to(g, src_shape),)

    return _make(data.reshape(shape), (x,), backward, "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape

    def backward(g, needs):
        return (sum_to(g, src_shape),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), backward, "broadcast_to")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), backward, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def square(a) -> Tensor:
    return mul(a, a)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_holder: list[Tensor] = []

    def backward(g, needs):
        return (mul(g, out_holder[0]),)

    out = _make(np.exp(a.data), (a,), backward, "exp")
    out_holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g, needs: (div(g, a),), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, Tensor((a.data > 0).astype(np.float64)))


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def matmul(a, b) -> Tensor:
    """Matrix product of operands with at least two dimensions (numpy batching rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def backward(g, needs):
        ga = sum_to(matmul(g, _swap_last(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(_swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src_shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept_shape), src_shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src_shape = a.shape
    return _make(
        a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src_shape),), "reshape"
    )


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g, needs: (transpose(g, inverse),), "transpose"
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src_shape = a.shape

    def backward(g, needs):
        return (index_add(g, index, src_shape),)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis for i in parts)


def index_add(g, index, shape) -> Tensor:
    """Place ``g`` at ``index`` in a zero array of ``shape`` (adjoint of indexing)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    if _is_basic(index):
        out[index] += g.data
    else:
        np.add.at(out, index, g.data)
    return _make(out, (g,), lambda gg, needs: (getitem(gg, index),), "index_add")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim

    def backward(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = i
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(data, tensors, backward, "stack")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(data, tensors, backward, "concatenate")


def gather(x, idx: np.ndarray) -> Tensor:
    """Select columns of a 2-D tensor ``x`` (rows x m) with an index array shared by all rows.

    The result has shape ``(rows, *idx.shape)``. Index -1 selects an implicit
    zero, which is how convolution padding is expressed.
    """
    x = as_tensor(x)
    rows, m = x.shape
    padded = np.concatenate([x.data, np.zeros((rows, 1))], axis=1)
    safe = np.where(idx < 0, m, idx)
    out = padded[:, safe]

    def backward(g, needs):
        return (scatter(g, idx, m),)

    return _make(out, (x,), backward, "gather")


def scatter(g, idx: np.ndarray, m: int) -> Tensor:
    """Adjoint of :func:`gather`: accumulate ``g`` (rows x idx.shape) into rows x m."""
    g = as_tensor(g)
    rows = g.shape[0]
    flat_idx = np.broadcast_to(idx, g.shape[1:]).reshape(-1)
    valid = flat_idx >= 0
    target = (np.arange(rows)[:, None] * m + flat_idx[valid][None, :]).reshape(-1)
    weights = g.data.reshape(rows, -1)[:, valid].reshape(-1)
    out = np.bincount(target, weights=weights, minlength=rows * m).reshape(rows, m)
    return _make(out, (g,), lambda gg, needs: (gather(gg, idx),), "scatter")


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Per-row selection: ``out[r, k] = x[r, idx[r, k]]`` for 2-D ``x`` and ``idx``."""
    x = as_tensor(x)
    rows, m = x.shape

    def backward(g, needs):
        return (scatter_rows(g, idx, m),)

    return _make(np.take_along_axis(x.data, idx, axis=1), (x,), backward, "gather_rows")


def scatter_rows(g, idx: np.ndarray, m: int) -> Tensor:
    g = as_tensor(g)
    rows = g.shape[0]
    target = (np.arange(rows)[:, None] * m + idx).reshape(-1)
    out = np.bincount(target, weights=g.data.reshape(-1), minlength=rows * m)
    return _make(
        out.reshape(rows, m), (g,), lambda gg, needs: (gather_rows(gg, idx),), "scatter_rows"
    )


def dot(a, b) -> Tensor:
    """Full contraction ``sum(a * b)``."""
    return sum_(mul(a, b))


# ----------------------------------------------------------------------
# reverse sweep
# ----------------------------------------------------------------------


def _toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen or not root.requires_grad:
            continue
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return order


def grad(
    outputs,
    inputs,
    grad_outputs=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian product of ``outputs`` with respect to ``inputs``.

    ``inputs`` may be leaves or intermediate tensors. Unreachable inputs get a
    zero gradient. With ``create_graph`` the result is itself differentiable.
    """
    single_out = isinstance(outputs, Tensor)
    outputs = [outputs] if single_out else list(outputs)
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise ValueError("grad_outputs required for non-scalar outputs")
        grad_outputs = [Tensor(np.ones(o.shape)) for o in outputs]
    elif isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs]
    grad_outputs = [as_tensor(g) for g in grad_outputs]

    order = _toposort(outputs)
    input_ids = {id(t) for t in inputs}
    relevant: set[int] = set()
    for node in order:  # parents precede children
        if id(node) in input_ids or any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))

    cot: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        for o, g in zip(outputs, grad_outputs):
            if o.requires_grad and id(o) in relevant:
                cot[id(o)] = add(cot[id(o)], g) if id(o) in cot else g
        for node in reversed(order):
            g = cot.get(id(node))
            if g is None or node._backward is None:
                continue
            needs = tuple(p.requires_grad and id(p) in relevant for p in node._parents)
            if not any(needs):
                continue
            pgrads = node._backward(g, needs)
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                cot[id(p)] = add(cot[id(p)], pg) if id(p) in cot else pg
    return [cot.get(id(t), Tensor(np.zeros(t.shape))) for t in inputs]


# ----------------------------------------------------------------------
# graph-level operations
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DiffGraph:
    """A differentiable function of a flat parameter vector and a batch of inputs.

    ``fn(params, inputs)`` must build its result from the primitives in this
    module. ``n_params`` and ``input_shape`` (per sample) are checked on every
    evaluation when given.
    """

    fn: Callable[[Tensor, Tensor], Tensor]
    n_params: int | None = None
    input_shape: tuple[int, ...] | None = None

    def _check(self, params: np.ndarray, inputs: np.ndarray) -> None:
        if self.n_params is not None and params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        if self.input_shape is not None and tuple(inputs.shape[1:]) != tuple(self.input_shape):
            raise ValueError(
                f"expected per-sample input shape {self.input_shape}, got {inputs.shape[1:]}"
            )

    def __call__(self, params, inputs) -> Tensor:
        p = params if isinstance(params, Tensor) else Tensor(params)
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        self._check(p.data, x.data)
        return self.fn(p, x)


def evaluate(graph: DiffGraph, params, inputs) -> np.ndarray:
    """Value of the graph's root. Deterministic for identical leaves."""
    with no_grad():
        return graph(params, inputs).data.copy()


def gradient(graph: DiffGraph, params, inputs) -> np.ndarray:
    """Exact gradient of a scalar-rooted graph with respect to the parameters."""
    p = Tensor(np.asarray(params, dtype=np.float64), requires_grad=True)
    root = graph(p, inputs)
    if root.size != 1:
        raise ValueError(f"gradient requires a scalar root, got shape {root.shape}")
    (g,) = grad(root, [p])
    return g.data


def per_sample_jacobian(graph: DiffGraph, params, inputs, create_graph: bool = False):
    """Rows ``i*c + k`` hold d output_k(x_i) / d params.

    Returns an ``(n*c, P)`` array, or a differentiable :class:`Tensor` when
    ``create_graph`` is set and ``params`` is a tensor requiring grad.
    """
    x = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("per_sample_jacobian needs a non-empty batch")
    if isinstance(params, Tensor) and params.requires_grad:
        p = params
    else:
        p = Tensor(np.asarray(params.data if isinstance(params, Tensor) else params),
                   requires_grad=True)
    rows = []
    for i in range(x.shape[0]):
        out = graph(p, x[i : i + 1])
        flat = reshape(out, (-1,))
        for k in range(flat.shape[0]):
            (g,) = grad(flat[k], [p], create_graph=create_graph)
            rows.append(g)
    if create_graph:
        return stack(rows, axis=0)
    return np.stack([r.data for r in rows], axis=0)


def second_order_gradient(functional: Callable[[Tensor], Tensor], params) -> np.ndarray:
    """Gradient of a scalar functional that may contain first-order derivatives.

    ``functional`` receives the parameters as a tensor requiring grad and may
    call :func:`grad` with ``create_graph=True`` (or
    :func:`per_sample_jacobian` with ``create_graph=True``) internally; the
    outer sweep then differentiates through those inner sweeps.
    """
    p = Tensor(np.asarray(params, dtype=np.float64), requires_grad=True)
    value = functional(p)
    if value.size != 1:
        raise ValueError("functional must return a scalar")
    (g,) = grad(value, [p])
    return g.data


def hvp(f: Callable[[Tensor], Tensor], params, v) -> np.ndarray:
    """Hessian-vector product of scalar ``f`` at ``params`` with direction ``v``."""
    v = Tensor(np.asarray(v, dtype=np.float64))

    def directional(p: Tensor) -> Tensor:
        (g,) = grad(f(p), [p], create_graph=True)
        return dot(g, v)

    return second_order_gradient(directional, params)
