"""Dense tensors with taped reverse-mode automatic differentiation.

The engine is deliberately small: row-major numpy storage, a handful of
primitive operations, and an explicit recording tape.  Two properties
matter more than breadth:

* Recording is scoped.  Operations record themselves onto every tape on
  the active (thread-local) stack; outside a ``with Tape()`` block they
  are plain numpy calls, so evaluation-only code pays nothing.
* Backward rules are themselves written in terms of the public
  operations.  Running a backward pass while a tape is still active
  therefore produces a differentiable gradient graph, which is what the
  gradient-penalty term needs (a norm of input gradients that is later
  differentiated with respect to the weights).

Default precision is float32; constructing tensors from float64 arrays
keeps float64 throughout, which the verification oracles rely on.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "Adam",
    "TensorError",
    "ShapeError",
    "GradientError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "sqrt",
    "reciprocal",
    "leaky_relu",
    "concat",
    "l2_norm",
    "reduce",
    "backward",
    "grad",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

DEFAULT_DTYPE = np.float32


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class GradientError(TensorError):
    pass


# ---------------------------------------------------------------------------
# tape machinery

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tape:
    """Append-only recording of operations, scoped with ``with``.

    ``nodes`` holds one ``(kind, input_ids, tensor)`` record per recorded
    tensor, in topological order (every node's inputs precede it).  A
    backward pass executed while this or an enclosing tape is active is
    itself recorded, which is the second-order contract.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], "Tensor"]] = []
        self.params: list["Parameter"] = []
        self._param_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TensorError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _register(self, t: "Tensor", kind: str, input_ids: tuple[int, ...]) -> None:
        node_id = len(self.nodes)
        self.nodes.append((kind, input_ids, t))
        if t._tapes is None:
            t._tapes = {}
        t._tapes[id(self)] = node_id
        p = t._param
        if p is not None and id(p) not in self._param_ids:
            self._param_ids.add(id(p))
            self.params.append(p)

    def _ensure_leaf(self, t: "Tensor") -> int:
        if t._tapes is not None:
            nid = t._tapes.get(id(self))
            if nid is not None:
                return nid
        self._register(t, "leaf", ())
        return t._tapes[id(self)]


class Tensor:
    """Dense row-major array, optionally attached to recording tapes."""

    __slots__ = ("data", "_tapes", "_parents", "_backward", "_op", "_param")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self._tapes: dict[int, int] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str = ""
        self._param: "Parameter" | None = None

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        """Node index on the innermost tape this tensor is recorded on."""
        stack = _tape_stack()
        if self._tapes:
            for tape in reversed(stack):
                nid = self._tapes.get(id(tape))
                if nid is not None:
                    return nid
            # recorded, but on tapes no longer active: report the latest id
            return next(reversed(self._tapes.values()))
        return None

    def on_tape(self, tape: Tape) -> bool:
        return bool(self._tapes) and id(tape) in self._tapes

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op or 'leaf'})"

    # -- operator sugar --------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose2d(self) -> "Tensor":
        return _transpose2d(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return _mean(self, axis, keepdims)

    def max(self, axis, keepdims=False) -> "Tensor":
        return _max(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


def _recording() -> bool:
    return bool(_tape_stack())


def _node(kind: str, out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    t = Tensor(out_data)
    t._op = kind
    t._parents = parents
    t._backward = backward_fn
    for tape in _tape_stack():
        input_ids = tuple(tape._ensure_leaf(p) for p in parents)
        tape._register(t, kind, input_ids)
    return t


# ---------------------------------------------------------------------------
# primitive operations

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reverse of broadcasting: reduce ``g`` down to ``shape``."""
    if g.shape == shape:
        return g
    data = g.data
    extra = data.ndim - len(shape)
    if extra > 0:
        data_axes = tuple(range(extra))
    else:
        data_axes = ()
    axes = data_axes + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and data.shape[i + extra] != 1
    )
    if not _recording():
        return Tensor(data.sum(axis=axes).reshape(shape))
    summed = _sum(g, axes, keepdims=False) if axes else g
    return _reshape(summed, shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        ga = _sum_to(g, a.shape) if needs[0] else None
        gb = _sum_to(g, b.shape) if needs[1] else None
        return ga, gb

    return _node("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        ga = _sum_to(g, a.shape) if needs[0] else None
        gb = _sum_to(neg(g), b.shape) if needs[1] else None
        return ga, gb

    return _node("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        ga = _sum_to(mul(g, b), a.shape) if needs[0] else None
        gb = _sum_to(mul(g, a), b.shape) if needs[1] else None
        return ga, gb

    return _node("mul", out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        ga = _sum_to(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = -a.data
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        return (neg(g) if needs[0] else None,)

    return _node("neg", out, (a,), bwd)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    out = a.data * np.asarray(c, dtype=a.dtype)
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        return (scale(g, c) if needs[0] else None,)

    return _node("scale", out, (a,), bwd)


def cmul(a, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient flows into ``arr``)."""
    a = as_tensor(a)
    out = a.data * arr
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        return (_sum_to(cmul(g, arr), a.shape) if needs[0] else None,)

    return _node("cmul", out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    if not _recording():
        return Tensor(out)

    result_holder = []

    def bwd(g, needs):
        return (mul(g, result_holder[0]) if needs[0] else None,)

    t = _node("exp", out, (a,), bwd)
    result_holder.append(t)
    return t


def reciprocal(a) -> Tensor:
    """1/x where x > 0, and exactly 0 where x == 0 (zero subgradient pair for sqrt)."""
    a = as_tensor(a)
    pos = a.data > 0
    out = np.zeros_like(a.data)
    np.divide(1.0, a.data, out=out, where=pos)
    if not _recording():
        return Tensor(out)

    result_holder = []

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        r = result_holder[0]
        return (neg(mul(g, mul(r, r))),)

    t = _node("reciprocal", out, (a,), bwd)
    result_holder.append(t)
    return t


def sqrt(a) -> Tensor:
    """Element-wise square root; the derivative at exactly 0 is taken to be 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    if not _recording():
        return Tensor(out)

    result_holder = []

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        return (mul(g, scale(reciprocal(result_holder[0]), 0.5)),)

    t = _node("sqrt", out, (a,), bwd)
    result_holder.append(t)
    return t


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    data = a.data
    dt = data.dtype.type
    # max(x, alpha*x) equals leaky relu for 0 <= alpha < 1 and avoids np.where
    out = data * dt(alpha)
    np.maximum(data, out, out=out)
    if not _recording():
        return Tensor(out)

    slope = (data > 0) * dt(1.0 - alpha)
    slope += dt(alpha)

    def bwd(g, needs):
        return (cmul(g, slope) if needs[0] else None,)

    return _node("leaky_relu", out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        ga = matmul(g, _transpose2d(b)) if needs[0] else None
        gb = matmul(_transpose2d(a), g) if needs[1] else None
        return ga, gb

    return _node("matmul", out, (a, b), bwd)


def _transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    out = a.data.T
    if not _recording():
        return Tensor(out)

    def bwd(g, needs):
        return (_transpose2d(g) if needs[0] else None,)

    return _node("transpose", out, (a,), bwd)


def _reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    if not _recording():
        return Tensor(out)

    orig = a.shape

    def bwd(g, needs):
        return (_reshape(g, orig) if needs[0] else None,)

    return _node("reshape", out, (a,), bwd)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    if not _recording():
        return Tensor(np.ascontiguousarray(out))

    orig = a.shape

    def bwd(g, needs):
        return (_sum_to(g, orig) if needs[0] else None,)

    return _node("broadcast", np.ascontiguousarray(out), (a,), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = a.data[tuple(idx)]
    if not _recording():
        return Tensor(np.ascontiguousarray(out))

    orig_dim = a.shape[axis]

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        return (_pad_axis(g, axis, start, orig_dim),)

    return _node("narrow", np.ascontiguousarray(out), (a,), bwd)


def _pad_axis(g: Tensor, axis: int, start: int, full: int) -> Tensor:
    length = g.shape[axis]
    out = np.zeros(g.shape[:axis] + (full,) + g.shape[axis + 1 :], dtype=g.dtype)
    idx = [slice(None)] * out.ndim
    idx[axis] = slice(start, start + length)
    out[tuple(idx)] = g.data
    if not _recording():
        return Tensor(out)

    def bwd(gg, needs):
        return (narrow(gg, axis, start, length) if needs[0] else None,)

    return _node("pad", out, (g,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    if not _recording():
        return Tensor(out)

    lengths = [t.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(lengths)])

    def bwd(g, needs):
        return tuple(
            narrow(g, axis, int(offsets[i]), lengths[i]) if needs[i] else None
            for i in range(len(ts))
        )

    return _node("concat", out, tuple(ts), bwd)


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(_normalize_axis(a, ndim) for a in axis)
    axis = int(axis)
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis


def _restore_shape(g: Tensor, axis, keepdims: bool, shape: tuple[int, ...]) -> Tensor:
    """Reshape a reduced gradient so it broadcasts back over ``shape``."""
    if keepdims or axis is None:
        return g
    axes = axis if isinstance(axis, tuple) else (axis,)
    kept = list(g.shape)
    for ax in sorted(axes):
        kept.insert(ax, 1)
    return _reshape(g, tuple(kept))


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _recording():
        return Tensor(out)

    shape = a.shape

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        g2 = _restore_shape(g, axis, keepdims, shape)
        if axis is None:
            g2 = _reshape(g2, (1,) * len(shape)) if shape else g2
        return (broadcast_to(g2, shape),)

    return _node("sum", out, (a,), bwd)


def _mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    naxis = _normalize_axis(axis, a.data.ndim)
    if naxis is None:
        count = a.size
    elif isinstance(naxis, tuple):
        count = int(np.prod([a.shape[ax] for ax in naxis]))
    else:
        count = a.shape[naxis]
    s = _sum(a, axis, keepdims)
    return scale(s, 1.0 / count)


def _scatter_along(g: Tensor, idx: np.ndarray, axis: int, shape: tuple[int, ...]) -> Tensor:
    """Place ``g`` at ``idx`` along ``axis`` in a zero tensor of ``shape``."""
    out = np.zeros(shape, dtype=g.dtype)
    np.put_along_axis(out, idx, g.data, axis=axis)
    if not _recording():
        return Tensor(out)

    def bwd(gg, needs):
        return (_gather_along(gg, idx, axis) if needs[0] else None,)

    return _node("scatter", out, (g,), bwd)


def _gather_along(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not _recording():
        return Tensor(out)

    shape = a.shape

    def bwd(g, needs):
        return (_scatter_along(g, idx, axis, shape) if needs[0] else None,)

    return _node("gather", out, (a,), bwd)


def _max(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient routes only to the (first) argmax."""
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.data.ndim)
    if isinstance(axis, tuple) or axis is None:
        raise ShapeError("max reduction requires a single axis")
    out = a.data.max(axis=axis, keepdims=keepdims)
    if not _recording():
        return Tensor(out)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    shape = a.shape

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        g2 = _restore_shape(g, axis, keepdims, shape)
        return (_scatter_along(g2, idx, axis, shape),)

    return _node("max", out, (a,), bwd)


def reduce(op: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Dispatch a reduction by name: ``max_over_points``, ``mean`` or ``sum``."""
    if op == "sum":
        return _sum(as_tensor(x), axis, keepdims)
    if op == "mean":
        return _mean(as_tensor(x), axis, keepdims)
    if op in ("max", "max_over_points"):
        return _max(as_tensor(x), axis, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def l2_norm(x, axis) -> Tensor:
    """sqrt of the sum of squares along ``axis``; zero subgradient at exactly 0."""
    x = as_tensor(x)
    return sqrt(_sum(mul(x, x), axis))


# ---------------------------------------------------------------------------
# backward

def _toposort(root: Tensor, tape: Tape) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.on_tape(tape):
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(
    output: Tensor,
    sources: Sequence[Tensor],
    tape: Tape,
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``sources``.

    If any tape is active when this runs, the gradient computation is
    itself recorded, making the returned tensors differentiable.
    """
    if output.size != 1:
        raise GradientError(f"grad expects a scalar output, got shape {output.shape}")
    if not output.on_tape(tape):
        raise GradientError("output is not recorded on the given tape")

    src_ids = {id(s) for s in sources}
    order = _toposort(output, tape)

    # mark tensors through which some source is reachable
    needed: set[int] = set(src_ids)
    for t in order:  # order is topological: parents come first
        if id(t) in needed:
            continue
        if t.on_tape(tape) and any(id(p) in needed for p in t._parents):
            needed.add(id(t))

    grads: dict[int, Tensor] = {}
    if grad_output is None:
        grad_output = Tensor(np.ones_like(output.data))
    grads[id(output)] = grad_output

    for t in reversed(order):
        g = grads.get(id(t)) if id(t) in src_ids else grads.pop(id(t), None)
        if g is None or t._backward is None or not t.on_tape(tape):
            continue
        if id(t) not in needed:
            continue
        needs = tuple(id(p) in needed for p in t._parents)
        if not any(needs):
            continue
        parent_grads = t._backward(g, needs)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else add(prev, pg)

    out = []
    for s in sources:
        g = grads.get(id(s))
        if g is None:
            g = Tensor(np.zeros_like(s.data))
        out.append(g)
    return out


def backward(loss: Tensor, tape: Tape, accumulate: bool = True) -> dict["Parameter", Tensor]:
    """Gradients of a scalar loss for every Parameter recorded on ``tape``."""
    if loss.size != 1:
        raise GradientError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.on_tape(tape):
        raise GradientError("loss is not recorded on the given tape")
    params = list(tape.params)
    gs = grad(loss, [p.value for p in params], tape)
    result: dict[Parameter, Tensor] = {}
    for p, g in zip(params, gs):
        result[p] = g
        if accumulate:
            p.grad.data += g.data
    return result


# ---------------------------------------------------------------------------
# parameters and the optimizer

class Parameter:
    """Trainable tensor with a same-shaped gradient accumulator."""

    def __init__(self, value, name: str):
        self.value = as_tensor(value)
        self.value._param = self
        self.grad = Tensor(np.zeros_like(self.value.data))
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params, grads, lr, beta1, beta2, eps, state) -> dict:
    """One bias-corrected Adam update; mutates params in place, returns state.

    ``state`` maps parameter name to (m, v) moment arrays and carries a
    shared step counter under the key ``"t"``.
    """
    if lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    state = dict(state) if state else {}
    t = state.get("t", 0) + 1
    state["t"] = t
    for p, g in zip(params, grads):
        garr = g.data if isinstance(g, Tensor) else np.asarray(g)
        if garr.shape != p.value.shape:
            raise ShapeError(
                f"adam_step: gradient shape {garr.shape} does not match parameter "
                f"{p.name!r} shape {p.value.shape}"
            )
        m, v = state.get(p.name, (np.zeros_like(p.value.data), np.zeros_like(p.value.data)))
        if m.shape != p.value.shape:
            raise ShapeError(f"adam_step: state shape {m.shape} mismatches {p.name!r}")
        m = beta1 * m + (1.0 - beta1) * garr
        v = beta2 * v + (1.0 - beta2) * garr * garr
        state[p.name] = (m, v)
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.value.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


class Adam:
    """Stateful convenience wrapper around ``adam_step``."""

    def __init__(self, params: Sequence[Parameter], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self, grads=None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        self.state = adam_step(
            self.params, grads, self.lr, self.beta1, self.beta2, self.eps, self.state
        )

    def zero_grad(self) -> None:
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"CCPC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter]) -> None:
    """Flat binary file: magic, version, then per-parameter records."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            dims = p.value.shape
            f.write(struct.pack("<I", len(dims)))
            f.write(struct.pack(f"<{len(dims)}I", *dims))
            f.write(p.value.data.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into a name -> float32 array mapping."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise TensorError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise TensorError(f"{path}: unsupported checkpoint version {version}")
    offset = 8
    out: dict[str, np.ndarray] = {}
    while offset < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + nlen].decode("utf-8")
            offset += nlen
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
            offset += 4 * count
        except (struct.error, ValueError) as e:
            raise TensorError(f"{path}: truncated checkpoint record: {e}") from e
        out[name] = arr.copy()
    return out


def assign_checkpoint(params: Sequence[Parameter], arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise TensorError(f"checkpoint is missing parameter {p.name!r}")
        arr = arrays[p.name]
        if arr.shape != p.value.shape:
            raise ShapeError(
                f"checkpoint parameter {p.name!r} has shape {arr.shape}, expected {p.value.shape}"
            )
        p.value.data[...] = arr.astype(p.value.dtype)
