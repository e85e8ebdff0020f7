"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Plain ``numpy.ndarray`` objects play the role of immutable tensors.  A
:class:`Variable` wraps one and, while a :class:`Tape` is active, every
operation whose inputs require gradients appends a :class:`Record` to that
tape.  ``tape.backward(loss)`` replays the records in reverse.

    with Tape() as tape:
        loss = sum_(x * x)
    tape.backward(loss)
"""
import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ids = itertools.count()
_local = threading.local()


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Record:
    __slots__ = ("kind", "inputs", "out", "backward", "saved")

    def __init__(self, kind, inputs, out, backward, saved):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.saved = saved

    def __repr__(self):
        return f"Record({self.kind}, in={[v.node_id for v in self.inputs]}, out={self.out.node_id})"


class Tape:
    """Ordered log of differentiable operations, confined to one thread."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def clear(self) -> None:
        """Drop every record so the graph's arrays are freed without waiting for the cycle collector."""
        self.records.clear()

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r.kind == kind)

    def backward(self, loss: "Variable") -> None:
        """Accumulate dloss/dv into ``v.grad`` for every reachable leaf.

        Intermediate variables only keep their gradient when
        :meth:`Variable.retain_grad` was called on them.
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {loss.node_id: np.ones_like(loss.value)}
        owners = {loss.node_id: loss}
        for rec in reversed(self.records):
            g = grads.pop(rec.out.node_id, None)
            if g is None:
                continue
            owners.pop(rec.out.node_id, None)
            if rec.out.retains_grad:
                rec.out._accumulate(g)
            for v, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not v.requires_grad:
                    continue
                if v.node_id in grads:
                    grads[v.node_id] = grads[v.node_id] + gi
                else:
                    grads[v.node_id] = gi
                    owners[v.node_id] = v
        for nid, g in grads.items():
            v = owners[nid]
            if v.requires_grad:
                v._accumulate(g)


class Variable:
    """A value plus its lazily materialised gradient."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "retains_grad", "name", "tape")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.retains_grad = False
        self.name = name
        self.tape = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64).reshape(self.value.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def retain_grad(self):
        self.retains_grad = True
        return self

    def detach(self) -> "Variable":
        return Variable(self.value.copy())

    def backward(self):
        """Backpropagate through the tape that produced this variable."""
        (self.tape or Tape()).backward(self)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name="") -> Variable:
    return Variable(value, requires_grad=True, name=name)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def record_op(value, kind: str, inputs: Sequence[Variable], backward: Callable, saved=None) -> Variable:
    """Wrap ``value`` and log it on the active tape when any input needs a gradient.

    ``backward`` maps the output gradient to a tuple with one entry (or
    ``None``) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=needs)
    if needs:
        tape.records.append(Record(kind, tuple(inputs), out, backward, saved))
        out.tape = tape
    return out


def _unbroadcast(g, shape):
    # only scalar-with-tensor broadcasting is allowed
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _binary_operands(a, b, op):
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def add(a, b) -> Variable:
    a, b = _binary_operands(a, b, "add")
    return record_op(a.value + b.value, "add", (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Variable:
    a, b = _binary_operands(a, b, "sub")
    return record_op(a.value - b.value, "sub", (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Variable:
    """Hadamard product."""
    a, b = _binary_operands(a, b, "mul")
    av, bv = a.value, b.value
    return record_op(av * bv, "mul", (a, b),
                     lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a: Variable, k: float) -> Variable:
    return record_op(a.value * k, "scale", (a,), lambda g: (g * k,))


def unary(a: Variable, fn, dfn, kind="map") -> Variable:
    """Elementwise map with derivative ``dfn(x, y)`` given input and output."""
    x = a.value
    y = fn(x)
    return record_op(y, kind, (a,), lambda g: (g * dfn(x, y),))


def matmul(a: Variable, b: Variable) -> Variable:
    a, b = as_variable(a), as_variable(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    da, db = a.requires_grad, b.requires_grad

    def backward(g):
        return (g @ bv.T if da else None, av.T @ g if db else None)

    return record_op(av @ bv, "matmul", (a, b), backward)


def add_bias(x: Variable, b: Variable) -> Variable:
    """Add a bias row to every leading index of ``x``; ``b`` matches the last axis."""
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    lead = tuple(range(x.value.ndim - 1))
    return record_op(x.value + b.value, "add_bias", (x, b), lambda g: (g, g.sum(axis=lead)))


def sum_(x: Variable) -> Variable:
    shape = x.shape
    return record_op(np.array(x.value.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Variable) -> Variable:
    shape, n = x.shape, x.size
    return record_op(np.array(x.value.mean()), "mean", (x,), lambda g: (np.full(shape, float(g) / n),))


def reshape(x: Variable, shape) -> Variable:
    old = x.shape
    return record_op(x.value.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ContractError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(xs: Sequence[Variable], axis: int = -1) -> Variable:
    xs = [as_variable(x) for x in xs]
    if not xs:
        raise ContractError("concat of an empty list")
    axis = _check_axis(axis, xs[0].value.ndim)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.value.ndim != len(ref) or any(
                d != r for i, (d, r) in enumerate(zip(x.shape, ref)) if i != axis):
            raise DimensionError(f"concat: {x.shape} disagrees with {ref} off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record_op(np.concatenate([x.value for x in xs], axis=axis), "concat", xs, backward)


def slice_axis(x: Variable, axis: int, start: int, stop: int) -> Variable:
    axis = _check_axis(axis, x.value.ndim)
    idx = [slice(None)] * x.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return record_op(x.value[idx], "slice", (x,), backward)


def index_axis(x: Variable, axis: int, i: int) -> Variable:
    """``x`` with position ``i`` selected along ``axis`` (the axis is dropped)."""
    axis = _check_axis(axis, x.value.ndim)
    idx = [slice(None)] * x.value.ndim
    idx[axis] = i
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return record_op(x.value[idx], "index", (x,), backward)


def stack(xs: Sequence[Variable], axis: int = 0) -> Variable:
    xs = [as_variable(x) for x in xs]
    ref = xs[0].shape
    for x in xs:
        if x.shape != ref:
            raise DimensionError(f"stack: {x.shape} vs {ref}")
    value = np.stack([x.value for x in xs], axis=axis)
    axis = _check_axis(axis, value.ndim)
    return record_op(value, "stack", xs,
                     lambda g: tuple(np.moveaxis(g, axis, 0)))


def embedding(table: Variable, ids) -> Variable:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ContractError(f"embedding ids must lie in [0, {V})")

    def backward(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return record_op(table.value[ids], "embedding", (table,), backward)


def causal_windows(x: Variable, n: int, history=None) -> Variable:
    """Stack the last ``n`` inputs at every time step: [B,T,d] -> [B,T,n*d].

    Time steps before 0 come from ``history`` ([B, n-1, d], a constant) or
    are zero vectors; block ``k`` of the result at time ``t`` holds
    ``x[:, t-n+1+k]``.
    """
    if x.value.ndim != 3:
        raise DimensionError(f"causal_windows expects [batch, time, features], got {x.shape}")
    B, T, d = x.shape
    if history is None:
        history = np.zeros((B, n - 1, d))
    elif history.shape != (B, n - 1, d):
        raise DimensionError(f"window history {history.shape} does not match {(B, n - 1, d)}")
    padded = np.concatenate([history, x.value], axis=1)
    value = np.concatenate([padded[:, k:k + T] for k in range(n)], axis=2)

    def backward(g):
        out = np.zeros((B, T + n - 1, d))
        for k in range(n):
            out[:, k:k + T] += g[:, :, k * d:(k + 1) * d]
        return (out[:, n - 1:],)

    return record_op(value, "window", (x,), backward)


def causal_window(x: Variable, t: int, n: int) -> Variable:
    """The window ending at time ``t`` only: [B,T,d] -> [B,n*d]."""
    T = x.shape[1]
    if not 0 <= t < T:
        raise ContractError(f"time index {t} outside [0, {T})")
    B, _, d = x.shape
    blocks = []
    for s in range(t - n + 1, t + 1):
        blocks.append(Variable(np.zeros((B, d))) if s < 0 else index_axis(x, 1, s))
    return concat(blocks, axis=1)


def fo_pool(f: Variable, z: Variable, c0: Variable) -> Variable:
    """Forget-gated scan ``c_t = c_{t-1} * f_t + z_t * (1 - f_t)``.

    ``f`` and ``z`` are [B,T,H]; ``c0`` is [B,H].  Returns every ``c_t`` as
    [B,T,H] and records a single tape entry for the whole scan.
    """
    if f.shape != z.shape or f.value.ndim != 3 or c0.shape != (f.shape[0], f.shape[2]):
        raise DimensionError(f"fo_pool: f {f.shape}, z {z.shape}, c0 {c0.shape}")
    F = np.ascontiguousarray(f.value.transpose(1, 0, 2))
    Z = np.ascontiguousarray(z.value.transpose(1, 0, 2))
    c0v = c0.value
    C = np.empty_like(F)
    c = c0v
    for t in range(F.shape[0]):
        c = c * F[t] + Z[t] * (1.0 - F[t])
        C[t] = c

    def backward(g):
        G = g.transpose(1, 0, 2)
        dF = np.empty_like(F)
        dZ = np.empty_like(F)
        dc = np.zeros_like(c0v)
        for t in range(F.shape[0] - 1, -1, -1):
            dc = dc + G[t]
            prev = C[t - 1] if t > 0 else c0v
            dF[t] = dc * (prev - Z[t])
            dZ[t] = dc * (1.0 - F[t])
            dc = dc * F[t]
        return dF.transpose(1, 0, 2), dZ.transpose(1, 0, 2), dc

    return record_op(C.transpose(1, 0, 2), "fo_pool", (f, z, c0), backward)


def dropout(x: Variable, p: float, rng: np.random.Generator) -> Variable:
    """Inverted dropout; the caller decides whether it is training time."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return record_op(x.value * mask, "dropout", (x,), lambda g: (g * mask,))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Variable, targets) -> Variable:
    """Mean over rows of ``-log softmax(logits)[target]`` in nats."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.value.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    N, V = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"target index outside [0, {V})")
    logp = log_softmax(logits.value)
    rows = np.arange(N)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (float(g) / N),)

    return record_op(np.array(loss), "xent", (logits,), backward)


def zero_grad(params: Sequence[Variable]) -> None:
    for p in params:
        p.grad = None
