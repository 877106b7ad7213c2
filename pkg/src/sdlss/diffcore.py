"""Small reverse-mode autodiff over dense float64 arrays.

Only the operators needed by the generator / sensing networks are provided:
broadcasting arithmetic, 2-D matrix products, reductions, square roots,
piecewise-linear activations and a sigmoid.  Every vector-Jacobian product is
itself written with these operators, so a backward pass can be recorded
(``create_graph=True``) and differentiated again.  The meta step of the
proximal inner loop relies on this.

Usage::

    with Tape() as tape:
        W = tape.watch(np.eye(2))
        v = tape.watch(np.array([3.0, 4.0]))
        out = euclid_norm(affine_forward(W, constant([0.0, 0.0]), v))
    gW, gv = tape.gradient(out, [W, v])
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "PiecewiseLinear",
    "LEAKY",
    "constant",
    "affine_forward",
    "leaky_pwl_forward",
    "pwl_forward",
    "euclid_norm",
    "matmul",
    "transpose",
    "tsum",
    "tsqrt",
    "sigmoid",
    "backward",
]

DTYPE = np.float64
_local = threading.local()


def _active_tapes():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tensor:
    """Immutable array value, optionally tracked as a node on a :class:`Tape`."""

    __slots__ = ("value", "node", "tape")
    __array_priority__ = 100

    def __init__(self, value, node=None, tape=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def tracked(self):
        return self.node is not None

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __getitem__(self, idx):
        return take(self, idx)


def constant(value) -> Tensor:
    """Wrap ``value`` as an untracked tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: int
    forward: Callable
    vjp: Callable
    tensors: tuple


class Tape:
    """Ordered record of primitive operations.

    Records are appended as operations execute, so the list is topologically
    ordered by construction.  A tape is single-owner and must not be shared
    across threads.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.values: dict[int, np.ndarray] = {}
        self.leaves: list[int] = []
        self._pos: dict[int, int] = {}
        self._next = 0
        self.paused = False

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().remove(self)
        return False

    def _new_id(self):
        node = self._next
        self._next += 1
        return node

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf."""
        value = value.value if isinstance(value, Tensor) else value
        node = self._new_id()
        t = Tensor(np.array(value, dtype=DTYPE), node, self)
        _check_finite("watch", t.value)
        self.values[node] = t.value
        self.leaves.append(node)
        self._pos[node] = len(self.records)
        return t

    def _record(self, op, inputs, value, forward, vjp):
        node = self._new_id()
        out = Tensor(value, node, self)
        ids = tuple(t.node if isinstance(t, Tensor) else None for t in inputs)
        self._pos[node] = len(self.records)
        self.records.append(Record(op, ids, node, forward, vjp, tuple(inputs)))
        self.values[node] = out.value
        return out

    @contextmanager
    def _paused(self, paused):
        old = self.paused
        self.paused = paused
        try:
            yield
        finally:
            self.paused = old

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], create_graph=False):
        """Return d(output)/d(t) for every ``t`` in ``wrt``.

        ``wrt`` may contain intermediate nodes as well as leaves.  With
        ``create_graph`` the backward computation is recorded on this tape,
        so the returned gradients are themselves differentiable.
        """
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        if not output.tracked:
            return [Tensor(np.zeros_like(t.value)) for t in wrt]
        if output.tape is not self:
            raise ContractError("output was not recorded on this tape")
        targets = [t.node for t in wrt if t.tracked]
        if not targets:
            return [Tensor(np.zeros_like(t.value)) for t in wrt]
        start = min(self._pos[n] for n in targets)
        end = self._pos[output.node] + 1
        span = self.records[start:end]

        # only nodes downstream of a target can carry a gradient to it
        live = set(targets)
        for rec in span:
            if any(i in live for i in rec.inputs):
                live.add(rec.output)

        grads: dict[int, Tensor] = {output.node: Tensor(np.ones_like(output.value))}
        keep = set(targets)
        with self._paused(not create_graph):
            for rec in reversed(span):
                g = grads.get(rec.output)
                if g is None:
                    continue
                if rec.output not in keep:
                    del grads[rec.output]
                need = tuple(isinstance(t, Tensor) and t.node in live for t in rec.tensors)
                in_grads = rec.vjp(g, need)
                for inp, ig, wanted in zip(rec.tensors, in_grads, need):
                    if ig is None or not wanted:
                        continue
                    prev = grads.get(inp.node)
                    grads[inp.node] = ig if prev is None else prev + ig
        out = []
        for t in wrt:
            g = grads.get(t.node) if t.tracked else None
            out.append(g if g is not None else Tensor(np.zeros_like(t.value)))
        return out

    def replay(self) -> bool:
        """Recompute every record from the stored leaf values.

        Returns True when each recomputed node equals the recorded value
        bit for bit.
        """
        vals = {n: self.values[n] for n in self.leaves}
        for rec in self.records:
            args = []
            for i, t in zip(rec.inputs, rec.tensors):
                if i is None:
                    args.append(t.value if isinstance(t, Tensor) else t)
                else:
                    args.append(vals[i])
            vals[rec.output] = rec.forward(*args)
            if not np.array_equal(vals[rec.output], self.values[rec.output]):
                return False
        return True


def backward(tape: Tape, output: Tensor) -> dict:
    """Gradients of ``output`` for every leaf on ``tape``, keyed by node id."""
    leaves = [Tensor(tape.values[n], n, tape) for n in tape.leaves]
    grads = tape.gradient(output, leaves)
    return {t.node: g.value for t, g in zip(leaves, grads)}


def _check_finite(op, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _emit(op, inputs, forward, vjp):
    """Run ``forward`` on input values and record it if any input is tracked."""
    args = [t.value if isinstance(t, Tensor) else t for t in inputs]
    value = np.asarray(forward(*args), dtype=DTYPE)
    _check_finite(op, value)
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tracked:
            tape = t.tape
            break
    if tape is None or tape.paused:
        return Tensor(value)
    return tape._record(op, inputs, value, forward, vjp)


# -- broadcasting helpers -----------------------------------------------------

def _sum_to_shape(x, shape):
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return np.sum(x, axis=axes, keepdims=True).reshape(shape)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape
    return _emit(
        "sum_to", (x,), lambda a: _sum_to_shape(a, shape),
        lambda g, need: (broadcast_to(g, in_shape),),
    )


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape
    return _emit(
        "broadcast_to", (x,), lambda a: np.broadcast_to(a, shape).copy(),
        lambda g, need: (sum_to(g, in_shape),),
    )


def _bshape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape(a, b, "add")
    return _emit(
        "add", (a, b), np.add,
        lambda g, need: (
            sum_to(g, a.shape) if need[0] else None,
            sum_to(g, b.shape) if need[1] else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape(a, b, "sub")
    return _emit(
        "sub", (a, b), np.subtract,
        lambda g, need: (
            sum_to(g, a.shape) if need[0] else None,
            sum_to(neg(g), b.shape) if need[1] else None,
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), np.negative, lambda g, need: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape(a, b, "mul")
    return _emit(
        "mul", (a, b), np.multiply,
        lambda g, need: (
            sum_to(mul(g, b), a.shape) if need[0] else None,
            sum_to(mul(g, a), b.shape) if need[1] else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape(a, b, "div")

    def vjp(g, need):
        ga = sum_to(div(g, b), a.shape) if need[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if need[1] else None
        return ga, gb

    def fwd(x, y):
        # division by zero surfaces as NonFiniteError from _emit
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(x, y)

    return _emit("div", (a, b), fwd, vjp)


def tsqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.value < 0):
        raise NonFiniteError("sqrt of a negative value")
    holder = {}

    def vjp(g, need):
        return (div(g, mul(2.0, holder["out"])),)

    out = _emit("sqrt", (a,), np.sqrt, vjp)
    holder["out"] = out
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    holder = {}

    def fwd(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    def vjp(g, need):
        s = holder["out"]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _emit("sigmoid", (a,), fwd, vjp)
    holder["out"] = out
    return out


# -- shape / reduction --------------------------------------------------------

def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("transpose", (a,), lambda x: np.ascontiguousarray(x.T), lambda g, need: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape
    return _emit("reshape", (a,), lambda x: np.reshape(x, shape), lambda g, need: (reshape(g, in_shape),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape

    def vjp(g, need):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.value, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(in_shape))
        return (broadcast_to(g, in_shape),)

    return _emit("sum", (a,), lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def take(a, idx) -> Tensor:
    """Indexing by ints, slices or integer arrays (repeats allowed)."""
    a = _as_tensor(a)
    in_shape = a.shape

    def fwd(x):
        return np.array(x[idx])

    def vjp(g, need):
        return (_scatter(g, idx, in_shape),)

    return _emit("take", (a,), fwd, vjp)


def _scatter(g, idx, shape):
    def fwd(x):
        out = np.zeros(shape, dtype=DTYPE)
        # unbuffered so repeated indices accumulate
        np.add.at(out, idx, x)
        return out

    return _emit("scatter", (g,), fwd, lambda h, need: (take(h, idx),))


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit(
        "matmul", (a, b), np.matmul,
        lambda g, need: (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        ),
    )


# -- activations ---------------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseLinear:
    """Continuous piecewise-linear activation with ``t`` pieces.

    ``slopes[j]`` applies on the j-th interval delimited by ``breakpoints``.
    The first piece passes through the origin, so the default two-piece
    activation is the leaky ReLU ``v if v >= 0 else 0.2 v``.
    """

    breakpoints: tuple = (0.0,)
    slopes: tuple = (0.2, 1.0)

    def __post_init__(self):
        bps = tuple(float(b) for b in self.breakpoints)
        slopes = tuple(float(s) for s in self.slopes)
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "slopes", slopes)
        if len(slopes) != len(bps) + 1:
            raise ConfigError("need exactly one more slope than breakpoints")
        if not all(np.isfinite(slopes)) or not all(np.isfinite(bps)):
            raise ConfigError("activation slopes/breakpoints must be finite")
        if any(b1 >= b2 for b1, b2 in zip(bps, bps[1:])):
            raise ConfigError(f"breakpoints must be strictly increasing, got {bps}")

    @classmethod
    def leaky(cls, slope_neg=0.2):
        return cls((0.0,), (float(slope_neg), 1.0))

    @property
    def pieces(self):
        return len(self.slopes)

    def piece_index(self, v):
        # side="right": a point on a breakpoint belongs to the right-hand piece
        return np.searchsorted(np.asarray(self.breakpoints), v, side="right")

    def knot_values(self):
        vals = [self.slopes[0] * self.breakpoints[0]] if self.breakpoints else []
        for j in range(1, len(self.breakpoints)):
            vals.append(vals[-1] + self.slopes[j] * (self.breakpoints[j] - self.breakpoints[j - 1]))
        return vals

    def __call__(self, v):
        v = np.asarray(v, dtype=DTYPE)
        if not self.breakpoints:
            return self.slopes[0] * v
        if len(self.breakpoints) == 1:
            b, knot = self.breakpoints[0], self.knot_values()[0]
            d = v - b
            return np.where(v >= b, knot + self.slopes[1] * d, knot + self.slopes[0] * d)
        idx = self.piece_index(v)
        slopes = np.asarray(self.slopes)[idx]
        bp = np.asarray((self.breakpoints[0],) + self.breakpoints)[idx]
        base = np.asarray([self.knot_values()[0]] + self.knot_values())[idx]
        return base + slopes * (v - bp)

    def derivative(self, v):
        if len(self.breakpoints) == 1:
            return np.where(np.asarray(v) >= self.breakpoints[0], self.slopes[1], self.slopes[0])
        return np.asarray(self.slopes, dtype=DTYPE)[self.piece_index(v)]


LEAKY = PiecewiseLinear.leaky(0.2)


def pwl_forward(v, act: PiecewiseLinear = LEAKY) -> Tensor:
    v = _as_tensor(v)

    def vjp(g, need):
        # slopes are piecewise constant: no second-order term
        return (mul(g, Tensor(act.derivative(v.value))),)

    return _emit("pwl", (v,), act, vjp)


def leaky_pwl_forward(v, slope_neg: float = 0.2) -> Tensor:
    """Leaky two-piece activation; see :class:`PiecewiseLinear` for t pieces."""
    return pwl_forward(v, PiecewiseLinear.leaky(slope_neg))


# -- composites ----------------------------------------------------------------

def affine_forward(W, b, v) -> Tensor:
    """``W v + b``; ``v`` may be a vector (q,) or a batch of rows (N, q)."""
    W, b, v = _as_tensor(W), _as_tensor(b), _as_tensor(v)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise DimensionError(f"affine: weight {W.shape} and bias {b.shape} disagree")
    if v.ndim == 1:
        if v.shape[0] != W.shape[1]:
            raise DimensionError(f"affine: input length {v.shape[0]} != {W.shape[1]}")
        out = matmul(reshape(v, (1, -1)), transpose(W)) + b
        return reshape(out, (W.shape[0],))
    if v.ndim != 2 or v.shape[1] != W.shape[1]:
        raise DimensionError(f"affine: input {v.shape} does not match weight {W.shape}")
    return matmul(v, transpose(W)) + b


def euclid_norm(v, eps: float = 0.0, axis=None) -> Tensor:
    """Smoothed Euclidean norm ``sqrt(sum v^2 + eps^2) - eps``.

    With ``eps == 0`` this is the exact norm (not differentiable at 0).
    ``axis=-1`` gives one norm per row.
    """
    if eps < 0:
        raise ConfigError("eps must be non-negative")
    v = _as_tensor(v)
    sq = tsum(mul(v, v), axis=axis)
    if eps == 0:
        return tsqrt(sq)
    return sub(tsqrt(add(sq, eps * eps)), eps)
