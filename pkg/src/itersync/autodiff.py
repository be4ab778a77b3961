"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose result depends on a
``requires_grad`` leaf.  :meth:`Tape.backward` walks the record in reverse
order exactly once and stores total derivatives on the leaves.

    tape = Tape()
    w = tape.leaf(np.ones(3), requires_grad=True)
    loss = ad.sum(w * w)
    tape.backward(loss)
    w.grad  # -> [2., 2., 2.]
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .liegroup import SERIES_ANGLE_V, SMALL_ANGLE, SQUASH_MAX


class TapeError(RuntimeError):
    """Misuse of a tape: stale values, double backward, mixed tapes."""


class ShapeError(ValueError):
    pass


class Tape:
    def __init__(self):
        self._nodes: list[Value] = []
        self._leaves: list[Value] = []
        self.generation = 0
        self._backward_done = False

    def leaf(self, data, requires_grad: bool = False) -> "Value":
        v = Value(np.array(data, dtype=np.float64), self, requires_grad=requires_grad)
        if requires_grad:
            self._leaves.append(v)
        return v

    def constant(self, data) -> "Value":
        return self.leaf(data, requires_grad=False)

    def reset(self):
        """Invalidate every value recorded so far and start a fresh record."""
        self._nodes = []
        self._leaves = []
        self.generation += 1
        self._backward_done = False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: "Value") -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns ``{id(leaf): grad}``."""
        loss._check(self)
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._backward_done:
            raise TapeError("backward already ran on this tape; call reset() first")
        self._backward_done = True

        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
            out[id(leaf)] = leaf.grad
        return out


class Value:
    __slots__ = ("data", "tape", "gen", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 1000  # make ndarray <op> Value defer to Value

    def __init__(self, data: np.ndarray, tape: Tape, requires_grad=False, parents=(), backward=None):
        self.data = data
        self.tape = tape
        self.gen = tape.generation
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _check(self, tape: Tape | None = None):
        if self.gen != self.tape.generation:
            raise TapeError("value belongs to a tape that has been reset")
        if tape is not None and tape is not self.tape:
            raise TapeError("values from different tapes cannot be combined")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return scalar_mul(self, -1.0)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------------------
# recording machinery


def _tape_of(args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Value):
            a._check()
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("values from different tapes cannot be combined")
    if tape is None:
        raise TapeError("operation needs at least one Value operand")
    return tape


def _lift(x, tape: Tape) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=np.float64), tape)


def _record(data: np.ndarray, parents: Sequence[Value], backward: Callable) -> Value:
    tape = parents[0].tape
    req = any(p.requires_grad for p in parents)
    out = Value(data, tape, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
        tape._nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Value, b: Value, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Value:
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Value:
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _record(out, (a, b), backward)


def scalar_mul(a: Value, c: float) -> Value:
    a._check()
    return _record(a.data * c, (a,), lambda g: (g * c,))


def sin(a: Value) -> Value:
    a._check()
    d = a.data
    return _record(np.sin(d), (a,), lambda g: (g * np.cos(d),))


def cos(a: Value) -> Value:
    a._check()
    d = a.data
    return _record(np.cos(d), (a,), lambda g: (-g * np.sin(d),))


def sqrt(a: Value) -> Value:
    a._check()
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a: Value) -> Value:  # noqa: A001 - mirrors numpy naming
    a._check()
    d = a.data
    return _record(np.abs(d), (a,), lambda g: (g * np.sign(d),))


def relu(a: Value) -> Value:
    a._check()
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Value) -> Value:
    a._check()
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def where(mask, a, b) -> Value:
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant boolean array."""
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _record(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Value, axis=None, keepdims=False) -> Value:  # noqa: A001
    a._check()
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Value, axis=None, keepdims=False) -> Value:
    a._check()
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: Value, shape) -> Value:
    a._check()
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Value) -> Value:
    """Swap the last two axes."""
    a._check()
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a: Value, idx) -> Value:
    a._check()
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[idx] = g  # basic slicing only: no repeated positions
        return (out,)

    return _record(a.data[idx], (a,), backward)


def concat(values: Sequence, axis: int = -1) -> Value:
    tape = _tape_of(values)
    values = [_lift(v, tape) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _record(data, values, lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> Value:
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _record(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# graph scatter/gather


class Segments:
    """Assignment of ``E`` rows to ``n`` groups, e.g. directed edges to receiving nodes."""

    def __init__(self, index: np.ndarray, n: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.n = int(n)
        E = len(self.index)
        self.matrix = sp.csr_matrix(
            (np.ones(E), (self.index, np.arange(E))), shape=(self.n, E)
        )
        self.counts = np.bincount(self.index, minlength=self.n)
        self._order = np.argsort(self.index, kind="stable")
        nonempty = self.counts > 0
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self._starts = starts[nonempty]
        self._nonempty = np.flatnonzero(nonempty)

    def __len__(self):
        return len(self.index)


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def gather(a: Value, seg: Segments) -> Value:
    """Rows ``a[seg.index]``."""
    a._check()
    shape = a.shape
    return _record(
        a.data[seg.index], (a,), lambda g: ((seg.matrix @ _rows(g)).reshape(shape),)
    )


def segment_sum(a: Value, seg: Segments) -> Value:
    a._check()
    tail = a.shape[1:]
    data = (seg.matrix @ _rows(a.data)).reshape((seg.n,) + tail)
    return _record(data, (a,), lambda g: (g[seg.index],))


def segment_max(a: Value, seg: Segments) -> Value:
    """Element-wise max over each group's rows; empty groups give 0.

    Ties share the incoming gradient equally.
    """
    a._check()
    x = a.data
    out = np.zeros((seg.n,) + x.shape[1:])
    if len(seg):
        xs = x[seg._order]
        out[seg._nonempty] = np.maximum.reduceat(xs, seg._starts, axis=0)
    hit = x == out[seg.index]
    ties = seg.matrix @ hit.astype(float)

    def backward(g):
        share = g / np.maximum(ties, 1.0)
        return (np.where(hit, share[seg.index], 0.0),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# fused network primitives


def l2_normalize(a: Value, eps: float = 0.0) -> Value:
    """Row-wise ``x / |x|``; zero rows map to zero with zero gradient."""
    a._check()
    x = a.data
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = n <= eps
    safe = np.where(zero, 1.0, n)
    y = np.where(zero, 0.0, x / safe)

    def backward(g):
        gx = (g - y * np.sum(y * g, axis=-1, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    return _record(y, (a,), backward)


def cross_entropy_with_logits(logits: Value, targets) -> Value:
    """Element-wise binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    logits._check()
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"targets shape {y.shape} != logits shape {z.shape}")
    # max(z,0) - z y + log(1 + exp(-|z|))
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return _record(out, (logits,), lambda g: (g * (s - y),))


def squash_node(omega: Value) -> Value:
    """Row-wise squash ``pi |w| w / (1 + |w|^2)`` (magnitude in ``[0, pi)``)."""
    omega._check()
    w = omega.data
    n = np.linalg.norm(w, axis=-1, keepdims=True)
    den = 1.0 + n * n
    out = np.pi * n * w / den
    safe = np.where(n > 0, n, 1.0)
    capped = np.pi * n * n / den > SQUASH_MAX
    out = np.where(capped, SQUASH_MAX * w / safe, out)

    def backward(g):
        wg = np.sum(w * g, axis=-1, keepdims=True)
        radial = np.where(n > 0, wg / safe, 0.0) * (1.0 - n * n) / den
        free = np.pi / den * (n * g + w * radial)
        # constant magnitude: only the tangential part of g survives
        tangential = SQUASH_MAX / safe * (g - w * wg / (safe * safe))
        return (np.where(capped, tangential, free),)

    return _record(out, (omega,), backward)


_HAT_BASIS = np.zeros((3, 9))
# hat(x, y, z) = [[0, -z, y], [z, 0, -x], [-y, x, 0]], row-major
_HAT_BASIS[0, [5, 7]] = [-1.0, 1.0]
_HAT_BASIS[1, [2, 6]] = [1.0, -1.0]
_HAT_BASIS[2, [1, 3]] = [-1.0, 1.0]


def hat_node(omega: Value) -> Value:
    """``(N, 3) -> (N, 3, 3)`` skew matrices."""
    return reshape(matmul(omega, _HAT_BASIS), omega.shape[:-1] + (3, 3))


def _rodrigues_terms(omega: Value, with_v: bool):
    """Return ``(W, W^2, a, b[, c])`` with coefficients shaped ``(N, 1, 1)``."""
    theta2_data = np.sum(omega.data ** 2, axis=-1)
    theta2 = sum(mul(omega, omega), axis=-1)
    small = theta2_data < SMALL_ANGLE ** 2
    safe2 = where(small, 1.0, theta2)
    theta = sqrt(safe2)
    a = where(small, 1.0 - theta2 * (1.0 / 6.0), sin(theta) / theta)
    half = scalar_mul(theta, 0.5)
    sinc_half = sin(half) / half
    b = where(small, 0.5 - theta2 * (1.0 / 24.0), scalar_mul(sinc_half * sinc_half, 0.5))
    W = hat_node(omega)
    W2 = matmul(W, W)
    col = omega.shape[:-1] + (1, 1)
    out = [W, W2, reshape(a, col), reshape(b, col)]
    if with_v:
        series = theta2_data < SERIES_ANGLE_V ** 2
        safe_v = where(series, 1.0, theta2)
        th = sqrt(safe_v)
        exact = (th - sin(th)) / (th * safe_v)
        approx = (1.0 / 6.0) - theta2 * (1.0 / 120.0) + theta2 * theta2 * (1.0 / 5040.0)
        out.append(reshape(where(series, approx, exact), col))
    return out


def so3_exp_node(omega: Value) -> Value:
    """Batched Rodrigues formula ``(N, 3) -> (N, 3, 3)``."""
    W, W2, a, b = _rodrigues_terms(omega, with_v=False)
    return add(np.eye(3), add(mul(a, W), mul(b, W2)))


def se3_exp_node(eps: Value) -> tuple[Value, Value]:
    """Batched SE(3) exponential of ``[v; w]`` rows, returns ``(R (N,3,3), t (N,3))``."""
    v, omega = eps[..., :3], eps[..., 3:]
    W, W2, a, b, c = _rodrigues_terms(omega, with_v=True)
    R = add(np.eye(3), add(mul(a, W), mul(b, W2)))
    V = add(np.eye(3), add(mul(b, W), mul(c, W2)))
    t = reshape(matmul(V, reshape(v, v.shape + (1,))), v.shape)
    return R, t


def pose_compose_node(Ra, ta, Rb, tb):
    """``(Ra, ta) * (Rb, tb)`` for stacks of poses; translations ``None`` for SO(3)."""
    R = matmul(Ra, Rb)
    if ta is None:
        return R, None
    tape = _tape_of((Ra, Rb, ta, tb))
    tb = _lift(tb, tape)
    t = add(reshape(matmul(Ra, reshape(tb, tb.shape + (1,))), tb.shape), ta)
    return R, t


def rotate(R, v) -> Value:
    """Batched ``R @ v`` for ``R (N,3,3)``, ``v (N,3)``."""
    tape = _tape_of((R, v))
    v = _lift(v, tape)
    return reshape(matmul(R, reshape(v, v.shape + (1,))), v.shape)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max entry-wise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


__all__ = [
    "Tape", "Value", "TapeError", "ShapeError", "Segments",
    "add", "sub", "mul", "div", "scalar_mul", "sin", "cos", "sqrt", "abs", "relu",
    "sigmoid", "where", "sum", "mean", "reshape", "transpose", "getitem", "concat",
    "matmul", "gather", "segment_sum", "segment_max", "l2_normalize",
    "cross_entropy_with_logits", "squash_node", "hat_node", "so3_exp_node",
    "se3_exp_node", "pose_compose_node", "rotate", "numeric_gradient", "relative_error",
]
