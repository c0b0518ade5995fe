"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Tape` records every differentiable operation executed while it is active;
`backward` replays the record once in reverse to accumulate gradients. Tensors
are immutable; a tensor created outside any tape (or from untracked inputs) is
a constant and costs nothing extra at evaluation time.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericsError, ShapeError, StateError

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node=None, tape=None):
        arr = np.asarray(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.node = node
        self.tape = tape

    @classmethod
    def const(cls, data) -> "Tensor":
        """Untracked tensor; copies so later mutation of the source is harmless."""
        return cls(np.array(data, dtype=np.float64))

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.data.shape}{tag})"

    # Arithmetic sugar. Scalars go through shift/scale so the elementwise ops
    # keep their strict leading-batch broadcasting rule.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not provided")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; supports exactly one backward pass.

    Use as a context manager:

        with Tape() as tape:
            x = tape.leaf(values)
            loss = sum_all(mul(x, x))
        grads = backward(loss, tape)
    """

    def __init__(self):
        self._entries: list[tuple[int, tuple, Callable]] = []
        self._n_nodes = 0
        self._consumed = False

    def leaf(self, data) -> Tensor:
        """Register an input tensor whose gradient will be available."""
        t = Tensor(np.array(data, dtype=np.float64), node=self._new_node(), tape=self)
        return t

    def _new_node(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def _record(self, out_node, in_nodes, backward_fn):
        self._entries.append((out_node, in_nodes, backward_fn))

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()
        return False


class Gradient:
    """Result of one backward pass: per-node gradients of the loss."""

    def __init__(self, grads, tape):
        self._grads = grads
        self._tape = tape

    def wrt(self, tensor: Tensor) -> Tensor:
        """Gradient with respect to `tensor` (zeros if the loss never saw it)."""
        if tensor.tape is not self._tape or tensor.node is None:
            raise StateError("tensor was not recorded on the differentiated tape")
        g = self._grads[tensor.node]
        if g is None:
            return Tensor(np.zeros(tensor.data.shape))
        return Tensor(np.array(g, dtype=np.float64))


def backward(loss: Tensor, tape: Tape) -> Gradient:
    """Differentiate a scalar loss through a tape. Consumes the tape."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.tape is not tape or loss.node is None:
        raise StateError("backward: loss does not belong to this record")
    if tape._consumed:
        raise StateError("backward: record already consumed")
    tape._consumed = True

    grads: list = [None] * tape._n_nodes
    grads[loss.node] = np.ones(())
    for out_node, in_nodes, backward_fn in reversed(tape._entries):
        g = grads[out_node]
        if g is None:
            continue
        contributions = backward_fn(g)
        for nid, contrib in zip(in_nodes, contributions):
            if nid is None or contrib is None:
                continue
            if grads[nid] is None:
                grads[nid] = contrib
            else:
                grads[nid] = grads[nid] + contrib
    return Gradient(grads, tape)


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op output; register `backward_fn` if any input is tracked.

    `backward_fn(grad_out)` must return one gradient array (or None) per input,
    in order. This is the extension point other modules use to add primitives.
    """
    tape = _active_tape()
    if tape is None:
        return Tensor(out_data)
    nodes = tuple(
        t.node if (t.tape is tape and t.node is not None) else None for t in inputs
    )
    if all(n is None for n in nodes):
        return Tensor(out_data)
    out_node = tape._new_node()
    tape._record(out_node, nodes, backward_fn)
    return Tensor(out_data, node=out_node, tape=tape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.const(x)


def _require_finite(op: str, *arrays: np.ndarray):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericsError(f"{op}: non-finite input value")


def _batch_case(op: str, a: np.ndarray, b: np.ndarray) -> str:
    """Classify an elementwise pair: equal shapes, or one side lacking the
    leading batch dimension of the other. Anything else is a shape error."""
    if a.shape == b.shape:
        return "same"
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return "b_unbatched"
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return "a_unbatched"
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    case = _batch_case("add", a.data, b.data)
    _require_finite("add", a.data, b.data)
    out = a.data + b.data

    def bwd(g):
        ga = g.sum(axis=0) if case == "a_unbatched" else g
        gb = g.sum(axis=0) if case == "b_unbatched" else g
        return ga, gb

    return record_op(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    case = _batch_case("sub", a.data, b.data)
    _require_finite("sub", a.data, b.data)
    out = a.data - b.data

    def bwd(g):
        ga = g.sum(axis=0) if case == "a_unbatched" else g
        gb = g.sum(axis=0) if case == "b_unbatched" else g
        return ga, -gb

    return record_op(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    case = _batch_case("mul", a.data, b.data)
    _require_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        ga = g * bd
        gb = g * ad
        if case == "a_unbatched":
            ga = ga.sum(axis=0)
        if case == "b_unbatched":
            gb = gb.sum(axis=0)
        return ga, gb

    return record_op(out, (a, b), bwd)


def shift(a, c: float) -> Tensor:
    """a + c for a python scalar c."""
    a = _as_tensor(a)
    _require_finite("shift", a.data)
    if not np.isfinite(c):
        raise NumericsError("shift: non-finite constant")
    return record_op(a.data + c, (a,), lambda g: (g,))


def scale(a, c: float) -> Tensor:
    """a * c for a python scalar c."""
    a = _as_tensor(a)
    _require_finite("scale", a.data)
    if not np.isfinite(c):
        raise NumericsError("scale: non-finite constant")
    return record_op(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    _require_finite("matmul", ad, bd)
    out = ad @ bd

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return record_op(out, (a, b), bwd)


def conv2d(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of x[B,C,H,W] with k[F,C,Kh,Kw], zero padding."""
    x, k = _as_tensor(x), _as_tensor(k)
    xd, kd = x.data, k.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {xd.shape} and {kd.shape}")
    if xd.shape[1] != kd.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between {xd.shape} and {kd.shape}")
    if not (isinstance(stride, int) and stride >= 1):
        raise ShapeError(f"conv2d: stride must be a positive integer, got {stride!r}")
    if not (isinstance(pad, int) and pad >= 0):
        raise ShapeError(f"conv2d: pad must be a non-negative integer, got {pad!r}")
    _require_finite("conv2d", xd, kd)

    B, C, H, W = xd.shape
    F, _, Kh, Kw = kd.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    OH = (Hp - Kh) // stride + 1
    OW = (Wp - Kw) // stride + 1
    if Hp < Kh or Wp < Kw or OH < 1 or OW < 1:
        raise ShapeError(f"conv2d: kernel {kd.shape} does not fit input {xd.shape} with pad {pad}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (Kh, Kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bcijkl,fckl->bfij", win, kd, optimize=True)

    def bwd(g):
        gk = np.einsum("bcijkl,bfij->fckl", win, g, optimize=True)
        # Input gradient: dilate g by the stride, pad by the kernel size, and
        # correlate with the flipped kernel (transposed convolution).
        z = np.zeros((B, F, (OH - 1) * stride + 1, (OW - 1) * stride + 1))
        z[:, :, ::stride, ::stride] = g
        zp = np.pad(z, ((0, 0), (0, 0), (Kh - 1, Kh - 1), (Kw - 1, Kw - 1)))
        win2 = sliding_window_view(zp, (Kh, Kw), axis=(2, 3))
        kf = kd[:, :, ::-1, ::-1]
        gcov = np.einsum("bfijkl,fckl->bcij", win2, kf, optimize=True)
        gxp = np.zeros((B, C, Hp, Wp))
        gxp[:, :, : gcov.shape[2], : gcov.shape[3]] = gcov
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp[:, :, :H, :W]
        return gx, gk

    return record_op(out, (x, k), bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    _require_finite("relu", x.data)
    xd = x.data
    out = np.maximum(xd, 0.0)
    return record_op(out, (x,), lambda g: (g * (xd > 0.0),))


def maxpool2d(x, window: int, stride: int) -> Tensor:
    """Max pooling over x[B,C,H,W]; ties go to the first position in row-major
    scan order within the window."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d: need 4-D input, got {xd.shape}")
    if not (isinstance(window, int) and window >= 1 and isinstance(stride, int) and stride >= 1):
        raise ShapeError(f"maxpool2d: window/stride must be positive integers, got {window!r}/{stride!r}")
    B, C, H, W = xd.shape
    if H < window or W < window:
        raise ShapeError(f"maxpool2d: window {window} does not fit input {xd.shape}")
    _require_finite("maxpool2d", xd)

    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    OH, OW = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, OH, OW, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(xd)
        bi, ci, oi, oj = np.indices((B, C, OH, OW))
        ii = oi * stride + arg // window
        jj = oj * stride + arg % window
        np.add.at(gx, (bi, ci, ii, jj), g)
        return (gx,)

    return record_op(out, (x,), bwd)


def log_softmax(z) -> Tensor:
    """Row-wise log softmax of z[B,K], numerically stabilized."""
    z = _as_tensor(z)
    zd = z.data
    if zd.ndim != 2:
        raise ShapeError(f"log_softmax: need a 2-D batch of logits, got {zd.shape}")
    _require_finite("log_softmax", zd)
    m = zd.max(axis=1, keepdims=True)
    s = zd - m
    out = s - np.log(np.exp(s).sum(axis=1, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return record_op(out, (z,), bwd)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    _require_finite("sigmoid", x.data)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions, reshaping, selection


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    _require_finite("sum_all", x.data)
    shape = x.data.shape
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    _require_finite("mean_all", x.data)
    shape = x.data.shape
    n = x.data.size

    def bwd(g):
        return (np.broadcast_to(g / n, shape),)

    return record_op(np.asarray(x.data.mean()), (x,), bwd)


def pick_class(t, labels) -> Tensor:
    """Select t[i, labels[i]] for each row of t[B,K]."""
    t = _as_tensor(t)
    td = t.data
    idx = np.asarray(labels, dtype=np.int64)
    if td.ndim != 2 or idx.ndim != 1 or idx.shape[0] != td.shape[0]:
        raise ShapeError(f"pick_class: rows {td.shape} vs labels {idx.shape} do not conform")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= td.shape[1]:
        raise ShapeError(f"pick_class: label out of range for {td.shape[1]} classes")
    _require_finite("pick_class", td)
    rows = np.arange(td.shape[0])
    out = td[rows, idx]

    def bwd(g):
        gt = np.zeros_like(td)
        gt[rows, idx] = g
        return (gt,)

    return record_op(out, (t,), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return record_op(out, (x,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: need at least one tensor")
    shape = ts[0].data.shape
    for t in ts:
        if t.data.shape != shape:
            raise ShapeError(f"stack: mixed shapes {shape} and {t.data.shape}")
    out = np.stack([t.data for t in ts])

    def bwd(g):
        return tuple(g[i] for i in range(len(ts)))

    return record_op(out, ts, bwd)


def clamp01(x) -> Tensor:
    """Clip to [0,1] forward; identity backward. Used only to trim the
    <=1-ulp rounding spill of convex pixel blends, so the straight-through
    gradient is exact almost everywhere."""
    x = _as_tensor(x)
    _require_finite("clamp01", x.data)
    return record_op(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, point, h: float = 1e-6) -> float:
    """Max relative error between the analytic gradient of the scalar function
    `f` at `point` and central finite differences with step `h`.

    Error per coordinate is |analytic - numeric| / max(1e-12, |numeric|).
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    p0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    with Tape() as tape:
        leaf = tape.leaf(p0)
        out = f(leaf)
    if out.data.ndim != 0:
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {out.data.shape}")
    analytic = backward(out, tape).wrt(leaf).data

    def eval_at(arr: np.ndarray) -> float:
        v = f(Tensor.const(arr)).data
        if not np.isfinite(v):
            raise NumericsError("finite_diff_check: f evaluated to a non-finite value")
        return float(v)

    worst = 0.0
    flat = p0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        numeric = (eval_at(xp.reshape(p0.shape)) - eval_at(xm.reshape(p0.shape))) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1e-12, abs(numeric))
        worst = max(worst, err)
    return worst
