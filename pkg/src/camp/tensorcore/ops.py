"""Differentiable primitives over :class:`~camp.tensorcore.tensor.Tensor`.

Every op computes its result with numpy, wraps it in a fresh tensor, and, when
a tape is active and some input participates in differentiation, records a
closure that maps the output gradient to per-input gradients. Ops executed
with no active tape are plain numpy calls (the inference fast path).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import NonFiniteError, Tensor, TensorError, active_tape

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class OpError(TensorError):
    """Raised on operand shape/domain violations."""


def _finish(op: str, inputs: Sequence[Tensor], out_arr: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_arr, _own=True)
    tape = active_tape()
    if tape is not None and any(t._needs_grad for t in inputs):
        out._needs_grad = True
        out._op_output = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", (a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    return _finish("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient flows into ``c``)."""
    c = float(c)
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise OpError(f"matmul shape mismatch {a.shape} @ {b.shape}") from exc
    a_nd, b_nd = a.ndim, b.ndim
    # Skipping the untaken side matters: constant operands (adjacency,
    # pooling matrices) would otherwise cost a full extra GEMM each.
    need_a, need_b = a._needs_grad, b._needs_grad

    def bw(g: np.ndarray):
        ga = gb = None
        if a_nd == 1 and b_nd == 1:  # dot product
            return g * b.data, g * a.data
        if a_nd == 1:  # (n,) @ (..., n, p) -> (..., p)
            if need_a:
                ga = _unbroadcast(np.matmul(b.data, g[..., :, None])[..., 0], a.shape)
            if need_b:
                gb = _unbroadcast(a.data[:, None] * g[..., None, :], b.shape)
            return ga, gb
        if b_nd == 1:  # (..., m, n) @ (n,) -> (..., m)
            if need_a:
                ga = _unbroadcast(g[..., :, None] * b.data[None, :], a.shape)
            if need_b:
                gb = _unbroadcast(
                    np.matmul(a.data.swapaxes(-1, -2), g[..., :, None])[..., 0], b.shape
                )
            return ga, gb
        if need_a:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _finish("matmul", (a, b), out, bw)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise OpError("transpose_last2 needs rank >= 2")
    return _finish(
        "transpose_last2", (a,), a.data.swapaxes(-1, -2), lambda g: (g.swapaxes(-1, -2),)
    )


# ---------------------------------------------------------------------------
# shape surgery


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    return _finish("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise OpError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in tensors]
    split_at = np.cumsum(sizes)[:-1]

    def bw(g: np.ndarray):
        return tuple(np.split(g, split_at, axis=axis))

    return _finish("concat", tensors, out, bw)


def stack0(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise OpError("stack of zero tensors")
    out = np.stack([t.data for t in tensors], axis=0)

    def bw(g: np.ndarray):
        return tuple(g[i] for i in range(len(tensors)))

    return _finish("stack0", tensors, out, bw)


def expand0(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis; gradient sums back over it."""
    out = np.broadcast_to(a.data, (n,) + a.shape)
    return _finish("expand0", (a,), out, lambda g: (g.sum(axis=0),))


def index_rows(a: Tensor, idx) -> Tensor:
    """Gather rows (axis 0) by an integer index array; repeats accumulate."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise OpError(f"row index out of range for axis of length {a.shape[0]}")
    shape = a.shape

    def bw(g: np.ndarray):
        ga = np.zeros(shape, dtype=np.float64)
        np.add.at(ga, idx, g)
        return (ga,)

    return _finish("index_rows", (a,), a.data[idx], bw)


def row(a: Tensor, i: int) -> Tensor:
    """Extract row ``i`` of a matrix as a vector."""
    if a.ndim < 1:
        raise OpError("row() needs rank >= 1")
    if not 0 <= i < a.shape[0]:
        raise OpError(f"row index {i} out of range [0, {a.shape[0]})")
    shape = a.shape

    def bw(g: np.ndarray):
        ga = np.zeros(shape, dtype=np.float64)
        ga[i] = g
        return (ga,)

    return _finish("row", (a,), a.data[i], bw)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    d = a.shape[-1]
    if not (0 <= start <= stop <= d):
        raise OpError(f"slice [{start}:{stop}] out of range for width {d}")
    shape = a.shape

    def bw(g: np.ndarray):
        ga = np.zeros(shape, dtype=np.float64)
        ga[..., start:stop] = g
        return (ga,)

    return _finish("slice_last", (a,), a.data[..., start:stop], bw)


def take_per_row(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a matrix ``a``."""
    if a.ndim != 2:
        raise OpError("take_per_row needs a rank-2 tensor")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise OpError("take_per_row needs one column index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise OpError("column index out of range")
    rows_range = np.arange(a.shape[0])
    shape = a.shape

    def bw(g: np.ndarray):
        ga = np.zeros(shape, dtype=np.float64)
        ga[rows_range, idx] = g
        return (ga,)

    return _finish("take_per_row", (a,), a.data[rows_range, idx], bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish(
        "sum_all", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_axis0(a: Tensor) -> Tensor:
    if a.ndim < 1 or a.shape[0] == 0:
        raise OpError("mean_axis0 needs a non-empty leading axis")
    n = a.shape[0]
    shape = a.shape

    def bw(g: np.ndarray):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _finish("mean_axis0", (a,), a.data.mean(axis=0), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def softmax(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    if a.size == 0:
        raise OpError("softmax of an empty tensor")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g: np.ndarray):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", (a,), out, bw)


def log_softmax(a: Tensor) -> Tensor:
    if a.size == 0:
        raise OpError("log_softmax of an empty tensor")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g: np.ndarray):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", (a,), out, bw)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bw(g: np.ndarray):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _finish("gelu", (a,), out, bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise OpError(f"layer_norm gain/bias must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g.copy()
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _finish("layer_norm", (a, gain, bias), out, bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Callers gate this behind train mode; rate 0 is identity."""
    if not 0.0 <= rate < 1.0:
        raise OpError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep) / keep

    def bw(g: np.ndarray):
        return (g * mask,)

    return _finish("dropout", (a,), a.data * mask, bw)


# ---------------------------------------------------------------------------
# classification losses


def cross_entropy_rows(logits: Tensor, labels) -> Tensor:
    """Per-row -log softmax(logits)[label]; returns a length-N vector."""
    labels = np.asarray(labels, dtype=np.intp)
    return neg(take_per_row(log_softmax(logits), labels))


def apply_softmax(x) -> np.ndarray:
    """Plain-array softmax of a vector (no tape interaction)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise OpError("softmax of an empty vector")
    if not np.isfinite(arr).all():
        raise NonFiniteError("softmax input holds non-finite values")
    z = arr - arr.max()
    e = np.exp(z)
    return e / e.sum()
