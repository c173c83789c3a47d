"""Elementary differentiable ops.

The arithmetic/activation set is add, sub, mul, div, matmul, relu, tanh,
sigmoid, exp, log, sum, mean, max-with-constant, L2-norm, softmax, concat,
slice and trilinear-gather. A handful of structural ops (reshape, transpose,
broadcast, row gather/scatter, slice padding) exist because the
vector-Jacobian rules of the main set need them.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .core import DiffValue, apply, as_value, register


# --------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: DiffValue, shape: tuple) -> DiffValue:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


# --------------------------------------------------------------------------
# arithmetic

def _add_vjp(g, ins, out, needs):
    a, b = ins
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def _sub_vjp(g, ins, out, needs):
    a, b = ins
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _mul_vjp(g, ins, out, needs):
    a, b = ins
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _div_vjp(g, ins, out, needs):
    a, b = ins
    ga = _unbroadcast(g / b, a.shape) if needs[0] else None
    gb = _unbroadcast(-(g * out) / b, b.shape) if needs[1] else None
    return ga, gb


register("add", np.add, _add_vjp)
register("sub", np.subtract, _sub_vjp)
register("mul", np.multiply, _mul_vjp)
register("div", np.divide, _div_vjp)


def add(a, b) -> DiffValue:
    return apply("add", a, b)


def sub(a, b) -> DiffValue:
    return apply("sub", a, b)


def mul(a, b) -> DiffValue:
    return apply("mul", a, b)


def div(a, b) -> DiffValue:
    return apply("div", a, b)


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    return a @ b


def _matmul_vjp(g, ins, out, needs):
    a, b = ins
    ga = matmul(g, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), g) if needs[1] else None
    return ga, gb


register("matmul", _matmul_fwd, _matmul_vjp)


def matmul(a, b) -> DiffValue:
    """2-D matrix product; a 1-D right operand is treated as a column."""
    a, b = as_value(a), as_value(b)
    if b.ndim == 1:
        return reshape(apply("matmul", a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim == 1:
        return reshape(apply("matmul", reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    return apply("matmul", a, b)


# --------------------------------------------------------------------------
# pointwise nonlinearities

def _relu_vjp(g, ins, out, needs):
    return (g * (ins[0].data > 0).astype(np.float64),)


def _tanh_vjp(g, ins, out, needs):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_vjp(g, ins, out, needs):
    return (g * (out * (1.0 - out)),)


def _exp_vjp(g, ins, out, needs):
    return (g * out,)


def _log_vjp(g, ins, out, needs):
    return (g / ins[0],)


def _maximum_fwd(x, c):
    return np.maximum(x, c)


def _maximum_vjp(g, ins, out, needs):
    x, c = ins
    mask = (x.data > c.data).astype(np.float64)
    return (_unbroadcast(g * mask, x.shape), None)


register("relu", lambda x: np.maximum(x, 0.0), _relu_vjp)
register("tanh", np.tanh, _tanh_vjp)
register("sigmoid", lambda x: _sigmoid_fwd(np.asarray(x, dtype=np.float64)), _sigmoid_vjp)
register("exp", np.exp, _exp_vjp)
register("log", np.log, _log_vjp)
register("maximum", _maximum_fwd, _maximum_vjp)


def relu(x) -> DiffValue:
    return apply("relu", x)


def tanh(x) -> DiffValue:
    return apply("tanh", x)


def sigmoid(x) -> DiffValue:
    return apply("sigmoid", x)


def exp(x) -> DiffValue:
    return apply("exp", x)


def log(x) -> DiffValue:
    return apply("log", x)


def maximum(x, c) -> DiffValue:
    """Elementwise max against a constant (no gradient flows to ``c``)."""
    c = c.data if isinstance(c, DiffValue) else c
    return apply("maximum", x, DiffValue(c))


def minimum(x, c) -> DiffValue:
    c = c.data if isinstance(c, DiffValue) else np.asarray(c, dtype=np.float64)
    return -maximum(-as_value(x), -c)


def clamp(x, lo, hi) -> DiffValue:
    return minimum(maximum(x, lo), hi)


def abs_(x) -> DiffValue:
    x = as_value(x)
    return relu(x) + relu(-x)


def elementwise_max(a, b) -> DiffValue:
    """max(a, b) for two differentiable operands."""
    return a + relu(b - a)


# --------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum_fwd(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _sum_vjp(g, ins, out, needs, axis=None, keepdims=False):
    x = ins[0]
    if not keepdims:
        axes = _norm_axis(axis, x.ndim)
        kshape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
        g = reshape(g, kshape)
    return (broadcast_to(g, x.shape),)


def _mean_fwd(x, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims)


def _mean_vjp(g, ins, out, needs, axis=None, keepdims=False):
    x = ins[0]
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    (gx,) = _sum_vjp(g, ins, out, needs, axis=axis, keepdims=keepdims)
    return (gx * (1.0 / count),)


register("sum", _sum_fwd, _sum_vjp)
register("mean", _mean_fwd, _mean_vjp)


def sum_(x, axis=None, keepdims: bool = False) -> DiffValue:
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> DiffValue:
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply("mean", x, axis=axis, keepdims=keepdims)


def _l2norm_fwd(x, axis=-1):
    return np.sqrt(np.sum(x * x, axis=axis, keepdims=True))


def _l2norm_vjp(g, ins, out, needs, axis=-1):
    x = ins[0]
    safe = out + (out.data == 0).astype(np.float64)
    return (g * (x / safe),)


register("l2norm", _l2norm_fwd, _l2norm_vjp)


def l2norm(x, axis: int = -1) -> DiffValue:
    """Euclidean norm along ``axis`` (kept as a size-1 axis)."""
    return apply("l2norm", x, axis=axis)


def _softmax_fwd(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_vjp(g, ins, out, needs, axis=-1):
    inner = sum_(g * out, axis=axis, keepdims=True)
    return (out * (g - inner),)


register("softmax", _softmax_fwd, _softmax_vjp)


def softmax(x, axis: int = -1) -> DiffValue:
    return apply("softmax", x, axis=axis)


def log_softmax(x, axis: int = -1) -> DiffValue:
    return log(softmax(x, axis=axis))


# --------------------------------------------------------------------------
# structural ops

def _reshape_vjp(g, ins, out, needs, shape):
    return (reshape(g, ins[0].shape),)


register("reshape", lambda x, shape: np.reshape(x, shape), _reshape_vjp)


def reshape(x, shape) -> DiffValue:
    return apply("reshape", x, shape=tuple(int(s) for s in shape))


def _transpose_vjp(g, ins, out, needs, axes):
    inv = tuple(np.argsort(axes)) if axes is not None else None
    return (transpose(g, inv),)


register("transpose", lambda x, axes: np.transpose(x, axes), _transpose_vjp)


def transpose(x, axes=None) -> DiffValue:
    if axes is not None:
        axes = tuple(int(a) for a in axes)
    return apply("transpose", x, axes=axes)


def _broadcast_vjp(g, ins, out, needs, shape):
    return (_unbroadcast(g, ins[0].shape),)


register("broadcast_to", lambda x, shape: np.array(np.broadcast_to(x, shape)), _broadcast_vjp)


def broadcast_to(x, shape) -> DiffValue:
    return apply("broadcast_to", x, shape=tuple(int(s) for s in shape))


def _concat_fwd(*xs, axis=0):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, ins, out, needs, axis=0):
    res = []
    start = 0
    ax = axis % g.ndim
    for x, need in zip(ins, needs):
        stop = start + x.shape[ax]
        if need:
            key = tuple(slice(start, stop) if i == ax else slice(None) for i in range(g.ndim))
            res.append(slice_(g, key))
        else:
            res.append(None)
        start = stop
    return tuple(res)


register("concat", _concat_fwd, _concat_vjp)


def concat(xs, axis: int = 0) -> DiffValue:
    return apply("concat", *xs, axis=axis)


def _normalize_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, np.integer)) and k is not Ellipsis:
            raise TypeError("slice_ supports basic indexing only; use gather for index arrays")
    return key


def _slice_vjp(g, ins, out, needs, key):
    return (unslice(g, key, ins[0].shape),)


def _unslice_fwd(g, key, shape):
    out = np.zeros(shape, dtype=np.float64)
    out[key] = g
    return out


def _unslice_vjp(g, ins, out, needs, key, shape):
    return (slice_(g, key),)


register("slice", lambda x, key: np.array(x[key]), _slice_vjp)
register("unslice", _unslice_fwd, _unslice_vjp)


def slice_(x, key) -> DiffValue:
    return apply("slice", x, key=_normalize_key(key))


def unslice(g, key, shape) -> DiffValue:
    """Embed ``g`` at ``key`` into a zero array of ``shape`` (adjoint of slice)."""
    return apply("unslice", g, key=_normalize_key(key), shape=tuple(shape))


def _scatter_matrix(idx: np.ndarray, n_rows: int) -> sp.csr_matrix:
    m = idx.shape[0]
    return sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n_rows, m))


def _gather_fwd(x, idx):
    return x[idx]


def _gather_vjp(g, ins, out, needs, idx):
    return (scatter_add(g, idx, ins[0].shape[0]),)


def _scatter_fwd(g, idx, n_rows):
    flat = g.reshape(g.shape[0], -1)
    res = np.asarray(_scatter_matrix(idx, n_rows) @ flat)
    return res.reshape((n_rows,) + g.shape[1:])


def _scatter_vjp(g, ins, out, needs, idx, n_rows):
    return (gather(g, idx),)


register("gather", _gather_fwd, _gather_vjp)
register("scatter_add", _scatter_fwd, _scatter_vjp)


def gather(x, idx) -> DiffValue:
    """Rows ``x[idx]`` for an integer index vector."""
    return apply("gather", x, idx=np.asarray(idx, dtype=np.int64))


def scatter_add(g, idx, n_rows: int) -> DiffValue:
    """Sum rows of ``g`` into ``n_rows`` buckets given by ``idx`` (adjoint of gather)."""
    return apply("scatter_add", g, idx=np.asarray(idx, dtype=np.int64), n_rows=int(n_rows))


# --------------------------------------------------------------------------
# trilinear gather

def trilinear(grid, coords) -> DiffValue:
    """Trilinearly interpolate ``grid`` (X, Y, Z, C) at ``coords`` (N, 3).

    ``coords`` are continuous voxel indices: voxel ``(i, j, k)`` has its centre
    at ``(i, j, k)``. Coordinates are clamped to the grid (edge voxels extend
    outwards). Differentiable with respect to both ``grid`` and ``coords``,
    including second derivatives with respect to ``coords``.
    """
    grid = as_value(grid)
    coords = as_value(coords)
    dims = np.array(grid.shape[:3])
    chans = grid.shape[3]
    u = clamp(coords, np.zeros(3), (dims - 1).astype(np.float64))
    base = np.floor(u.data).astype(np.int64)
    base = np.minimum(base, np.maximum(dims - 2, 0))
    frac = u - base.astype(np.float64)
    hi = np.minimum(base + 1, dims - 1)
    flat = reshape(grid, (-1, chans))
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    fx, fy, fz = frac[:, 0:1], frac[:, 1:2], frac[:, 2:3]
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    out = None
    for cx in (0, 1):
        ix = base[:, 0] if cx == 0 else hi[:, 0]
        for cy in (0, 1):
            iy = base[:, 1] if cy == 0 else hi[:, 1]
            wxy = wx[cx] * wy[cy]
            for cz in (0, 1):
                iz = base[:, 2] if cz == 0 else hi[:, 2]
                idx = ix * strides[0] + iy * strides[1] + iz * strides[2]
                term = gather(flat, idx) * (wxy * wz[cz])
                out = term if out is None else out + term
    return out


# --------------------------------------------------------------------------
# small composites used across the package

def square(x) -> DiffValue:
    x = as_value(x)
    return x * x


def linear(x, weight, bias=None) -> DiffValue:
    y = matmul(x, weight)
    return y if bias is None else y + bias


@lru_cache(maxsize=32)
def neighbor_table(dims: tuple, radius: int = 1) -> np.ndarray:
    """(V, K) flat indices of the (2r+1)^d neighbourhood; out-of-range -> V.

    Works for 2-D and 3-D grids. The sentinel ``V`` addresses a zero row
    appended by :func:`neighborhood_conv`.
    """
    dims = tuple(int(d) for d in dims)
    nvox = int(np.prod(dims))
    grids = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    offs = np.stack(np.meshgrid(*[np.arange(-radius, radius + 1)] * len(dims), indexing="ij"), -1)
    offs = offs.reshape(-1, len(dims))
    nb = coords[:, None, :] + offs[None, :, :]
    valid = np.all((nb >= 0) & (nb < np.array(dims)), axis=-1)
    strides = np.array([int(np.prod(dims[i + 1:])) for i in range(len(dims))])
    flat = (nb * strides).sum(-1)
    flat[~valid] = nvox
    flat.setflags(write=False)
    return flat


def neighborhood_conv(x, weight, bias, dims: tuple) -> DiffValue:
    """3x3(x3) convolution with zero padding on a flattened (V, C) grid.

    ``weight`` has shape (K * C, C_out) where K = 3**len(dims), ordered
    neighbour-major to match :func:`neighbor_table`.
    """
    x = as_value(x)
    nvox, chans = x.shape
    table = neighbor_table(tuple(dims))
    padded = concat([x, np.zeros((1, chans))], axis=0)
    cols = reshape(gather(padded, table.ravel()), (nvox, table.shape[1] * chans))
    return linear(cols, weight, bias)
