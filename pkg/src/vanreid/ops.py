"""Op kinds for the autodiff engine, plus thin builder helpers.

Binary ops require equal shapes; the only broadcasting allowed anywhere is a
size-1 operand against a tensor. Everything else that needs shape alignment
goes through an explicit ``tile``.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, apply, register_op

__all__ = [
    "add",
    "mul",
    "sub",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "relu",
    "sigmoid",
    "softmax",
    "concat",
    "mean",
    "variance",
    "reshape",
    "transpose",
    "slice_",
    "tile",
    "pow_",
    "embedding_lookup",
    "cross_entropy",
    "euclidean_distance",
    "sum_",
    "as_tensor",
]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_elementwise(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # Scalar operand: fold the whole gradient back onto it.
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


# ---------------------------------------------------------------- elementwise


def _add_fwd(a, b):
    _check_elementwise("add", a, b)
    return a + b


def _add_bwd(g, out, a, b):
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


register_op("add", _add_fwd, _add_bwd)


def _mul_fwd(a, b):
    _check_elementwise("mul", a, b)
    return a * b


def _mul_bwd(g, out, a, b):
    return _reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)


register_op("mul", _mul_fwd, _mul_bwd)


def _relu_fwd(x):
    return np.maximum(x, 0.0)


def _relu_bwd(g, out, x):
    return (g * (x > 0.0),)


register_op("relu", _relu_fwd, _relu_bwd)


def _sigmoid_fwd(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_bwd(g, out, x):
    return (g * out * (1.0 - out),)


register_op("sigmoid", _sigmoid_fwd, _sigmoid_bwd)


def _pow_fwd(x, exponent):
    if exponent != int(exponent) and (x < 0).any():
        raise ValueError("pow: fractional exponent on negative entries")
    if exponent < 0 and (x == 0).any():
        raise ValueError("pow: negative exponent on zero entries")
    return x**exponent


def _pow_bwd(g, out, x, exponent):
    return (g * exponent * x ** (exponent - 1.0),)


register_op("pow", _pow_fwd, _pow_bwd)


# --------------------------------------------------------------- contractions


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(g, out, a, b):
    return g @ b.swapaxes(-1, -2), a.swapaxes(-1, -2) @ g


register_op("matmul", _matmul_fwd, _matmul_bwd)


def _conv2d_check(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and weight, got {x.shape}, {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if w.shape[2] > 7:
        raise ValueError(f"conv2d: kernel size {w.shape[2]} > 7")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: negative padding {padding}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: channel mismatch, input {x.shape[1]} vs weight {w.shape[1]}")
    k = w.shape[2]
    ho = (x.shape[2] + 2 * padding - k) // stride + 1
    wo = (x.shape[3] + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: empty output for input {x.shape}, kernel {k}, stride {stride}, padding {padding}")
    return k, ho, wo


def _conv2d_fwd(x, w, stride, padding):
    k, ho, wo = _conv2d_check(x, w, stride, padding)
    b, cin, _, _ = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((b, cout, ho, wo))
    for di in range(k):
        for dj in range(k):
            xs = xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
            out += np.tensordot(xs, w[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)
    return out


def _conv2d_bwd(g, out, x, w, stride, padding):
    k, ho, wo = _conv2d_check(x, w, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for di in range(k):
        for dj in range(k):
            sl = np.s_[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
            gw[:, :, di, dj] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            gxp[sl] += np.tensordot(g, w[:, :, di, dj], axes=([1], [0])).transpose(0, 3, 1, 2)
    if padding:
        gx = gxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
    else:
        gx = gxp
    return gx, gw


register_op("conv2d", _conv2d_fwd, _conv2d_bwd)


# ----------------------------------------------------------------- structural


def _softmax_fwd(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_bwd(g, out, x, axis):
    dot = (g * out).sum(axis=axis, keepdims=True)
    return ((g - dot) * out,)


register_op("softmax", _softmax_fwd, _softmax_bwd)


def _concat_fwd(*arrays, axis):
    if not arrays:
        raise ValueError("concat: no inputs")
    base = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != len(base):
            raise ValueError(f"concat: rank mismatch {base} vs {a.shape}")
        for d in range(len(base)):
            if d != axis and a.shape[d] != base[d]:
                raise ValueError(f"concat: extent mismatch on axis {d}: {base} vs {a.shape}")
    return np.concatenate(arrays, axis=axis)


def _concat_bwd(g, out, *arrays, axis):
    grads = []
    offset = 0
    idx = [slice(None)] * g.ndim
    for a in arrays:
        idx[axis] = slice(offset, offset + a.shape[axis])
        grads.append(g[tuple(idx)])
        offset += a.shape[axis]
    return tuple(grads)


register_op("concat", _concat_fwd, _concat_bwd)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    return tuple(a % ndim for a in axes)


def _restore_shape(g, src_shape, axes, keepdims):
    if keepdims:
        return g
    shape = list(src_shape)
    for a in axes:
        shape[a] = 1
    return g.reshape(shape)


def _mean_fwd(x, axes, keepdims):
    return np.mean(x, axis=_norm_axes(axes, x.ndim), keepdims=keepdims)


def _mean_bwd(g, out, x, axes, keepdims):
    ax = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in ax]))
    ge = _restore_shape(g, x.shape, ax, keepdims)
    return (np.broadcast_to(ge, x.shape) / n,)


register_op("mean", _mean_fwd, _mean_bwd)


def _variance_fwd(x, axes, keepdims):
    return np.var(x, axis=_norm_axes(axes, x.ndim), keepdims=keepdims)


def _variance_bwd(g, out, x, axes, keepdims):
    ax = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in ax]))
    mu = np.mean(x, axis=ax, keepdims=True)
    ge = np.broadcast_to(_restore_shape(g, x.shape, ax, keepdims), x.shape)
    return (ge * 2.0 * (x - mu) / n,)


register_op("variance", _variance_fwd, _variance_bwd)


def _reshape_fwd(x, shape):
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    return x.reshape(shape)


def _reshape_bwd(g, out, x, shape):
    return (g.reshape(x.shape),)


register_op("reshape", _reshape_fwd, _reshape_bwd)


def _transpose_fwd(x, axes):
    return np.transpose(x, axes)


def _transpose_bwd(g, out, x, axes):
    if axes is None:
        return (np.transpose(g),)
    inv = np.argsort(axes)
    return (np.transpose(g, inv),)


register_op("transpose", _transpose_fwd, _transpose_bwd)


def _slice_norm(bounds, shape):
    if len(bounds) != len(shape):
        raise ValueError(f"slice: {len(bounds)} bounds for rank {len(shape)}")
    out = []
    for d, b in enumerate(bounds):
        if b is None:
            out.append((0, shape[d]))
            continue
        start, stop = b
        if not (0 <= start <= stop <= shape[d]):
            raise ValueError(f"slice: bounds {b} out of range for axis {d} of extent {shape[d]}")
        out.append((int(start), int(stop)))
    return tuple(out)


def _slice_fwd(x, bounds):
    nb = _slice_norm(bounds, x.shape)
    return x[tuple(slice(s, e) for s, e in nb)]


def _slice_bwd(g, out, x, bounds):
    nb = _slice_norm(bounds, x.shape)
    gx = np.zeros_like(x)
    gx[tuple(slice(s, e) for s, e in nb)] = g
    return (gx,)


register_op("slice", _slice_fwd, _slice_bwd)


def _tile_fwd(x, reps):
    if len(reps) != x.ndim:
        raise ValueError(f"tile: {len(reps)} reps for rank {x.ndim}")
    if any(r < 1 for r in reps):
        raise ValueError(f"tile: reps must be positive, got {tuple(reps)}")
    return np.tile(x, reps)


def _tile_bwd(g, out, x, reps):
    # Fold each tiled axis: view as (r0, s0, r1, s1, ...) and sum the r axes.
    shape = []
    for r, s in zip(reps, x.shape):
        shape.extend((r, s))
    gx = g.reshape(shape).sum(axis=tuple(range(0, 2 * x.ndim, 2)))
    return (gx,)


register_op("tile", _tile_fwd, _tile_bwd)


# ------------------------------------------------------------------- lookups


def _embedding_fwd(table, indices):
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"embedding-lookup: indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding-lookup: index out of range for table of {table.shape[0]} rows"
        )
    return table[idx]


def _embedding_bwd(g, out, table, indices):
    gt = np.zeros_like(table)
    np.add.at(gt, np.asarray(indices), g)
    return (gt,)


register_op("embedding-lookup", _embedding_fwd, _embedding_bwd)


def _xent_check(logits, labels):
    lab = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross-entropy: logits must be (batch, classes), got {logits.shape}")
    if lab.shape != (logits.shape[0],):
        raise ValueError(f"cross-entropy: labels shape {lab.shape} for batch {logits.shape[0]}")
    if lab.size and (lab.min() < 0 or lab.max() >= logits.shape[1]):
        raise IndexError(f"cross-entropy: label out of range for {logits.shape[1]} classes")
    return lab


def _xent_fwd(logits, labels):
    lab = _xent_check(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(z.shape[0]), lab]
    return np.asarray(np.mean(lse - picked))


def _xent_bwd(g, out, logits, labels):
    lab = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(p.shape[0]), lab] -= 1.0
    return (g * p / p.shape[0],)


register_op("cross-entropy", _xent_fwd, _xent_bwd)


_EUCLID_CHUNK = 64


def _euclid_check(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"euclidean-distance: need (n, d) and (m, d), got {a.shape}, {b.shape}")


def _euclid_fwd(a, b):
    # Row-chunked difference sums keep memory bounded and make d(x, x) an
    # exact zero, which the gram-matrix shortcut does not.
    _euclid_check(a, b)
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], _EUCLID_CHUNK):
        hi = min(lo + _EUCLID_CHUNK, a.shape[0])
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.sqrt((diff * diff).sum(axis=2))
    return out


def _euclid_bwd(g, out, a, b):
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    for lo in range(0, a.shape[0], _EUCLID_CHUNK):
        hi = min(lo + _EUCLID_CHUNK, a.shape[0])
        diff = a[lo:hi, None, :] - b[None, :, :]
        d = out[lo:hi]
        scale = np.where(d > 0.0, g[lo:hi] / np.where(d > 0.0, d, 1.0), 0.0)
        ga[lo:hi] = (scale[:, :, None] * diff).sum(axis=1)
        gb -= (scale[:, :, None] * diff).sum(axis=0)
    return ga, gb


register_op("euclidean-distance", _euclid_fwd, _euclid_bwd)


# ------------------------------------------------------------------ builders


def add(a, b) -> Tensor:
    return apply("add", [as_tensor(a), as_tensor(b)])


def mul(a, b) -> Tensor:
    return apply("mul", [as_tensor(a), as_tensor(b)])


def neg(a) -> Tensor:
    return mul(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def div(a, b) -> Tensor:
    return mul(a, pow_(b, -1.0))


def pow_(x, exponent: float) -> Tensor:
    return apply("pow", [as_tensor(x)], exponent=float(exponent))


def matmul(a, b) -> Tensor:
    return apply("matmul", [as_tensor(a), as_tensor(b)])


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    return apply("conv2d", [as_tensor(x), as_tensor(w)], stride=int(stride), padding=int(padding))


def relu(x) -> Tensor:
    return apply("relu", [as_tensor(x)])


def sigmoid(x) -> Tensor:
    return apply("sigmoid", [as_tensor(x)])


def softmax(x, axis: int = -1) -> Tensor:
    return apply("softmax", [as_tensor(x)], axis=int(axis))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply("concat", [as_tensor(t) for t in tensors], axis=int(axis))


def mean(x, axes=None, keepdims: bool = False) -> Tensor:
    return apply("mean", [as_tensor(x)], axes=axes, keepdims=bool(keepdims))


def variance(x, axes=None, keepdims: bool = False) -> Tensor:
    return apply("variance", [as_tensor(x)], axes=axes, keepdims=bool(keepdims))


def reshape(x, shape) -> Tensor:
    return apply("reshape", [as_tensor(x)], shape=tuple(int(s) for s in shape))


def transpose(x, axes=None) -> Tensor:
    return apply("transpose", [as_tensor(x)], axes=None if axes is None else tuple(axes))


def slice_(x, bounds) -> Tensor:
    return apply("slice", [as_tensor(x)], bounds=tuple(bounds))


def tile(x, reps) -> Tensor:
    return apply("tile", [as_tensor(x)], reps=tuple(int(r) for r in reps))


def embedding_lookup(table, indices) -> Tensor:
    return apply("embedding-lookup", [as_tensor(table)], indices=np.asarray(indices))


def cross_entropy(logits, labels) -> Tensor:
    return apply("cross-entropy", [as_tensor(logits)], labels=np.asarray(labels))


def euclidean_distance(a, b) -> Tensor:
    return apply("euclidean-distance", [as_tensor(a), as_tensor(b)])


def sum_(x, axes=None) -> Tensor:
    """Sum composed as mean times element count, keeping the op set small."""
    t = as_tensor(x)
    ax = _norm_axes(axes, t.ndim)
    n = int(np.prod([t.shape[a] for a in ax])) if t.ndim else 1
    return mul(mean(t, axes=axes), float(n))
