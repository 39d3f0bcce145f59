"""Minimal reverse-mode autodiff over numpy arrays.

Every op records its parents and a backward closure on the output tensor;
`backward()` walks the graph once in reverse topological order and
accumulates gradients into leaves marked `requires_grad`. float32 and
float64 are the only supported dtypes. Ops with more than one operand
require matching dtypes and exact shapes, except that `add`/`sub`/`mul`
accept a right operand whose shape is a trailing suffix of the left
(row-wise bias style); the suffix operand's gradient is summed over the
leading axes.

Matmul follows np.matmul semantics restricted to three cases: 2-D x 2-D,
batched x 2-D (shared weight), and batched x batched with identical
leading dims. Reductions and normalisations act on the last axis unless
an explicit axis argument says otherwise.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    GraphConsumedError,
    NumericError,
    ShapeError,
)

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A node in the autodiff graph: an ndarray plus backward bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], bw) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_dtypes(*ts: Tensor) -> None:
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"dtype mismatch: {d0} vs {t.data.dtype}")


def _suffix_ok(sa: tuple, sb: tuple) -> bool:
    return sa == sb or (len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb)


def _reduce_suffix(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the leading axes so it matches `shape`."""
    extra = g.ndim - len(shape)
    if extra == 0:
        return g
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not align")
    data = a.data + b.data

    def bw(g):
        _accum(a, g)
        _accum(b, _reduce_suffix(g, b.shape))

    return _result(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not align")
    data = a.data - b.data

    def bw(g):
        _accum(a, g)
        _accum(b, -_reduce_suffix(g, b.shape))

    return _result(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not align")
    data = a.data * b.data

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, _reduce_suffix(g * a.data, b.shape))

    return _result(data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * c

    def bw(g):
        _accum(x, g * c)

    return _result(data, (x,), bw)


def add_scalar(x: Tensor, c: float) -> Tensor:
    data = x.data + float(c)

    def bw(g):
        _accum(x, g)

    return _result(data, (x,), bw)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def bw(g):
        _accum(x, g * (x.data > 0))

    return _result(data, (x,), bw)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def bw(g):
        _accum(x, g * data)

    return _result(data, (x,), bw)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def bw(g):
        _accum(x, g / x.data)

    return _result(data, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout. Identity when train is False or p == 0.

    The mask is drawn from `rng` at call time, so training code must call
    dropout in a fixed order for reproducibility.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    keep *= 1.0 / (1.0 - p)
    data = x.data * keep

    def bw(g):
        _accum(x, g * keep)

    return _result(data, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim == 2:
        data = a.data @ b.data

        def bw(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    elif a.ndim >= 3 and b.ndim == 2:
        data = a.data @ b.data

        def bw(g):
            _accum(a, g @ b.data.T)
            k = a.shape[-1]
            _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        data = a.data @ b.data

        def bw(g):
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    else:
        raise ShapeError(f"matmul: unsupported operand ranks {a.shape} @ {b.shape}")
    return _result(data, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs >=2-D input, got {x.shape}")
    data = np.swapaxes(x.data, -1, -2).copy()

    def bw(g):
        _accum(x, np.swapaxes(g, -1, -2))

    return _result(data, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    data = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _result(data, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and normalisations (last axis unless an axis is given)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _result(data, (x,), bw)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    data = x.data.sum(axis=axis)

    def bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _result(data, (x,), bw)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Max over one axis. Gradient routes to the first occurrence of the max."""
    axis = _norm_axis(axis, x.ndim)
    idx = x.data.argmax(axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def bw(g):
        z = np.zeros_like(x.data)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _accum(x, z)

    return _result(data, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise DegenerateInputError("l2_normalize: zero vector")
    y = x.data / norms

    def bw(g):
        _accum(x, (g - y * (y * g).sum(axis=-1, keepdims=True)) / norms)

    return _result(y, (x,), bw)


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis vector to zero mean / unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g - g.mean(axis=-1, keepdims=True)
        _accum(x, inv * (gm - y * (g * y).mean(axis=-1, keepdims=True)))

    return _result(y, (x,), bw)


# ---------------------------------------------------------------------------
# structural ops


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    return _concat(xs, axis=0)


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    return _concat(xs, axis=-1)


def _concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of zero tensors")
    _check_dtypes(*xs)
    ref = list(xs[0].shape)
    ax = _norm_axis(axis, len(ref))
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] != ref[:ax] or s[ax + 1:] != ref[ax + 1:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {xs[0].shape}")
    data = np.concatenate([t.data for t in xs], axis=ax)
    sizes = [t.shape[ax] for t in xs]

    def bw(g):
        off = 0
        for t, n in zip(xs, sizes):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(off, off + n)
            _accum(t, g[tuple(sl)])
            off += n

    return _result(data, tuple(xs), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for {x.shape} axis {axis}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    data = x.data[tuple(sl)].copy()

    def bw(g):
        z = np.zeros_like(x.data)
        z[tuple(sl)] = g
        _accum(x, z)

    return _result(data, (x,), bw)


def slice_row(x: Tensor, i: int) -> Tensor:
    """Row i of a 2-D tensor, as a 1-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"slice_row expects 2-D input, got {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"slice_row: row {i} out of range for {x.shape}")
    data = x.data[i].copy()

    def bw(g):
        z = np.zeros_like(x.data)
        z[i] = g
        _accum(x, z)

    return _result(data, (x,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of x by an integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    data = x.data[idx].copy()

    def bw(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        _accum(x, z)

    return _result(data, (x,), bw)


def scatter_rows(v: Tensor, idx, n_rows: int, fill: float = 0.0) -> Tensor:
    """Place entries of 1-D v at positions idx of a length-n_rows vector.

    Unscattered positions hold the constant `fill` and pass no gradient.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if v.ndim != 1 or idx.shape != v.shape:
        raise ShapeError("scatter_rows: v and idx must be matching 1-D arrays")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"scatter_rows: index out of range for {n_rows} rows")
    if np.unique(idx).size != idx.size:
        raise ShapeError("scatter_rows: duplicate target positions")
    data = np.full((n_rows,), float(fill), dtype=v.data.dtype)
    data[idx] = v.data

    def bw(g):
        _accum(v, g[idx])

    return _result(data, (v,), bw)


def diag_part(x: Tensor) -> Tensor:
    """Main diagonal of a square 2-D tensor."""
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diag_part expects a square matrix, got {x.shape}")
    n = x.shape[0]
    data = np.diagonal(x.data).copy()

    def bw(g):
        z = np.zeros_like(x.data)
        z[np.arange(n), np.arange(n)] = g
        _accum(x, z)

    return _result(data, (x,), bw)


def _norm_axis(axis: int, ndim: int) -> int:
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar root. One shot per graph."""
    if root._consumed:
        raise GraphConsumedError("backward() already ran on this graph")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    root._consumed = True
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Release intermediates: activations and grad buffers of non-leaf nodes.
    for node in order:
        node._consumed = True
        if node._parents:
            node.grad = None
        node._parents = ()
        node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for t in params:
        t.grad = None


def finite_diff_check(f: Callable[[], Tensor], params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of f() against central differences.

    `params` is an iterable of (name, Tensor) leaves; f must rebuild its graph
    from those leaves on every call. Returns the worst relative error
    |analytic - fd| / max(|analytic|, |fd|, 1e-12) over every coordinate.
    """
    params = list(params)
    for _, t in params:
        t.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: non-finite loss")
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params
    }
    worst = 0.0
    for name, t in params:
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            rel = abs(float(aflat[i]) - fd) / max(abs(float(aflat[i])), abs(fd), 1e-12)
            if rel > worst:
                worst = rel
    return worst
