"""Small reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every primitive evaluated while it is active; calling
:meth:`Tape.gradient` walks the recorded nodes once in reverse order. The tape
is rebuilt every training step.

    with Tape() as tape:
        y = ops.mean(ops.matmul(a, b))
    grads = tape.gradient(y, {"a": a, "b": b})
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse
from scipy.special import expit, logsumexp


class ShapeError(ValueError):
    pass


_TAPES: list["Tape"] = []
_DETERMINISTIC = [False]
# row-count granularity for the deterministic matmul path (see matmul)
_DET_BLOCK = 64


@contextlib.contextmanager
def deterministic(enabled: bool = True) -> Iterator[None]:
    """Make matmul results independent of the number of rows in the batch."""
    prev = _DETERMINISTIC[0]
    _DETERMINISTIC[0] = enabled
    try:
        yield
    finally:
        _DETERMINISTIC[0] = prev


@contextlib.contextmanager
def no_trace() -> Iterator[None]:
    """Temporarily suspend recording on the active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


class Tensor:
    """A dense array, optionally tracked by the active tape.

    ``requires_grad`` marks a leaf parameter. Results of primitives are
    tracked whenever at least one input is.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

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
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    leaf: Tensor | None = None


class Tape:
    """Ordered record of primitive applications.

    Parents always precede their children, so a single reverse sweep suffices.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _watch(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            t._tape = self
            t._node = len(self.nodes)
            self.nodes.append(_Node((), None, leaf=t))
            return t._node
        return None

    def gradient(self, loss: Tensor, params) -> dict:
        """d(loss)/d(param) for each entry of ``params`` (a dict or a sequence).

        Parameters the loss does not depend on receive zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        named = params if isinstance(params, dict) else dict(enumerate(params))
        out = {k: np.zeros_like(p.data) for k, p in named.items()}
        if loss._tape is not self:
            return out
        by_node = {p._node: k for k, p in named.items() if p._tape is self}
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for idx in range(loss._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.leaf is not None:
                if idx in by_node:
                    out[by_node[idx]] = g
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pid < 0 or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return out


def backward(tape: Tape, loss: Tensor, params) -> dict:
    return tape.gradient(loss, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._tape = None
    out._node = -1
    if not _TAPES:
        return out
    tape = _TAPES[-1]
    ids = []
    for t in inputs:
        nid = tape._watch(t)
        ids.append(-1 if nid is None else nid)
    if all(i < 0 for i in ids):
        return out
    out._tape = tape
    out._node = len(tape.nodes)
    tape.nodes.append(_Node(tuple(ids), vjp))
    return out


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _record(out, (x,), lambda g: (g * (out > 0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.logaddexp(0, xd).astype(x.dtype), (x,), lambda g: (g * expit(xd),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _record(out, (x,), lambda g: (g * out * (1 - out),))


# ---------------------------------------------------------------- structural

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    if np.dtype(dtype) == src:
        return x
    return _record(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    src, dt = x.shape, x.dtype

    idx = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in idx)

    def vjp(g):
        full = np.zeros(src, dtype=dt)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record(np.asarray(x.data[index]), (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            i != ax and m != n for i, (m, n) in enumerate(zip(t.shape, ref.shape))
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=ax), ts,
                   lambda g: tuple(np.split(g, bounds, axis=ax)))


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("gather: indices must be integers")
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for axis of length {n} in shape {x.shape}")
    src, dt = x.shape, x.dtype
    ax = axis % x.ndim

    def vjp(g):
        full = np.zeros(src, dtype=dt)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _record(np.take(x.data, idx, axis=ax), (x,), vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    n = x.data.size if axis is None else int(np.prod([src[a] for a in np.atleast_1d(axis)]))
    dt = x.dtype

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / dt.type(n), src).copy(),)

    return _record(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), vjp)


def cumsum(x: Tensor, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Running sum; ``exclusive`` shifts so element i sums entries before i."""
    c = np.cumsum(x.data, axis=axis)
    if exclusive:
        c = c - x.data

    def vjp(g):
        r = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (r - g if exclusive else r,)

    return _record(c, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------- linear algebra

def _det_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS takes different code paths for small row counts; padding the rows
    # to a fixed block keeps each output row independent of the batch size.
    if a.ndim != 2:
        return a @ b
    m = a.shape[0]
    padded = -(-m // _DET_BLOCK) * _DET_BLOCK
    if padded == m:
        return a @ b
    buf = np.zeros((padded, a.shape[1]), dtype=a.dtype)
    buf[:m] = a
    return (buf @ b)[:m]


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.ndim != 2:
        if not (a.ndim == 1 and b.ndim == 1):
            raise ShapeError(f"matmul: only 2-D and vector operands supported, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = _det_matmul(ad, bd) if _DETERMINISTIC[0] else ad @ bd

    def vjp(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _record(np.asarray(out), (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` for 2-D x."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes x{x.shape}, w{w.shape}, b{b.shape}")
    xd, wd = x.data, w.data
    out = _det_matmul(xd, wd) if _DETERMINISTIC[0] else xd @ wd
    out += b.data
    return _record(out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(0)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation. x: (N, Cin, H, W); w: (Cout, Cin, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    xshape, pshape = x.shape, xp.shape

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    gcols[..., i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding : padding + xshape[2], padding : padding + xshape[3]]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(np.ascontiguousarray(out), inputs, vjp)


# ---------------------------------------------------------------- losses

def mse(pred, target) -> Tensor:
    """Squared error summed over the last axis, averaged over rows.

    For 1-D inputs this is the ordinary mean of squared differences.
    """
    pred, target = _coerce(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    rows = diff.shape[0] if diff.ndim else 1
    scale = diff.dtype.type(2.0 / rows)
    return _record(np.asarray((diff * diff).sum() / rows), (pred, target),
                   lambda g: (g * scale * diff, -g * scale * diff))


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy. logits: (N, K); labels: (N,) ints in [0, K)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    ld = logits.data
    lse = logsumexp(ld, axis=1)
    rows = np.arange(len(labels))
    n = len(labels)
    loss = (lse - ld[rows, labels]).sum() / n

    def vjp(g):
        p = np.exp(ld - lse[:, None])
        p[rows, labels] -= 1
        return ((g / n) * p,)

    return _record(np.asarray(loss, dtype=ld.dtype), (logits,), vjp)


# ---------------------------------------------------------------- sampling

def bilinear_sample_2d(fmap: Tensor, uv, valid: np.ndarray | None = None) -> Tensor:
    """Bilinear lookup of a (C, H, W) map at continuous texel coordinates.

    ``uv[:, 0]`` indexes columns and ``uv[:, 1]`` rows; the admissible range is
    ``[0, W-1] x [0, H-1]``. Rows flagged false in ``valid`` return zeros and
    are exempt from the range check. Returns (P, C).
    """
    uv = as_tensor(uv)
    if fmap.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError(f"bilinear_sample_2d: featuremap {fmap.shape}, uv {uv.shape}")
    c, h, w = fmap.shape
    u, v = uv.data[:, 0], uv.data[:, 1]
    ok = np.ones(len(u), bool) if valid is None else np.asarray(valid, bool)
    bad = ok & ~((u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1))
    if bad.any():
        raise ValueError(f"bilinear_sample_2d: {int(bad.sum())} coordinates outside "
                         f"[0, {w - 1}] x [0, {h - 1}]")
    u = np.where(ok, u, 0)
    v = np.where(ok, v, 0)
    x0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0).astype(fmap.dtype)
    fy = (v - y0).astype(fmap.dtype)
    okf = ok.astype(fmap.dtype)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1) * okf[:, None]
    cols = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    p = len(u)
    smat = scipy.sparse.csr_matrix(
        (wts.ravel(), cols.ravel(), np.arange(0, 4 * p + 1, 4)), shape=(p, h * w)
    )
    flat = fmap.data.reshape(c, h * w)
    out = np.asarray(smat @ flat.T, dtype=fmap.dtype)

    def vjp(g):
        gmap = np.asarray(smat.T @ g).T.reshape(c, h, w).astype(fmap.dtype)
        if not (uv._tape is not None or uv.requires_grad):
            return gmap, None
        f00, f01 = flat[:, cols[:, 0]].T, flat[:, cols[:, 1]].T
        f10, f11 = flat[:, cols[:, 2]].T, flat[:, cols[:, 3]].T
        du = (1 - fy)[:, None] * (f01 - f00) + fy[:, None] * (f11 - f10)
        dv = (1 - fx)[:, None] * (f10 - f00) + fx[:, None] * (f11 - f01)
        guv = np.stack([(g * du).sum(1), (g * dv).sum(1)], axis=1) * okf[:, None]
        return gmap, guv.astype(uv.dtype)

    return _record(out, (fmap, uv), vjp)


__all__ = [
    "Tape", "Tensor", "ShapeError", "backward", "deterministic", "no_trace", "as_tensor",
    "add", "sub", "mul", "div", "relu", "exp", "log", "softplus", "sigmoid", "reshape",
    "transpose", "getitem", "concat", "gather", "stack", "sum", "mean", "cumsum", "softmax",
    "matmul", "linear", "conv2d", "mse", "cross_entropy_with_logits", "bilinear_sample_2d",
]
