"""Tape-based reverse-mode differentiation over numpy arrays.

Operations are recorded on the innermost active :class:`Tape`; outside a tape
(or inside :func:`no_grad`) they evaluate eagerly and record nothing.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape():
    ...     loss = (w * w).sum()
    >>> backward(loss)
    >>> w.grad
    array([2., 2., 2.])
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_active: list["Tape | None"] = []


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an active tape."""
    _active.append(None)
    try:
        yield
    finally:
        _active.pop()


def _current_tape():
    return _active[-1] if _active else None


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_tape", "_node")

    def __init__(self, value, requires_grad=False, name=None):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def node_id(self):
        return self._node

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        out._node = len(tape.nodes)
        tape.nodes.append((out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ancestor of ``loss`` with d loss / d tensor.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad``
    between steps.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not recorded on a tape (no parameter requires grad?)")
    pending = {id(loss): np.ones_like(loss.value)}
    owned = set()  # keys whose pending buffer was allocated here and may be updated in place
    leaves = {}
    for out, parents, fn in reversed(tape.nodes[: loss._node + 1]):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        # no in-place updates on gradients handed out by backward closures, so storing g is safe
        out.grad = g if out.grad is None else out.grad + g
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if p._tape is None:
                leaves[key] = p
            if isinstance(pg, _SliceGrad):
                if key not in owned:
                    buf = np.zeros(p.shape, dtype=pg.g.dtype)
                    if key in pending:
                        buf += pending[key]
                    pending[key] = buf
                    owned.add(key)
                pending[key][pg.idx] += pg.g
            elif key in pending:
                if key in owned:
                    pending[key] += pg
                else:
                    pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for key, p in leaves.items():
        g = pending[key]
        p.grad = g.astype(p.dtype, copy=True) if p.grad is None else p.grad + g


class _SliceGrad:
    """Gradient of a basic-indexing view, scattered lazily into the parent's buffer."""

    __slots__ = ("idx", "g")

    def __init__(self, idx, g):
        self.idx = idx
        self.g = g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow warnings for large |x|
    y = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _record(x.value * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing only."""
    return _record(x.value[idx], (x,), lambda g: (_SliceGrad(idx, g),))


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record(np.concatenate([t.value for t in tensors], axis=axis), tensors, fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(
        np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.value.size
    return _record(
        np.asarray(x.value.mean()),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=x.dtype),),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis after the channel axis: [B, C, ...] -> [B, C]."""
    axes = tuple(range(2, x.ndim))
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes]))

    def fn(g):
        g = g.reshape(g.shape + (1,) * len(axes)) / n
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.value.mean(axis=axes), (x,), fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul inner dimension mismatch: {a.shape[1]} (lhs cols) vs {b.shape[0]} (rhs rows)"
        )
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x: [batch, in]``, ``w: [in, out]``, ``b: [out]``."""
    y = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"dense bias shape {b.shape} does not match out dim {w.shape[1]}")
        y = add(y, b)
    return y


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.value - target.value
    n = diff.size

    def fn(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _record(np.asarray((diff * diff).mean()), (pred, target), fn)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero padding)


def _out_and_pad(n, k, s, padding):
    if padding == "same":
        out = -(-n // s)
        total = max((out - 1) * s + k - n, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if n < k:
            raise ValueError(f"input length {n} shorter than kernel {k} with 'valid' padding")
        return (n - k) // s + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _conv(x: Tensor, w: Tensor, b: Tensor | None, stride, padding, name) -> Tensor:
    dims = x.ndim - 2
    c_out, c_in = w.shape[:2]
    ksize = w.shape[2:]
    if x.shape[1] != c_in:
        raise ValueError(f"{name} channels_in mismatch: input has {x.shape[1]}, weight expects {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"{name} bias must have shape ({c_out},), got {b.shape}")
    n_in = x.shape[2:]
    geom = [_out_and_pad(n, k, s, padding) for n, k, s in zip(n_in, ksize, stride)]
    out = tuple(g[0] for g in geom)
    pads = ((0, 0), (0, 0)) + tuple((g[1], g[2]) for g in geom)
    xp = np.pad(x.value, pads) if any(p for pair in pads for p in pair) else x.value
    # im2col with kernel offsets outermost: column block o holds the input shifted by offset o
    offsets = list(itertools.product(*(range(k) for k in ksize)))
    views = [
        tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(off, stride, out)) for off in offsets
    ]
    batch = x.shape[0]
    n_out = int(np.prod(out))
    cols = np.concatenate([xp[(slice(None), slice(None)) + v] for v in views], axis=1)
    cols = cols.reshape(batch, len(offsets) * c_in, n_out)
    w_perm = (0,) + tuple(range(2, 2 + dims)) + (1,)
    wflat = w.value.transpose(w_perm).reshape(c_out, -1)
    y = np.matmul(wflat, cols)
    if b is not None:
        y += b.value[None, :, None]
    y = y.reshape((batch, c_out) + out)
    xshape = xp.shape

    def fn(g):
        g2 = g.reshape(batch, c_out, n_out)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        gw = gw.reshape((c_out,) + tuple(ksize) + (c_in,)).transpose(np.argsort(w_perm))
        gb = g2.sum(axis=(0, 2)) if b is not None else None
        gcols = np.matmul(wflat.T, g2).reshape((batch, len(offsets), c_in) + out)
        gxp = np.zeros(xshape, dtype=g.dtype)
        for i, v in enumerate(views):
            gxp[(slice(None), slice(None)) + v] += gcols[:, i]
        crop = tuple(slice(lo, lo + n) for (_, lo, _), n in zip(geom, n_in))
        return gxp[(slice(None), slice(None)) + crop], gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(y, parents, fn)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding="same") -> Tensor:
    """x: [batch, c_in, length], w: [c_out, c_in, k], b: [c_out]."""
    if x.ndim != 3:
        raise ValueError(f"conv1d input must be [batch, channels, length], got {x.shape}")
    if w.ndim != 3:
        raise ValueError(f"conv1d weight must be [c_out, c_in, k], got {w.shape}")
    return _conv(x, w, b, (stride,), padding, "conv1d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1), padding="same") -> Tensor:
    """x: [batch, c_in, h, w], w: [c_out, c_in, kh, kw], b: [c_out]."""
    if isinstance(stride, int):
        stride = (stride, stride)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [batch, channels, h, w], got {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be [c_out, c_in, kh, kw], got {w.shape}")
    return _conv(x, w, b, tuple(stride), padding, "conv2d")


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps=1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g
