"""Reverse-mode automatic differentiation over dense numpy tensors.

Small tape-based engine: operations executed inside a ``with Tape():``
block are recorded, and ``tape.backward(loss)`` returns gradients for
every tensor that took part in the computation, including plain input
tensors such as 1-hot character matrices. Outside a tape block the same
operations run eagerly with no recording cost.

Scope is deliberately narrow: 2-D (and scalar) float tensors, no
broadcasting beyond bias-add, save-everything activation strategy.
Completed tensors are immutable by convention and safe to share across
threads; each thread records on its own active tape.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with the requested op."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class GradientError(AutodiffError):
    """Gradient requested for a tensor the tape never saw."""


class Tensor:
    """Dense float array plus identity for gradient bookkeeping.

    Tensors are thin wrappers around numpy arrays. They do not carry a
    ``grad`` field; gradients live in the ``Grads`` map returned by
    ``Tape.backward`` so the same (frozen) parameter tensor can be used
    concurrently from many tapes.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Operator sugar; all arithmetic goes through the module-level ops.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))


def tensor(data, dtype=None):
    """Wrap ``data`` as a Tensor, defaulting to float32."""
    if dtype is None:
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
    else:
        arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def one_hot(indices, depth, dtype=DEFAULT_DTYPE):
    """Row-per-index 1-hot matrix, shape (len(indices), depth)."""
    out = np.zeros((len(indices), depth), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1
    return out


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE = threading.local()


def _tape_stack():
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of executed ops, replayed in reverse for backward.

    Nodes are appended in execution order, so every node's inputs precede
    it and a single reverse sweep visits each node exactly once.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self):
        return len(self._nodes)

    def record(self, out, parents, back):
        self._nodes.append((out, parents, back))

    def backward(self, output, seed=None):
        """Accumulate gradients of ``seed . output`` through the tape.

        ``output`` may also be a dict mapping output tensors to seed
        arrays, for multi-output graphs. Returns a ``Grads`` map covering
        every tensor reached by the sweep.
        """
        grads = {}
        if isinstance(output, dict):
            seeds = output.items()
        else:
            seeds = [(output, seed)]
        for out, s in seeds:
            if s is None:
                s = np.ones_like(out.data)
            else:
                s = np.asarray(s, dtype=out.data.dtype)
                if s.shape != out.data.shape:
                    raise ShapeError("backward-seed", s.shape, out.data.shape)
            key = id(out)
            if key in grads:
                grads[key] = (out, grads[key][1] + s)
            else:
                grads[key] = (out, s)
        for out, parents, back in reversed(self._nodes):
            entry = grads.get(id(out))
            if entry is None:
                continue
            for parent, pgrad in zip(parents, back(entry[1])):
                if pgrad is None:
                    continue
                pkey = id(parent)
                prev = grads.get(pkey)
                if prev is None:
                    grads[pkey] = (parent, pgrad)
                else:
                    grads[pkey] = (parent, prev[1] + pgrad)
        return Grads(grads)


class Grads:
    """Map from tensors (by identity) to their accumulated gradients."""

    def __init__(self, by_id):
        self._by_id = by_id

    def wrt(self, t):
        entry = self._by_id.get(id(t))
        if entry is None:
            raise GradientError(
                "no gradient recorded for this tensor; it is not on the tape"
            )
        return entry[1]

    def get(self, t, default=None):
        entry = self._by_id.get(id(t))
        return default if entry is None else entry[1]

    def __contains__(self, t):
        return id(t) in self._by_id


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def _emit(out_data, parents, back):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, parents, back)
    return out


def matmul(a, b):
    """2-D matrix product; 1-hot rows times an embedding matrix included."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), back)


def add(a, b):
    """Elementwise add; also bias-add of a rank-1 vector to each row."""
    if a.data.shape == b.data.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.data.shape[1] == b.data.shape[0]:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", a.data.shape, b.data.shape)


def sub(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError("sub", a.data.shape, b.data.shape)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise (Hadamard) product of equal-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError("mul", a.data.shape, b.data.shape)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale_rows(a, col):
    """Scale each row of (B, D) tensor ``a`` by the (B, 1) column ``col``."""
    if a.data.ndim != 2 or col.data.shape != (a.data.shape[0], 1):
        raise ShapeError("scale_rows", a.data.shape, col.data.shape)
    ad, cd = a.data, col.data

    def back(g):
        return g * cd, (g * ad).sum(axis=1, keepdims=True)

    return _emit(ad * cd, (a, col), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "<empty>")
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate(datas, axis=axis), tuple(tensors), back)


def narrow(a, axis, start, stop):
    """Contiguous slice [start:stop) along ``axis`` of a 2-D tensor."""
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError("narrow", a.data.shape)
    if not (0 <= start < stop <= a.data.shape[axis]):
        raise ShapeError("narrow", a.data.shape, (start, stop))
    ad = a.data
    sl = (slice(start, stop), slice(None)) if axis == 0 else (slice(None), slice(start, stop))

    def back(g):
        full = np.zeros_like(ad)
        full[sl] = g
        return (full,)

    return _emit(ad[sl], (a,), back)


def take_rows(a, indices):
    """Gather rows of a 2-D tensor; duplicate indices accumulate on backward."""
    if a.data.ndim != 2:
        raise ShapeError("take_rows", a.data.shape)
    idx = np.asarray(indices, dtype=np.intp)
    ad = a.data

    def back(g):
        full = np.zeros_like(ad)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(ad[idx], (a,), back)


def reshape(a, shape):
    ad = a.data
    old = ad.shape

    def back(g):
        return (g.reshape(old),)

    return _emit(ad.reshape(shape), (a,), back)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.data.shape)
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def sigmoid(a):
    ad = a.data
    out = np.empty_like(ad)
    np.exp(-np.abs(ad), out=out)
    # Stable in both tails: 1/(1+e^-x) for x>=0, e^x/(1+e^x) otherwise.
    pos = ad >= 0
    out = np.where(pos, 1.0 / (1.0 + out), out / (1.0 + out))

    def back(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (a,), back)


def tanh(a):
    out = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return _emit(out, (a,), back)


def relu(a):
    ad = a.data
    out = np.maximum(ad, 0)

    def back(g):
        return (g * (ad > 0),)

    return _emit(out, (a,), back)


def log(a):
    ad = a.data

    def back(g):
        return (g / ad,)

    return _emit(np.log(ad), (a,), back)


def softmax(a, axis):
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), back)


def reduce_sum(a, axis=None):
    ad = a.data

    def back(g):
        if axis is None:
            return (np.full_like(ad, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy(),)

    return _emit(ad.sum(axis=axis), (a,), back)


def reduce_mean(a, axis=None):
    ad = a.data
    n = ad.size if axis is None else ad.shape[axis]

    def back(g):
        if axis is None:
            return (np.full_like(ad, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), ad.shape).copy(),)

    return _emit(ad.mean(axis=axis), (a,), back)


def bce_with_logits(logits, targets, reduction="mean"):
    """Binary cross-entropy from raw logits; stable in both tails.

    ``reduction="sum"`` leaves per-example gradients unscaled, which keeps
    batched per-sentence input gradients identical to single-sentence ones.
    """
    z, y = logits.data, targets.data
    if z.shape != y.shape:
        raise ShapeError("bce_with_logits", z.shape, y.shape)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))
    n = z.size if reduction == "mean" else 1

    def back(g):
        return (g * (p - y) / n, None)

    return _emit(np.asarray(loss.sum() / n), (logits, targets), back)


def softmax_xent(logits, onehot_targets):
    """Mean softmax cross-entropy over rows of (B, C) logits."""
    z, y = logits.data, onehot_targets.data
    if z.shape != y.shape or z.ndim != 2:
        raise ShapeError("softmax_xent", z.shape, y.shape)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    n = z.shape[0]

    def back(g):
        return (g * (probs - y) / n, None)

    return _emit(np.asarray(-(y * logp).sum() / n), (logits, onehot_targets), back)


def assert_finite(value, context):
    """Raise if a forward result contains NaN/Inf (error state by contract)."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(arr)):
        raise AutodiffError(f"non-finite values in {context}")
    return value
