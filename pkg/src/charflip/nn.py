"""Neural layers, optimizer, and checkpoint serialization on the autodiff engine.

Layers are pure functions over named parameter tensors held in a
``ParamSet``; all per-step activations are (batch, dim) matrices so the
same code path serves batched training and single-sentence attacks.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class DimensionError(ValueError):
    """Layer input dimensions do not match the parameters."""


class NanGradientError(RuntimeError):
    """A gradient went non-finite during an optimizer step."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or does not match the vocabulary."""


class ParamSet:
    """Ordered, named collection of parameter tensors plus model metadata."""

    def __init__(self, model_kind="", vocab_hash="", hyper=None):
        self.model_kind = model_kind
        self.vocab_hash = vocab_hash
        self.hyper = dict(hyper or {})
        self._tensors = {}

    def add(self, name, array):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = ad.Tensor(np.asarray(array))
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def view(self, prefix):
        """Sub-dictionary of tensors under ``prefix.``, keyed by short name."""
        plen = len(prefix) + 1
        out = {k[plen:]: v for k, v in self._tensors.items() if k.startswith(prefix + ".")}
        if not out:
            raise KeyError(f"no parameters under prefix {prefix!r}")
        return out

    def n_values(self):
        return sum(t.data.size for t in self._tensors.values())


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot(rng, fan_in, fan_out, shape, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_affine(ps, prefix, fan_in, fan_out, rng, dtype=np.float32):
    ps.add(f"{prefix}.w", glorot(rng, fan_in, fan_out, (fan_in, fan_out), dtype))
    ps.add(f"{prefix}.b", np.zeros(fan_out, dtype=dtype))


def init_gru(ps, prefix, in_dim, hidden, rng, dtype=np.float32):
    ps.add(f"{prefix}.w_x", glorot(rng, in_dim, hidden, (in_dim, 2 * hidden), dtype))
    ps.add(f"{prefix}.w_h", glorot(rng, hidden, hidden, (hidden, 2 * hidden), dtype))
    ps.add(f"{prefix}.b", np.zeros(2 * hidden, dtype=dtype))
    ps.add(f"{prefix}.w_xc", glorot(rng, in_dim, hidden, (in_dim, hidden), dtype))
    ps.add(f"{prefix}.w_hc", glorot(rng, hidden, hidden, (hidden, hidden), dtype))
    ps.add(f"{prefix}.b_c", np.zeros(hidden, dtype=dtype))


def init_lstm(ps, prefix, in_dim, hidden, rng, dtype=np.float32):
    ps.add(f"{prefix}.w_x", glorot(rng, in_dim, hidden, (in_dim, 4 * hidden), dtype))
    ps.add(f"{prefix}.w_h", glorot(rng, hidden, hidden, (hidden, 4 * hidden), dtype))
    ps.add(f"{prefix}.b", np.zeros(4 * hidden, dtype=dtype))


def init_ff(ps, prefix, dims, rng, dtype=np.float32):
    """Affine stack with layer sizes ``dims`` = (in, hidden..., out)."""
    for i in range(len(dims) - 1):
        init_affine(ps, f"{prefix}.l{i}", dims[i], dims[i + 1], rng, dtype)


# ---------------------------------------------------------------------------
# Cells and layers
# ---------------------------------------------------------------------------


def _check_dims(p, x, hidden_key, op):
    if x.data.ndim != 2 or x.data.shape[1] != p["w_x"].data.shape[0]:
        raise DimensionError(f"{op}: input width {x.data.shape} vs {p['w_x'].data.shape}")


def gru_cell(p, x, h):
    """One GRU step; h_t = z * h_prev + (1 - z) * candidate.

    With the update gate saturated at 1 the previous state passes
    through unchanged.
    """
    _check_dims(p, x, "w_h", "gru_cell")
    hidden = h.data.shape[1]
    gates = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["w_x"]), ad.matmul(h, p["w_h"])), p["b"]))
    z = ad.narrow(gates, 1, 0, hidden)
    r = ad.narrow(gates, 1, hidden, 2 * hidden)
    cand = ad.tanh(
        ad.add(ad.add(ad.matmul(x, p["w_xc"]), ad.matmul(ad.mul(r, h), p["w_hc"])), p["b_c"])
    )
    keep = ad.mul(z, h)
    ones = ad.tensor(np.ones_like(z.data))
    return ad.add(keep, ad.mul(ad.sub(ones, z), cand))


def lstm_cell(p, x, state):
    """One LSTM step over state (h, c); returns (h_t, c_t)."""
    _check_dims(p, x, "w_h", "lstm_cell")
    h, c = state
    hidden = h.data.shape[1]
    pre = ad.add(ad.add(ad.matmul(x, p["w_x"]), ad.matmul(h, p["w_h"])), p["b"])
    i = ad.sigmoid(ad.narrow(pre, 1, 0, hidden))
    f = ad.sigmoid(ad.narrow(pre, 1, hidden, 2 * hidden))
    o = ad.sigmoid(ad.narrow(pre, 1, 2 * hidden, 3 * hidden))
    g = ad.tanh(ad.narrow(pre, 1, 3 * hidden, 4 * hidden))
    c_t = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_t = ad.mul(o, ad.tanh(c_t))
    return h_t, c_t


def _gru_step(p, x, state):
    h = gru_cell(p, x, state)
    return h, h


def _lstm_step(p, x, state):
    h, c = lstm_cell(p, x, state)
    return h, (h, c)


def _zero_state(kind, batch, hidden, dtype):
    h = ad.tensor(np.zeros((batch, hidden), dtype=dtype))
    if kind == "lstm":
        return (h, ad.tensor(np.zeros((batch, hidden), dtype=dtype)))
    return h


def unroll(kind, p, xs, hidden):
    """Run a cell over a sequence of (B, D) inputs; returns per-step outputs."""
    if not xs:
        raise DimensionError(f"{kind} unroll: empty sequence")
    step = _gru_step if kind == "gru" else _lstm_step
    state = _zero_state(kind, xs[0].data.shape[0], hidden, p["w_x"].data.dtype)
    outs = []
    for x in xs:
        out, state = step(p, x, state)
        outs.append(out)
    return outs


def bidirectional(kind, p_fwd, p_bwd, xs, hidden):
    """Per-position concat of a forward and a reversed backward pass."""
    fwd = unroll(kind, p_fwd, xs, hidden)
    bwd = unroll(kind, p_bwd, list(reversed(xs)), hidden)
    bwd.reverse()
    return [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]


def attention_pool(p, states):
    """Weighted sum of per-position states using a learned query vector.

    Returns (pooled (B, D), weights (B, m)); weights are a probability
    distribution over positions and are exposed for attention-guided
    attack baselines.
    """
    if not states:
        raise DimensionError("attention_pool: empty sequence")
    m = len(states)
    batch = states[0].data.shape[0]
    scores = ad.matmul(ad.concat(states, axis=0), p["query"])
    alpha = ad.softmax(ad.transpose(ad.reshape(scores, (m, batch))), axis=1)
    pooled = ad.scale_rows(states[0], ad.narrow(alpha, 1, 0, 1))
    for j in range(1, m):
        pooled = ad.add(pooled, ad.scale_rows(states[j], ad.narrow(alpha, 1, j, j + 1)))
    return pooled, alpha


def feed_forward(p, x, n_layers, activation="relu", final=None):
    """Affine stack ``l0..l{n-1}`` with an activation between layers."""
    act = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}[activation]
    out = x
    for i in range(n_layers):
        out = ad.add(ad.matmul(out, p[f"l{i}.w"]), p[f"l{i}.b"])
        if i < n_layers - 1:
            out = act(out)
    if final is not None:
        out = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}[final](out)
    return out


def bucket_batches(items, batch_size, rng, length_of=len):
    """Deterministically shuffled equal-length batches (no padding needed)."""
    by_len = {}
    for item in items:
        by_len.setdefault(length_of(item), []).append(item)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        rng.shuffle(group)
        for i in range(0, len(group), batch_size):
            batches.append(group[i : i + batch_size])
    rng.shuffle(batches)
    return batches


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return np.sqrt(total)


def adam_step(params, grads, state, hyper):
    """In-place bias-corrected Adam update with global-norm clipping.

    ``grads`` maps parameter names to arrays; parameters without a
    gradient this step are skipped but their moments still decay.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NanGradientError(f"non-finite gradient for parameter {name!r}")
    scale = 1.0
    if hyper.clip_norm:
        norm = global_norm(grads)
        if norm > hyper.clip_norm:
            scale = hyper.clip_norm / norm
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if g is None:
            g = 0.0
        else:
            g = np.asarray(g, dtype=p.data.dtype) * scale
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * np.square(g)
        p.data -= (hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"CFCKPT\x00\x01"
_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(params, path):
    """Write a self-describing little-endian container of named tensors."""
    meta = {
        "model_kind": params.model_kind,
        "vocab_hash": params.vocab_hash,
        "hyper": params.hyper,
        "n_tensors": len(params.names()),
    }
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    for name, t in params.items():
        code = _DTYPE_CODES.get(t.data.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {t.data.dtype} for {name!r}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype=_DTYPES[code]).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def save_train_state(params, state, path):
    """Checkpoint parameters plus Adam moments so training can resume
    step-for-step."""
    snapshot = ParamSet(params.model_kind, params.vocab_hash,
                        dict(params.hyper, adam_step=state.step))
    for name, t in params.items():
        snapshot.add(f"param.{name}", t.data)
    for name in state.m:
        snapshot.add(f"adam.m.{name}", state.m[name])
        snapshot.add(f"adam.v.{name}", state.v[name])
    save_checkpoint(snapshot, path)


def load_train_state(path, expect_vocab_hash=None):
    """Inverse of save_train_state; returns (ParamSet, AdamState)."""
    snapshot = load_checkpoint(path, expect_vocab_hash=expect_vocab_hash)
    hyper = dict(snapshot.hyper)
    state = AdamState(step=hyper.pop("adam_step"))
    params = ParamSet(snapshot.model_kind, snapshot.vocab_hash, hyper)
    for name, t in snapshot.items():
        if name.startswith("param."):
            params.add(name[len("param."):], t.data)
        elif name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = np.array(t.data, copy=True)
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = np.array(t.data, copy=True)
    return params, state


def load_checkpoint(path, expect_vocab_hash=None, expect_kind=None):
    """Read a checkpoint; refuses mismatched vocabulary or model kind."""
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(len(_MAGIC)) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(meta_len).decode("utf-8"))
    if expect_vocab_hash is not None and meta["vocab_hash"] != expect_vocab_hash:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch "
            f"(checkpoint {meta['vocab_hash']!r}, current {expect_vocab_hash!r})"
        )
    if expect_kind is not None and meta["model_kind"] != expect_kind:
        raise CheckpointError(
            f"{path}: model kind {meta['model_kind']!r}, expected {expect_kind!r}"
        )
    ps = ParamSet(meta["model_kind"], meta["vocab_hash"], meta["hyper"])
    for _ in range(meta["n_tensors"]):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", buf.read(2))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        dtype = np.dtype(_DTYPES[code])
        data = np.frombuffer(
            buf.read(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize), dtype=dtype
        )
        ps.add(name, data.reshape(shape).copy())
    return ps
