"""Dense float64 tensors with a reverse-mode tape.

Values live in numpy arrays; every operation records its parents and a
closure that pushes the output gradient back to them. ``backward`` walks the
recorded graph in reverse topological order.
"""
from __future__ import annotations

import json
import logging
import zlib
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, values, parents: Sequence["Tensor"] = (),
                 backward: Callable[[np.ndarray], None] | None = None,
                 requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(values, parents, fn) -> Tensor:
    out = Tensor(values, parents)
    if out.requires_grad:
        out._backward = fn
    else:
        out._parents = ()
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar ``loss``.

    Gradients accumulate across calls until cleared.
    """
    if loss.values.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        if node._parents and node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    return add(a, neg(_wrap(b)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.values)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(a.values * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.values.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.values.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.values for p in parts], axis=axis), parts, fn)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([p.values for p in parts], axis=axis), parts, fn)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(None))) or p is Ellipsis for p in parts)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def fn(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.values[idx], (a,), fn)


def _scatter_rows(rows: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[r] += values[k] for every k with rows[k] == r (sort + reduceat, faster than add.at)."""
    out = np.zeros((n,) + values.shape[1:])
    if rows.size == 0:
        return out
    # pair layouts from _pair_index: tile(arange(n), r) and repeat(arange(n), r)
    if n and rows.size % n == 0:
        r = rows.size // n
        if np.array_equal(rows.reshape(r, n), np.broadcast_to(np.arange(n), (r, n))):
            return values.reshape((r, n) + values.shape[1:]).sum(axis=0)
        if np.array_equal(rows.reshape(n, r), np.broadcast_to(np.arange(n)[:, None], (n, r))):
            return values.reshape((n, r) + values.shape[1:]).sum(axis=1)
    if np.all(rows[1:] >= rows[:-1]):
        sr, order = rows, slice(None)
    else:
        order = np.argsort(rows, kind="stable")
        sr = rows[order]
    starts = np.flatnonzero(np.r_[True, sr[1:] != sr[:-1]])
    out[sr[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def take(a: Tensor, rows) -> Tensor:
    """Gather rows (axis 0); repeated indices accumulate in the backward pass."""
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def fn(g):
        return (_scatter_rows(rows, g, shape[0]),)

    return _make(a.values[rows], (a,), fn)


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``segments``."""
    segments = np.asarray(segments, dtype=np.int64)
    out = _scatter_rows(segments, x.values, num_segments)
    return _make(out, (x,), lambda g: (g[segments],))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values

    need_a, need_b = a.requires_grad, b.requires_grad

    def fn(g):
        if av.ndim == 1 and bv.ndim == 2:
            ga, gb = (lambda: bv @ g), (lambda: np.outer(av, g))
        elif av.ndim == 2 and bv.ndim == 1:
            ga, gb = (lambda: np.outer(g, bv)), (lambda: av.T @ g)
        else:
            ga, gb = (lambda: g @ bv.T), (lambda: av.T @ g)
        return (ga() if need_a else None), (gb() if need_b else None)

    return _make(av @ bv, (a, b), fn)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product along the last axis."""
    return sum(mul(a, b), axis=-1)


# ---------------------------------------------------------------- softmax family

def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    if v.values.size == 0:
        raise DomainError("softmax of an empty tensor")
    z = v.values - v.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (v,), fn)


def segment_softmax(scores: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax of a 1-D score vector independently within each segment."""
    segments = np.asarray(segments, dtype=np.int64)
    s = scores.values
    if s.size == 0:
        return _make(s.copy(), (scores,), lambda g: (g,))
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, s)
    e = np.exp(s - seg_max[segments])
    denom = np.bincount(segments, weights=e, minlength=num_segments)
    y = e / denom[segments]

    def fn(g):
        gy = np.bincount(segments, weights=g * y, minlength=num_segments)
        return (y * (g - gy[segments]),)

    return _make(y, (scores,), fn)


# ---------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against targets."""
    x = logits.values
    t = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    p = _sigmoid(x)
    return _make(loss, (logits,), lambda g: (g * (p - t),))


def smooth_l1(diff: Tensor, beta: float = 1.0) -> Tensor:
    d = diff.values
    a = np.abs(d)
    small = a < beta
    val = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    return _make(val, (diff,), lambda g: (g * np.where(small, d / beta, np.sign(d)),))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Softmax cross-entropy per row; ``target`` holds class indices."""
    x = logits.values
    if x.ndim == 1:
        x = x[None]
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = lse - z[np.arange(len(t)), t]
    p = np.exp(z - lse[:, None])
    onehot = np.zeros_like(p)
    onehot[np.arange(len(t)), t] = 1.0
    shape = logits.shape
    return _make(loss, (logits,), lambda g: ((g[:, None] * (p - onehot)).reshape(shape),))


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameters, created lazily with seeded uniform initialization."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.frozen = False

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def get(self, name: str, shape: tuple[int, ...], fan_in: int | None = None,
            zero: bool = False) -> Tensor:
        shape = tuple(int(s) for s in shape)
        p = self.params.get(name)
        if p is not None:
            if p.shape != shape:
                raise ConfigurationError(
                    f"parameter {name!r} has shape {p.shape}, requested {shape}")
            return p
        if self.frozen:
            raise ConfigurationError(f"parameter {name!r} missing from frozen store")
        if zero:
            values = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in if fan_in else shape[-1])
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            values = rng.uniform(-bound, bound, size=shape)
        p = Tensor(values, requires_grad=True)
        self.params[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.values.size for p in self.params.values()]))

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed)
        for k, p in self.params.items():
            other.params[k] = Tensor(p.values.copy(), requires_grad=True)
        other.m = {k: v.copy() for k, v in self.m.items()}
        other.v = {k: v.copy() for k, v in self.v.items()}
        other.step = self.step
        return other

    # -- checkpoint io

    def save(self, path) -> None:
        path = Path(path)
        names = self.names()
        meta = {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "step": self.step,
            "params": {n: list(self.params[n].shape) for n in names},
            "moments": sorted(self.m),
        }
        arrays = {f"p:{n}": self.params[n].values for n in names}
        arrays.update({f"m:{n}": self.m[n] for n in self.m})
        arrays.update({f"v:{n}": self.v[n] for n in self.v})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                     **arrays)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(data["__meta__"].tobytes().decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')}")
            store = cls(meta["seed"])
            store.step = meta["step"]
            for n, shape in meta["params"].items():
                values = data[f"p:{n}"]
                if list(values.shape) != shape:
                    raise ConfigurationError(f"checkpoint shape mismatch for {n}")
                store.params[n] = Tensor(values.copy(), requires_grad=True)
            for n in meta["moments"]:
                store.m[n] = data[f"m:{n}"].copy()
                store.v[n] = data[f"v:{n}"].copy()
        return store


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> bool:
    """Apply one Adam update to every parameter holding a gradient.

    Returns False (and logs a warning) when no parameter has a gradient.
    Gradients are cleared afterwards.
    """
    names = [n for n, p in store.params.items() if p.grad is not None]
    if not names:
        logger.warning("adam_step called without gradients; skipping")
        return False
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for n in names:
        p = store.params[n]
        g = p.grad
        m = store.m.get(n)
        if m is None:
            m = store.m[n] = np.zeros_like(p.values)
            store.v[n] = np.zeros_like(p.values)
        v = store.v[n]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()
    return True


# ---------------------------------------------------------------- layers

def dense(store: ParamStore, x: Tensor, name: str, out_dim: int, bias: bool = True,
          zero: bool = False) -> Tensor:
    """y = W x + b for a vector, or row-wise for a matrix of inputs.

    ``zero`` initializes W and b to zero when the parameter is first created.
    """
    x = _wrap(x)
    n_in = x.shape[-1]
    W = store.get(f"{name}/W", (out_dim, n_in), fan_in=n_in, zero=zero)
    y = matmul(x, transpose(W))
    if bias:
        y = add(y, store.get(f"{name}/b", (out_dim,), fan_in=n_in, zero=zero))
    return y


def mlp(store: ParamStore, x: Tensor, name: str, hidden: int, out_dim: int,
        zero_last: bool = False) -> Tensor:
    """Two fully connected layers with a ReLU in between."""
    h = relu(dense(store, x, f"{name}/0", hidden))
    return dense(store, h, f"{name}/1", out_dim, zero=zero_last)


def gather_mlp(store: ParamStore, parts: Sequence[tuple[Tensor, np.ndarray | None]], name: str,
               hidden: int, out_dim: int, zero_last: bool = False) -> Tensor:
    """``mlp`` on rows of the concatenation [p0[i0]; p1[i1]; ...] without building it.

    The first layer splits into one product per source, computed on the source's
    rows and gathered afterwards; an index of None means the rows line up as-is.
    Exact, and it uses the same parameters as ``mlp`` on the concatenation.
    """
    parts = [(_wrap(t), idx) for t, idx in parts]
    d_in = int(np.sum([t.shape[-1] for t, _ in parts]))
    W = store.get(f"{name}/0/W", (hidden, d_in), fan_in=d_in)
    h = store.get(f"{name}/0/b", (hidden,), fan_in=d_in)
    col = 0
    for t, idx in parts:
        d = t.shape[-1]
        y = matmul(t, transpose(W[:, col:col + d]))
        h = add(h, y if idx is None else take(y, idx))
        col += d
    return dense(store, relu(h), f"{name}/1", out_dim, zero=zero_last)


def pair_mlp(store: ParamStore, a: Tensor, b: Tensor, ia, ib, name: str, hidden: int,
             out_dim: int, zero_last: bool = False) -> Tensor:
    """``mlp`` applied to rows [a[ia]; b[ib]]; see ``gather_mlp``."""
    return gather_mlp(store, [(a, np.asarray(ia)), (b, np.asarray(ib))], name, hidden, out_dim,
                      zero_last)


def gru_sequence(x: Tensor, W: Tensor, U: Tensor, b: Tensor, bu: Tensor,
                 masks: np.ndarray) -> Tensor:
    """Run a GRU over x (T, B, d) and return every state, shape (T, B, h).

    Gates follow r, z, n ordering: n = tanh(W_n x + b_n + r * (U_n h + bu_n)),
    h' = (1 - z) * n + z * h. Where masks[t, i] is False the state is carried
    through unchanged. One tape node; the backward pass is explicit BPTT.
    """
    T, B, d = x.shape
    H = U.shape[1]
    Wv, Uv = W.values, U.values
    m = np.asarray(masks, dtype=np.float64)[:, :, None]
    gx = (x.values.reshape(T * B, d) @ Wv.T + b.values).reshape(T, B, 3 * H)
    hs = np.zeros((T + 1, B, H))
    rs, zs, ns, ghn = (np.zeros((T, B, H)) for _ in range(4))
    for t in range(T):
        h = hs[t]
        gh = h @ Uv.T + bu.values
        r = _sigmoid(gx[t, :, :H] + gh[:, :H])
        z = _sigmoid(gx[t, :, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[t, :, 2 * H:] + r * gh[:, 2 * H:])
        hs[t + 1] = m[t] * ((1.0 - z) * n + z * h) + (1.0 - m[t]) * h
        rs[t], zs[t], ns[t], ghn[t] = r, z, n, gh[:, 2 * H:]

    def fn(g):
        dgx = np.zeros((T, B, 3 * H))
        dgh = np.zeros((T, B, 3 * H))
        carry = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = g[t] + carry
            dhn = m[t] * dh
            r, z, n, h = rs[t], zs[t], ns[t], hs[t]
            dn = dhn * (1.0 - z)
            dz = dhn * (h - n)
            dan = dn * (1.0 - n * n)
            dr = dan * ghn[t]
            dgx[t, :, :H] = dgh[t, :, :H] = dr * r * (1.0 - r)
            dgx[t, :, H:2 * H] = dgh[t, :, H:2 * H] = dz * z * (1.0 - z)
            dgx[t, :, 2 * H:] = dan
            dgh[t, :, 2 * H:] = dan * r
            carry = (1.0 - m[t]) * dh + dhn * z + dgh[t] @ Uv
        fx, fh = dgx.reshape(T * B, 3 * H), dgh.reshape(T * B, 3 * H)
        return ((fx @ Wv).reshape(T, B, d), fx.T @ x.values.reshape(T * B, d),
                fh.T @ hs[:T].reshape(T * B, H), fx.sum(axis=0), fh.sum(axis=0))

    return _make(hs[1:].copy(), (x, W, U, b, bu), fn)


def _gru_direction(store: ParamStore, name: str, x: Tensor, masks: np.ndarray,
                   hidden: int) -> Tensor:
    d_in = x.shape[-1]
    W = store.get(f"{name}/W", (3 * hidden, d_in), fan_in=hidden)
    U = store.get(f"{name}/U", (3 * hidden, hidden), fan_in=hidden)
    b = store.get(f"{name}/b", (3 * hidden,), fan_in=hidden)
    bu = store.get(f"{name}/bu", (3 * hidden,), fan_in=hidden)
    return gru_sequence(x, W, U, b, bu, masks)


def birnn_encode_batch(store: ParamStore, seqs: Sequence[Tensor], name: str,
                       hidden: int = 128, return_states: bool = False):
    """Bidirectional GRU over a batch of variable-length sequences.

    Returns ``pooled`` with shape (B, 2*hidden): the mean over each sequence's
    concatenated forward/backward states. With ``return_states`` also returns a
    list of per-sequence (T_i, 2*hidden) state tensors.
    """
    lengths = [s.shape[0] for s in seqs]
    if not seqs or min(lengths) < 1:
        raise DomainError("birnn_encode needs nonempty sequences")
    B, T = len(seqs), max(lengths)
    d = seqs[0].shape[-1]
    flat = concat(list(seqs), axis=0)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    fw_idx = np.zeros((T, B), dtype=np.int64)
    bw_idx = np.zeros((T, B), dtype=np.int64)
    masks = np.zeros((T, B), dtype=bool)
    for bi, (L, off) in enumerate(zip(lengths, offsets)):
        fw_idx[:L, bi] = off + np.arange(L)
        bw_idx[:L, bi] = off + np.arange(L)[::-1]
        fw_idx[L:, bi] = off
        bw_idx[L:, bi] = off
        masks[:L, bi] = True
    x_fw = reshape(take(flat, fw_idx.ravel()), (T, B, d))
    x_bw = reshape(take(flat, bw_idx.ravel()), (T, B, d))
    fw = _gru_direction(store, f"{name}/fw", x_fw, masks, hidden)  # (T, B, h)
    bw = _gru_direction(store, f"{name}/bw", x_bw, masks, hidden)
    inv_len = (1.0 / np.asarray(lengths, dtype=np.float64))[:, None]
    mk = masks[:, :, None].astype(np.float64)
    fw_sum = sum(mul(fw, mk), axis=0)
    bw_sum = sum(mul(bw, mk), axis=0)
    pooled = mul(concat([fw_sum, bw_sum], axis=-1), inv_len)
    if not return_states:
        return pooled
    states = []
    for bi, L in enumerate(lengths):
        f = fw[:L, bi]
        bk = bw[np.arange(L)[::-1], bi]
        states.append(concat([f, bk], axis=-1))
    return pooled, states


def birnn_encode(store: ParamStore, seq: Tensor, name: str, hidden: int = 128):
    """Single-sequence form; returns (states (T, 2h), pooled (2h,))."""
    if seq.shape[0] < 1:
        raise DomainError("birnn_encode needs a nonempty sequence")
    pooled, states = birnn_encode_batch(store, [seq], name, hidden, return_states=True)
    return states[0], reshape(pooled, (pooled.shape[-1],))
