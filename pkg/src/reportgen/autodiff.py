"""Minimal reverse-mode autodiff engine over 64-bit numpy arrays.

Every operation the model needs is a fused tape node with a hand-written
backward closure, which keeps the node count per forward pass small enough
for pure-Python training loops. Gradients of every op are checked against
central finite differences in the test suite.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ValidationError(ValueError):
    """An input violates an operation precondition."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction (frozen forward passes, retrieval, eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` are trainable parameters;
    intermediate nodes carry a backward closure and references to their
    parents so ``backward`` can replay the tape in reverse.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, attaching the tape closure only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _accum_rows(t: Tensor, lo: int, hi: int, g_rows: np.ndarray):
    """Accumulate into a row slice of the gradient without a full-size temp."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[lo:hi] += g_rows


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, params: "ParameterStore | None" = None):
    """Populate .grad on every tensor reachable from ``loss``.

    ``loss`` must be a scalar. When a ParameterStore is given, parameters
    the loss never touched get an explicit zero gradient.
    """
    if loss.data.shape != ():
        raise ValidationError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is not None:
        for _, p in params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-d operands")
    if a.data.shape[-1] != b.data.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            _accum(a, g * bd)
            _accum(b, g * ad)
        elif ad.ndim == 1:
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
        elif bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)

    return _node(data, (a, b), bwd)


def dot(a, b) -> Tensor:
    return matmul(a, b)


def linear(x, w, b=None) -> Tensor:
    """y = x W^T + b with W of shape (out, in) and x of shape (..., in)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input shape {x.shape} does not match weight shape {w.shape}"
        )
    data = x.data @ w.data.T
    if b is not None:
        b = _as_tensor(b)
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        out_dim = w.data.shape[0]
        gf = g.reshape(-1, out_dim)
        xf = x.data.reshape(-1, w.data.shape[1])
        _accum(x, (gf @ w.data).reshape(x.data.shape))
        _accum(w, gf.T @ xf)
        if b is not None:
            _accum(b, gf.sum(axis=0).reshape(b.data.shape))

    return _node(data, parents, bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    flat = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(np.shape(x))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _stable_sigmoid(x.data)

    def bwd(g):
        _accum(x, g * y * (1.0 - y))

    return _node(y, (x,), bwd)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - y * y))

    return _node(y, (x,), bwd)


def activation(x, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValidationError(f"unknown activation kind '{kind}'")


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - inner))

    return _node(y, (x,), bwd)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ValidationError("concat of an empty list")
    ref = xs[0].data.shape
    for x in xs[1:]:
        s = x.data.shape
        if len(s) != len(ref) or any(
            s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: mismatched shapes {[t.shape for t in xs]}")
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]

    def bwd(g):
        offset = 0
        for x, size in zip(xs, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _accum(x, g[tuple(idx)])
            offset += size

    return _node(data, tuple(xs), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _node(data, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def bwd(g):
        _accum(x, np.transpose(g, inverse))

    return _node(data, (x,), bwd)


def _expand_reduced(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    for a in sorted(axes):
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis)

    def bwd(g):
        _accum(x, _expand_reduced(g, x.data.shape, axis))

    return _node(data, (x,), bwd)


def tensor_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis)
    count = x.data.size if axis is None else x.data.size / data.size

    def bwd(g):
        _accum(x, _expand_reduced(g, x.data.shape, axis) / count)

    return _node(data, (x,), bwd)


def avg_pool_spatial(fmap) -> Tensor:
    """Mean over both spatial axes of a (k, k, d) feature map."""
    fmap = _as_tensor(fmap)
    if fmap.ndim != 3:
        raise ShapeError(f"avg_pool_spatial expects a 3-d map, got {fmap.shape}")
    data = fmap.data.mean(axis=(0, 1))
    cells = fmap.data.shape[0] * fmap.data.shape[1]

    def bwd(g):
        _accum(fmap, np.broadcast_to(g / cells, fmap.data.shape).copy())

    return _node(data, (fmap,), bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` (V, E); backward scatters into the table."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValidationError(
            f"embedding id out of range [0, {table.data.shape[0]}): {idx.max()}"
        )
    data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _node(data, (table,), bwd)


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmParams:
    """Gate parameters, stacked [input, forget, candidate, output] rows."""

    w_input: Tensor   # (4H, in)
    w_hidden: Tensor  # (4H, H)
    bias: Tensor      # (4H,)


def lstm_cell(x, state, p: LstmParams):
    """One step of a standard LSTM cell; returns (h', c').

    h' and c' are two tape nodes sharing the forward intermediates; the
    output-gate path hangs off h' and the remaining gates off c'.
    """
    x = _as_tensor(x)
    h_prev, c_prev = state
    h_prev, c_prev = _as_tensor(h_prev), _as_tensor(c_prev)
    hid = p.w_hidden.data.shape[1]
    if p.w_input.data.shape[0] != 4 * hid or x.data.shape[-1] != p.w_input.data.shape[1]:
        raise ShapeError(
            f"lstm_cell: x {x.shape}, w_input {p.w_input.shape}, w_hidden {p.w_hidden.shape}"
        )
    if h_prev.data.shape != (hid,) or c_prev.data.shape != (hid,):
        raise ShapeError(f"lstm_cell: state shapes {h_prev.shape}/{c_prev.shape}, H={hid}")

    z = p.w_input.data @ x.data + p.w_hidden.data @ h_prev.data + p.bias.data
    gi = _stable_sigmoid(z[:hid])
    gf = _stable_sigmoid(z[hid : 2 * hid])
    gc = np.tanh(z[2 * hid : 3 * hid])
    go = _stable_sigmoid(z[3 * hid :])
    c_new = gf * c_prev.data + gi * gc
    tc = np.tanh(c_new)

    def scatter_gates(gz, lo, hi):
        _accum(x, p.w_input.data[lo:hi].T @ gz)
        _accum(h_prev, p.w_hidden.data[lo:hi].T @ gz)
        _accum_rows(p.w_input, lo, hi, np.outer(gz, x.data))
        _accum_rows(p.w_hidden, lo, hi, np.outer(gz, h_prev.data))
        _accum_rows(p.bias, lo, hi, gz)

    def bwd_c(g):
        gz = np.concatenate(
            [
                g * gc * gi * (1.0 - gi),
                g * c_prev.data * gf * (1.0 - gf),
                g * gi * (1.0 - gc * gc),
            ]
        )
        scatter_gates(gz, 0, 3 * hid)
        _accum(c_prev, g * gf)

    out_c = _node(c_new, (x, h_prev, c_prev, p.w_input, p.w_hidden, p.bias), bwd_c)

    def bwd_h(g):
        _accum(out_c, g * go * (1.0 - tc * tc))
        scatter_gates(g * tc * go * (1.0 - go), 3 * hid, 4 * hid)

    out_h = _node(go * tc, (out_c, x, h_prev, p.w_input, p.w_hidden, p.bias), bwd_h)
    return out_h, out_c


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy in the numerically stable logit form."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValidationError("bce_with_logits: targets must lie in [0, 1]")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = max(loss.size, 1)
    data = loss.sum() / n

    def bwd(g):
        _accum(logits, g * (_stable_sigmoid(x) - t) / n)

    return _node(data, (logits,), bwd)


def cross_entropy(logits, target: int) -> Tensor:
    """Negative log-softmax of the target class for a 1-d logit vector."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-d logits, got {logits.shape}")
    v = logits.data.shape[0]
    if not 0 <= int(target) < v:
        raise ValidationError(f"cross_entropy: class index {target} outside [0, {v})")
    shifted = logits.data - logits.data.max()
    lse = np.log(np.exp(shifted).sum())
    data = lse - shifted[int(target)]

    def bwd(g):
        p = np.exp(shifted - lse)
        p[int(target)] -= 1.0
        _accum(logits, g * p)

    return _node(data, (logits,), bwd)


# ---------------------------------------------------------------------------
# parameters and optimization


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Named trainable tensors with deterministic (lexicographic) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name '{name}'")
        t = data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)
        t.requires_grad = requires_grad
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for _, p in self.items():
            p.grad = None

    def set_trainable(self, trainable: bool):
        for _, p in self.items():
            p.requires_grad = trainable

    def to_arrays(self) -> dict:
        return {n: p.data.copy() for n, p in self.items()}

    def load_arrays(self, arrays: dict):
        for n, p in self.items():
            if n not in arrays:
                raise ValidationError(f"missing parameter '{n}' in payload")
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ShapeError(f"parameter '{n}': stored {a.shape} vs model {p.data.shape}")
            p.data = a.copy()


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; lr can vary per name prefix."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    group_lr: dict = field(default_factory=dict)
    lr_scale: float = 1.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        best = None
        for prefix, lr in self.group_lr.items():
            if name.startswith(prefix) and (best is None or len(prefix) > len(best[0])):
                best = (prefix, lr)
        base = best[1] if best is not None else self.lr
        return base * self.lr_scale


def clip_and_step(store: ParameterStore, state: AdamState, clip: float = 5.0) -> float:
    """Global 2-norm gradient clip followed by one AdamW-style update.

    Returns the pre-clip global gradient norm. Missing gradients count as
    zero; a non-finite gradient aborts before any parameter changes.
    """
    grads = {}
    sq = 0.0
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient in parameter '{name}'")
        grads[name] = g
        sq += float((g * g).sum())
    gnorm = float(np.sqrt(sq))
    if clip is not None and gnorm > clip and gnorm > 0.0:
        scale = clip / gnorm
        grads = {n: g * scale for n, g in grads.items()}
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in store.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        lr = state.lr_for(name)
        p.data = p.data - lr * (update + state.weight_decay * p.data)
    return gnorm


def finite_diff_gradient(f, store: ParameterStore, eps: float = 1e-5) -> dict:
    """Central-difference gradient of scalar ``f()`` w.r.t. every parameter.

    ``f`` must be deterministic and read the current store values. The
    store is restored exactly afterwards.
    """
    grads = {}
    for name, p in store.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g.reshape(p.data.shape)
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-8) -> float:
    """Worst-case elementwise relative error between two gradient dicts."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
