"""Dense float64 tensors with reverse-mode autodiff, Adam, and a finite-difference oracle.

Every op records a closure mapping the output gradient to one gradient per
parent. ``backward`` walks the recorded graph once in reverse topological
order and accumulates into the ``grad`` buffer of leaf tensors.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, DimensionError, NumericDomainError

DTYPE = np.float64
INIT_STD = 0.02

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self):
        self.grad = None

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def tanh(self):
        return ttanh(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    sa, sb = a.data.shape, b.data.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _result(ad * bd, (a, b), bw)


def reciprocal(a):
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def texp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def tlog(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def ttanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), bw)


# ----------------------------------------------------------------------------
# shape ops


def tsum(a, axis=None, keepdims=False):
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def reshape(a, shape):
    old = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    shape = a.data.shape
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _result(a.data[idx], (a,), bw)


def _is_fancy(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(not isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def concat(tensors, axis=-2):
    """Concatenate along ``axis``; all other dims broadcast (leading batch dims allowed)."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    nd = max(t.data.ndim for t in tensors)
    ax = axis % nd
    shapes = [(1,) * (nd - t.data.ndim) + t.data.shape for t in tensors]
    try:
        common = np.broadcast_shapes(*[sh[:ax] + (1,) + sh[ax + 1:] for sh in shapes])
    except ValueError:
        raise DimensionError(f"concat shape mismatch: {[t.data.shape for t in tensors]}") from None
    datas = [np.broadcast_to(t.data.reshape(sh), common[:ax] + (sh[ax],) + common[ax + 1:])
             for t, sh in zip(tensors, shapes)]
    cuts = np.cumsum([sh[ax] for sh in shapes])[:-1]
    orig = [t.data.shape for t in tensors]

    def bw(g):
        return tuple(_unbroadcast(part, sh) for part, sh in zip(np.split(g, cuts, axis=ax), orig))

    return _result(np.concatenate(datas, axis=ax), tuple(tensors), bw)


def gather_rows(table, ids):
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.data.shape[-2]
    if table.data.ndim == 2:
        return _gather_plain(table, ids, n)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(np.flatnonzero((ids < 0) | (ids >= n))[0])
        raise IndexError(f"id {int(ids[bad])} at position {bad} out of range for table of {n} rows")
    shape = table.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(np.moveaxis(full, -2, 0), ids, np.moveaxis(_unbroadcast_rows(g, shape), -2, 0))
        return (full,)

    return _result(table.data[..., ids, :], (table,), bw)


def _gather_plain(table, ids, n):
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(np.flatnonzero((ids.reshape(-1) < 0) | (ids.reshape(-1) >= n))[0])
        raise IndexError(f"id {int(ids.reshape(-1)[bad])} at position {bad} out of range for table of {n} rows")
    shape = table.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), bw)


def _unbroadcast_rows(g, table_shape):
    lead = table_shape[:-2]
    while g.ndim > len(lead) + 2:
        g = g.sum(axis=0)
    for axis, n in enumerate(lead):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    sa, sb = ad.shape, bd.shape

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _result(ad @ bd, (a, b), bw)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what}: non-finite input")


def softmax_rows(x, mask=None):
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (boolean, broadcastable) marks entries that may be attended to;
    masked-out entries get probability exactly 0.
    """
    x = _as_tensor(x)
    _check_finite(x.data, "softmax_rows")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (_unbroadcast(dx, x.data.shape), _unbroadcast(g * xhat, gain.data.shape),
                _unbroadcast(g, bias.data.shape))

    return _result(xhat * gd + bias.data, (x, gain, bias), bw)


def cross_entropy(logits, targets, reduction="mean"):
    """Mean (or summed) NLL of ``targets`` under the row softmax of ``logits`` [..., T, V].

    ``targets`` has shape [T] or broadcasts against ``logits.shape[:-1]``.
    Leading dims are kept: the result has shape ``logits.shape[:-2]``.
    """
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    t_len, vocab = logits.data.shape[-2:]
    if targets.ndim < 1 or targets.shape[-1] != t_len:
        raise DimensionError(f"cross_entropy: logits {logits.data.shape} vs targets {targets.shape}")
    flat = targets.reshape(-1)
    bad = np.flatnonzero((flat < 0) | (flat >= vocab))
    if bad.size:
        p = int(bad[0]) % t_len
        raise IndexError(f"target {int(flat[bad[0]])} at position {p} out of range for vocab {vocab}")
    _check_finite(logits.data, "cross_entropy")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    lead = np.broadcast_shapes(z.shape[:-1], targets.shape)
    z = np.broadcast_to(z, lead + (vocab,))
    lse = np.broadcast_to(lse, lead)
    idx = np.broadcast_to(targets, lead)[..., None]
    nll = lse - np.take_along_axis(z, idx, axis=-1)[..., 0]
    scale = 1.0 / t_len if (reduction == "mean" and t_len) else 1.0
    shape = logits.data.shape

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=-1) - 1.0, axis=-1)
        return (_unbroadcast(p * (np.asarray(g)[..., None, None] * scale), shape),)

    return _result(np.asarray(nll.sum(axis=-1) * scale), (logits,), bw)


# ----------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# ----------------------------------------------------------------------------
# RNG, init, optimisation


def make_rng(seed):
    """PCG64 generator; the stream is fixed by the seed on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


_MASK64 = (1 << 64) - 1


def rng_state_words(rng):
    st = rng.bit_generator.state
    s, inc = st["state"]["state"], st["state"]["inc"]
    return (s >> 64, s & _MASK64, inc >> 64, inc & _MASK64,
            int(st["has_uint32"]), int(st["uinteger"]))


def rng_from_words(words):
    s_hi, s_lo, i_hi, i_lo, has32, uint = (int(w) for w in words)
    rng = make_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (s_hi << 64) | s_lo, "inc": (i_hi << 64) | i_lo},
        "has_uint32": has32,
        "uinteger": uint,
    }
    return rng


def normal_param(rng, shape, name=None, std=INIT_STD):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones_param(shape, name=None):
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def global_grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm):
    """Scale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Adam with bias correction. Moment buffers are keyed by parameter name."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m1 = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.m2 = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr):
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"adam_step: parameter {missing[0]!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m1 = self.m1[k]
            m2 = self.m2[k]
            m1 *= b1
            m1 += (1.0 - b1) * g
            m2 *= b2
            m2 += (1.0 - b2) * (g * g)
            p.data -= lr * (m1 / c1) / (np.sqrt(m2 / c2) + self.eps)
            p.grad = None


def adam_step(params, state, lr):
    state.params = params
    state.step(lr)


def finite_diff_grad(f, param, h=1e-5, indices=None):
    """Central differences of ``f(param)`` wrt ``param``, perturbing in place.

    With ``indices`` (flat positions) only those coordinates are evaluated and
    a 1-d array is returned; otherwise a full-shape Tensor.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    flat = param.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size if indices is None else len(indices))
    with no_grad():
        for slot, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(param))
            flat[i] = orig - h
            fm = float(f(param))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericDomainError(f"finite_diff_grad: non-finite f at coordinate {i}")
            out[i if indices is None else slot] = (fp - fm) / (2.0 * h)
    if indices is None:
        return Tensor(out.reshape(param.data.shape))
    return out


def batched_shape(shape, copies):
    """Shape of ``copies`` stacked variants of a parameter, broadcast-safe against row activations."""
    shape = tuple(shape)
    return (copies,) + (1,) * max(0, 2 - len(shape)) + shape


def finite_diff_grad_batched(f, param, h=1e-5, indices=None, chunk=64):
    """Central differences evaluated ``chunk`` coordinates at a time.

    ``param.data`` is temporarily replaced by a stack of 2*chunk perturbed
    copies along a new leading axis; ``f(param)`` must return one loss per
    copy. Each copy differs from the original in exactly one coordinate, so
    the result equals ``finite_diff_grad`` coordinate by coordinate.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    base = param.data
    size = base.size
    coords = np.arange(size) if indices is None else np.asarray(indices, dtype=np.int64)
    out = np.zeros(len(coords))
    try:
        with no_grad():
            for lo in range(0, len(coords), chunk):
                part = coords[lo:lo + chunk]
                c = len(part)
                stack = np.repeat(base.reshape(1, -1), 2 * c, axis=0)
                rows = np.arange(c)
                stack[rows, part] = base.reshape(-1)[part] + h
                stack[c + rows, part] = base.reshape(-1)[part] - h
                param.data = stack.reshape(batched_shape(base.shape, 2 * c))
                vals = np.asarray(f(param), dtype=DTYPE).reshape(-1)
                if vals.size != 2 * c:
                    raise ContractError(f"batched f returned {vals.size} values for {2 * c} copies")
                if not np.all(np.isfinite(vals)):
                    raise NumericDomainError("finite_diff_grad: non-finite f")
                out[lo:lo + c] = (vals[:c] - vals[c:]) / (2.0 * h)
    finally:
        param.data = base
    if indices is None:
        return Tensor(out.reshape(base.shape))
    return out


def grad_rel_error(auto, numeric, small=1e-6):
    """Elementwise error: relative where the reference is large, absolute otherwise."""
    auto = np.asarray(auto, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    diff = np.abs(auto - numeric)
    ref = np.maximum(np.abs(auto), np.abs(numeric))
    rel = np.where(ref < small, 0.0, diff / np.where(ref == 0, 1.0, ref))
    absolute = np.where(ref < small, diff, 0.0)
    return rel, absolute
