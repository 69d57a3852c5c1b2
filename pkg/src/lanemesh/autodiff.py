"""Small reverse-mode autodiff over numpy arrays.

Tensors are float64 by default (float32 is allowed for inference).  Every op
checks its output for NaN/Inf and raises :class:`NonFiniteError` naming the
op.  Reductions run along contiguous last axes so a row's result does not
depend on how many other rows share the array; the batched inference path
relies on that for bitwise serial/batched agreement.

Two instruments hang off the op layer:

* :func:`count_flops` -- forward matrix-product FLOPs (2*m*n*k per product), the
  quantity the analytic cost model predicts;
* :func:`track_activations` -- bytes of graph-retained tensors created while
  gradients are enabled, optionally split by named scope.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

LN_VARIANCE_FLOOR = 1e-5

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by {op}")
        self.op = op


class ShapeError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class FlopCounter:
    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = defaultdict(int)

    def add(self, n: int) -> None:
        self.total += n
        for s in _get("scopes", ()):
            self.by_scope[s] += n


class ActivationMeter:
    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = defaultdict(int)
        self.by_op: dict[str, int] = defaultdict(int)

    def add(self, n: int, op: str = "") -> None:
        self.total += n
        self.by_op[op] += n
        for s in _get("scopes", ()):
            self.by_scope[s] += n


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    prev = _get("flops", None)
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


@contextlib.contextmanager
def track_activations():
    meter = ActivationMeter()
    prev = _get("meter", None)
    _state.meter = meter
    try:
        yield meter
    finally:
        _state.meter = prev


@contextlib.contextmanager
def scope(name: str):
    """Attribute FLOPs / activation bytes recorded inside to ``name``."""
    prev = _get("scopes", ())
    _state.scopes = prev + (name,)
    try:
        yield
    finally:
        _state.scopes = prev


def _add_flops(n: int) -> None:
    c = _get("flops", None)
    if c is not None:
        c.add(int(n))


def _matmul_flops(a_shape, b_shape) -> int:
    m, k = a_shape[-2], a_shape[-1]
    n = b_shape[-1]
    batch = np.broadcast_shapes(tuple(a_shape[:-2]), tuple(b_shape[:-2]))
    return 2 * m * n * k * int(np.prod(batch, dtype=np.int64))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(_as_tensor(o)))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- backward -----------------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # graph is single-use; drop closures so activations can be freed
        for node in order:
            if node.op != "leaf":
                node._backward = None
                node._parents = ()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str, extra_bytes: int = 0) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
        meter = _get("meter", None)
        if meter is not None:
            meter.add(data.nbytes, op)
            if extra_bytes:
                meter.add(extra_bytes, op + ".saved")
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    _add_flops(_matmul_flops(a.shape, b.shape))
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def contiguous(a: Tensor) -> Tensor:
    return _make(np.ascontiguousarray(a.data), (a,), lambda g: (g,), "contiguous")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, backward, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    src_shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of {table.shape[0]} rows")
    out = table.data[ids]
    shape, dtype = table.shape, table.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(out, (table,), backward, "embedding")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def square(a: Tensor) -> Tensor:
    d = a.data
    return _make(d * d, (a,), lambda g: (2.0 * g * d,), "square")


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = x * cdf

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _make(out, (a,), backward, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = np.ascontiguousarray(a.data)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LN_VARIANCE_FLOOR) -> Tensor:
    """Per-token normalization over the last axis with learnable affine.

    ``eps`` is added to the variance, which floors the denominator for
    near-constant tokens.
    """
    d = np.ascontiguousarray(x.data)
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = d.shape[-1]

    def backward(g):
        gx = g if gamma is None else g * gamma.data
        gx = np.ascontiguousarray(gx)
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        out = [dx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            out.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            out.append(g.sum(axis=lead) if beta.requires_grad else None)
        return tuple(out)

    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = [x] + [t for t in (gamma, beta) if t is not None]
    return _make(y, parents, backward, "layer_norm", extra_bytes=xhat.nbytes)


class MaskError(ValueError):
    pass


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d) | mask) v``.

    Shapes ``(..., Nq, d)``, ``(..., Nk, d)``, ``(..., Nk, dv)``; ``mask`` is
    boolean, broadcastable to ``(..., Nq, Nk)``, True = attend.  A query row
    with no True entry is rejected.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    sc = 1.0 / np.sqrt(qd.shape[-1])
    kt = np.swapaxes(kd, -1, -2)
    s = np.matmul(qd, kt)
    _add_flops(_matmul_flops(qd.shape, kt.shape))
    s *= sc
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise MaskError("attention: fully masked query row")
        s = np.where(mask, s, -np.inf)
    s = np.ascontiguousarray(s)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, vd)
    _add_flops(_matmul_flops(p.shape, vd.shape))

    def backward(g):
        dp = np.matmul(g, np.swapaxes(vd, -1, -2))
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= sc
        dq = np.matmul(ds, kd)
        dk = np.matmul(np.swapaxes(ds, -1, -2), qd)
        return (_unbroadcast(dq, qd.shape), _unbroadcast(dk, kd.shape), _unbroadcast(dv, vd.shape))

    return _make(out, (q, k, v), backward, "attention", extra_bytes=p.nbytes)


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean token cross-entropy over positions whose target is not ``ignore_id``."""
    t = np.asarray(targets, dtype=np.int64)
    x = np.ascontiguousarray(logits.data)
    if x.shape[:-1] != t.shape:
        raise ShapeError(f"cross_entropy: logits {x.shape} vs targets {t.shape}")
    keep = np.ones(t.shape, dtype=bool) if ignore_id is None else t != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored")
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    safe_t = np.where(keep, t, 0)
    picked = np.take_along_axis(x, safe_t[..., None], axis=-1)[..., 0]
    nll = np.where(keep, lse - picked, 0.0)
    loss = np.asarray(nll.sum() / n)

    def backward(g):
        p = np.exp(x - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * keep[..., None] * (g / n),)

    return _make(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference gradient check


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_elements: int | None = 200, seed: int = 0, floor: float | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Tensors larger than ``max_elements`` are checked on a seeded random subset
    of that many elements.  Relative error per element is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``, by default with
    ``floor = 1e-6 * max(1, |f|)``: central differences carry roundoff of
    about ``2e-16 * |f| / eps``, so gradients that are exactly zero (for
    example key biases under softmax) would otherwise read as large errors.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("gradcheck: f must return a scalar")
    if floor is None:
        floor = 1e-6 * max(1.0, abs(float(out.data)))
    out.backward()
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for t in inputs:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * eps)
            ga = float(g_ad.reshape(-1)[i])
            err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), floor)
            worst = max(worst, err)
    return worst
