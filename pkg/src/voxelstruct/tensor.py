"""Dense tensors with a reverse-mode gradient tape.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape everything runs forward-only,
so evaluation code never pays for bookkeeping.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x.data
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("op", "out", "parents", "vjp")

    def __init__(self, op, out, parents, vjp):
        self.op = op
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Backward visits nodes in exact reverse recording order and may run once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, out: Tensor, parents: Sequence[Tensor], vjp) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(op, out, tuple(parents), vjp))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for i in range(loss.node_id, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            needs = tuple(p.requires_grad for p in node.parents)
            pgs = node.vjp(g, needs)
            for parent, need, pg in zip(node.parents, needs, pgs):
                if not need or pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite gradient produced by node {i} ({node.op})")
                if parent._tape is self:
                    j = parent.node_id
                    if j in grads:
                        grads[j] = grads[j] + pg
                    else:
                        grads[j] = pg
                else:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                    else:
                        parent.grad = parent.grad + pg
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Run backward on the tape that recorded ``loss``."""
    if loss._tape is None:
        raise ValueError("loss is not on any tape")
    loss._tape.backward(loss)


def _active_tape():
    s = _stack()
    return s[-1] if s else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the result of ``op`` and record it when gradients are needed.

    ``vjp(g, needs)`` returns one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {op} output")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, out, parents, vjp)
    return out


def _pair(a, b):
    # constants adopt the tensor operand's dtype so float32 graphs stay float32
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make("add", a.data + b.data, (a, b),
                lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                              _unbroadcast(g, sb) if n[1] else None))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make("sub", a.data - b.data, (a, b),
                lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                              _unbroadcast(-g, sb) if n[1] else None))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make("mul", ad * bd, (a, b),
                lambda g, n: (_unbroadcast(g * bd, ad.shape) if n[0] else None,
                              _unbroadcast(g * ad, bd.shape) if n[1] else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make("div", out, (a, b),
                lambda g, n: (_unbroadcast(g / bd, ad.shape) if n[0] else None,
                              _unbroadcast(-g * out / bd, bd.shape) if n[1] else None))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make("pow", ad ** p, (a,), lambda g, n: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make("exp", out, (a,), lambda g, n: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):  # make() reports non-finite values
        out = np.log(ad)
    return make("log", out, (a,), lambda g, n: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def vjp(g, n):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return make("sqrt", out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return make("clip", np.clip(ad, lo, hi), (a,), lambda g, n: (g * mask,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make("relu", x.data * mask, (x,), lambda g, n: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return make("sigmoid", out, (x,), lambda g, n: (g * out * (1.0 - out),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g, n):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make("sum", np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make("reshape", a.data.reshape(shape), (a,), lambda g, n: (g.reshape(old),))


def index(a, key) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def vjp(g, n):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return make("index", a.data[key], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g, n):
        return tuple(np.split(g, sizes, axis=axis))

    return make("concat", np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


# ---------------------------------------------------------------- layers

def dense(x, w, b=None) -> Tensor:
    """y = x @ w + b for x [B,I], w [I,O], b [O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: x {x.shape} incompatible with w {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (wd.shape[1],):
            raise DimensionError(f"dense: bias {b.shape} does not match w {w.shape}")
        out = out + b.data
        parents.append(b)

    def vjp(g, n):
        gx = g @ wd.T if n[0] else None
        gw = xd.T @ g if n[1] else None
        if len(n) == 3:
            return gx, gw, (g.sum(axis=0) if n[2] else None)
        return gx, gw

    return make("dense", out, parents, vjp)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    num = size + 2 * pad - k
    if num < 0 or num % stride:
        raise ConfigurationError(
            f"non-integral conv output: ({size} + 2*{pad} - {k}) / {stride} + 1")
    return num // stride + 1


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _crop(xp, pad):
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad, pad:-pad])


def _check_conv(x, k, name):
    if x.data.ndim != 5 or k.data.ndim != 5:
        raise DimensionError(f"{name}: expected 5-d input and kernel, got {x.shape} and {k.shape}")
    if len(set(k.shape[2:])) != 1:
        raise DimensionError(f"{name}: kernel must be cubic, got {k.shape}")


def conv3d(x, k, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Cross-correlation of x [B,C,D,H,W] with k [F,C,k,k,k]."""
    x, k = as_tensor(x), as_tensor(k)
    _check_conv(x, k, "conv3d")
    B, C = x.shape[:2]
    F, Ck, ks = k.shape[0], k.shape[1], k.shape[2]
    if Ck != C:
        raise DimensionError(f"conv3d: input channels {C} != kernel channels {Ck} ({x.shape} vs {k.shape})")
    osz = tuple(conv_output_size(s, ks, stride, pad) for s in x.shape[2:])
    xp = _pad(x.data, pad)
    cols = kernels.im2col3d(xp, ks, stride, osz)
    w2 = k.data.reshape(F, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, F, 1)
    out = out.reshape((B, F) + osz)
    pshape = xp.shape
    parents = [x, k] + ([bias] if bias is not None else [])

    def vjp(g, n):
        g2 = g.reshape(B, F, -1)
        gx = gk = gb = None
        if n[0]:
            dcols = np.matmul(w2.T, g2)
            gx = _crop(kernels.col2im3d(np.ascontiguousarray(dcols), pshape, ks, stride, osz), pad)
        if n[1]:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
        if len(n) == 3 and n[2]:
            gb = g2.sum(axis=(0, 2))
        return (gx, gk, gb)[: len(n)]

    return make("conv3d", out, parents, vjp)


def conv_transpose3d(x, k, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Adjoint of ``conv3d`` with the same kernel: x [B,F,...], k [F,C,k,k,k] -> [B,C,...]."""
    x, k = as_tensor(x), as_tensor(k)
    _check_conv(x, k, "conv_transpose3d")
    B, F = x.shape[:2]
    Fk, C, ks = k.shape[0], k.shape[1], k.shape[2]
    if Fk != F:
        raise DimensionError(f"conv_transpose3d: input channels {F} != kernel dim 0 {Fk} ({x.shape} vs {k.shape})")
    isz = x.shape[2:]
    osz = tuple((s - 1) * stride - 2 * pad + ks for s in isz)
    if min(osz) < 1:
        raise ConfigurationError(f"conv_transpose3d: empty output for input {isz}")
    for o, s in zip(osz, isz):
        if conv_output_size(o, ks, stride, pad) != s:
            raise ConfigurationError("conv_transpose3d: shapes are not the adjoint of a conv3d")
    pshape = (B, C) + tuple(o + 2 * pad for o in osz)
    w2 = k.data.reshape(F, -1)
    xr = x.data.reshape(B, F, -1)
    cols = np.ascontiguousarray(np.matmul(w2.T, xr))
    out = _crop(kernels.col2im3d(cols, pshape, ks, stride, isz), pad)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, C, 1, 1, 1)
    parents = [x, k] + ([bias] if bias is not None else [])

    def vjp(g, n):
        gcols = kernels.im2col3d(_pad(g, pad), ks, stride, isz)
        gx = gk = gb = None
        if n[0]:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if n[1]:
            gk = np.matmul(xr, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
        if len(n) == 3 and n[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gk, gb)[: len(n)]

    return make("conv_transpose3d", out, parents, vjp)


def maxpool3d(x, window: int) -> Tensor:
    """Non-overlapping max pool; ties route the gradient to the lowest index."""
    x = as_tensor(x)
    if x.data.ndim != 5:
        raise DimensionError(f"maxpool3d: expected 5-d input, got {x.shape}")
    if any(s % window for s in x.shape[2:]):
        raise ConfigurationError(f"maxpool3d: spatial dims {x.shape[2:]} not divisible by {window}")
    xd = np.ascontiguousarray(x.data)
    out, idx = kernels.maxpool3d_forward(xd, window)
    shape = x.shape

    def vjp(g, n):
        return (kernels.maxpool3d_backward(np.ascontiguousarray(g), idx, window, shape),)

    return make("maxpool3d", out, (x,), vjp)


def reparameterize(mu, logvar, noise) -> Tensor:
    """z = mu + exp(0.5 * logvar) * noise, with noise held constant."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    eps = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=mu.dtype)
    if not (mu.shape == logvar.shape == eps.shape):
        raise DimensionError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {eps.shape}")
    std_eps = np.exp(0.5 * logvar.data) * eps
    return make("reparameterize", mu.data + std_eps, (mu, logvar),
                lambda g, n: (g if n[0] else None, 0.5 * g * std_eps if n[1] else None))


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with batch statistics over (B, spatial)."""
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = (1, -1) + (1,) * (x.data.ndim - 2)
    mu = mean(x, axes).reshape(shape)
    xc = x - mu
    var = mean(xc * xc, axes).reshape(shape)
    xhat = xc / sqrt(var + eps)
    return xhat * reshape(gamma, shape) + reshape(beta, shape)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


# ---------------------------------------------------------------- checks

def gradient_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if not np.isfinite(y.data).all():
        raise NumericError("f is non-finite at the base point")
    if y._tape is tape:
        tape.backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is non-finite at probe point {i}")
        nflat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
