"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op is a plain function that computes its numpy result and, when any
input is tracked, attaches a closure mapping the output adjoint to one adjoint
per parent. ``backward`` replays those closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True
CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    order = topological_order(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1),)

    return _make(ad**p, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)

    def bw(g):
        return (g * (s + ad * s * (1.0 - s)),)

    return _make(ad * s, (a,), bw, "silu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype)
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask is a constant."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)

    return _make(out, (a, b), bw, "where")


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    a = as_tensor(a)
    ax = axis % a.ndim
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    if start != a.shape[ax]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    return out


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), bw, "cumsum")


def pad_time(a, left: int, right: int, mode: str = "zero") -> Tensor:
    """Pad the last axis; ``mode`` is ``zero`` or ``edge`` (replicate)."""
    a = as_tensor(a)
    T = a.shape[-1]
    widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    out = np.pad(a.data, widths, mode="constant" if mode == "zero" else "edge")

    def bw(g):
        gi = g[..., left : left + T].copy()
        if mode == "edge":
            if left:
                gi[..., 0] += g[..., :left].sum(axis=-1)
            if right:
                gi[..., -1] += g[..., left + T :].sum(axis=-1)
        return (gi,)

    return _make(out, (a,), bw, "pad")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        a2 = ad if ad.ndim > 1 else ad[None, :]
        b2 = bd if bd.ndim > 1 else bd[:, None]
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bw, "matmul")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Output labels must be unique and drawn from the inputs."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_lbl = spec.replace(" ", "").split("->")
    la, lb = ins.split(",")
    ad, bd = a.data, b.data
    out = np.einsum(spec, ad, bd, optimize=True)

    def grad_for(g, other, l_other, l_self, self_shape):
        # labels of self absent from both out and other were summed away; broadcast back
        present = set(out_lbl) | set(l_other)
        kept = "".join(c for c in l_self if c in present)
        r = np.einsum(f"{out_lbl},{l_other}->{kept}", g, other, optimize=True)
        if kept != l_self:
            shape = [self_shape[i] if c in present else 1 for i, c in enumerate(l_self)]
            r = np.broadcast_to(r.reshape(shape), self_shape).copy()
        return r

    def bw(g):
        return grad_for(g, bd, lb, la, ad.shape), grad_for(g, ad, la, lb, bd.shape)

    return _make(out, (a, b), bw, "einsum")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else y + bias


# ---------------------------------------------------------------------------
# signal ops

def conv1d(x, w, bias=None, stride: int = 1, padding: int | tuple[int, int] = 0, groups: int = 1) -> Tensor:
    """1D cross-correlation over the last axis with zero padding.

    ``padding`` is symmetric or an explicit ``(left, right)`` pair.
    ``groups`` must be 1 or equal to the input channel count (depthwise).
    """
    x, w = as_tensor(x), as_tensor(w)
    B, Cin, T = x.shape
    Cout, Cw, K = w.shape
    left, right = (padding, padding) if isinstance(padding, int) else padding
    if K < 1:
        raise ValueError("kernel size must be >= 1")
    if T + left + right < K:
        raise ValueError(f"kernel size {K} larger than padded input length {T + left + right}")
    if groups not in (1, Cin):
        raise ValueError("only groups=1 or depthwise groups are supported")
    if groups == 1 and Cw != Cin:
        raise ValueError(f"conv1d channel mismatch: input {Cin}, weight {Cw}")
    if groups == Cin and groups != 1 and (Cw != 1 or Cout != Cin):
        raise ValueError("depthwise conv expects weight of shape (C, 1, K)")
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if (left or right) else xd
    Tp = xp.shape[-1]
    Tout = (Tp - K) // stride + 1
    span = stride * (Tout - 1) + 1
    depthwise = groups != 1

    if depthwise:
        out = np.zeros((B, Cin, Tout), dtype=np.result_type(xd, wd))
        for k in range(K):
            out += wd[None, :, 0, k : k + 1] * xp[:, :, k : k + span : stride]
    else:
        cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]  # B,Cin,Tout,K
        cols2 = cols.transpose(0, 2, 1, 3).reshape(B, Tout, Cin * K)
        out = (cols2 @ wd.reshape(Cout, Cin * K).T).transpose(0, 2, 1)
    parents: list[Tensor] = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros_like(wd)
            for k in range(K):
                seg = xp[:, :, k : k + span : stride]
                gw[:, 0, k] = np.einsum("bct,bct->c", g, seg)
                gxp[:, :, k : k + span : stride] += g * wd[None, :, 0, k : k + 1]
        else:
            gt = g.transpose(0, 2, 1)  # B,Tout,Cout
            gw = np.tensordot(gt, cols2, axes=([0, 1], [0, 1])).reshape(Cout, Cin, K)
            gcols = (gt @ wd.reshape(Cout, Cin * K)).reshape(B, Tout, Cin, K)
            for k in range(K):
                gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, left : left + T]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, parents, bw, "conv1d")


def maxpool1d(x, window: int) -> Tensor:
    """Non-overlapping max over windows of the last axis; ties go to the first index."""
    x = as_tensor(x)
    *lead, T = x.shape
    if T % window:
        raise ValueError(f"length {T} not divisible by pooling window {window}")
    xr = x.data.reshape(*lead, T // window, window)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, arg[..., None], g[..., None], axis=-1)
        return (gr.reshape(x.shape),)

    return _make(out, (x,), bw, "maxpool1d")


def upsample_linear(x, factor: int) -> Tensor:
    """Piecewise-linear upsampling of the last axis.

    Output index ``t`` samples input position ``t / factor``; positions past the
    final knot replicate the last sample, so the output length is ``T * factor``.
    """
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("upsampling factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    T = x.shape[-1]
    t = np.arange(T * factor)
    i0 = t // factor
    frac = ((t % factor) / factor).astype(x.dtype)
    i1 = np.minimum(i0 + 1, T - 1)
    xd = x.data
    out = xd[..., i0] * (1 - frac) + xd[..., i1] * frac

    def bw(g):
        shp = g.shape[:-1] + (T, factor)
        g0 = (g * (1 - frac)).reshape(shp).sum(axis=-1)
        g1 = (g * frac).reshape(shp).sum(axis=-1)
        gx = g0
        gx[..., 1:] += g1[..., :-1]
        gx[..., -1] += g1[..., -1]
        return (gx,)

    return _make(out.astype(xd.dtype), (x,), bw, "upsample")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.isnan(xd).any():
        raise FloatingPointError("softmax input contains NaN")
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def groupnorm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """GroupNorm over (B, C, T): statistics per sample and channel group."""
    x = as_tensor(x)
    B, C, T = x.shape
    if C % groups:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    xg = reshape(x, (B, groups, (C // groups) * T))
    mu = mean(xg, axis=2, keepdims=True)
    xc = xg - mu
    var = mean(xc * xc, axis=2, keepdims=True)
    xn = reshape(xc / sqrt(var + eps), (B, C, T))
    return xn * reshape(as_tensor(gamma), (1, C, 1)) + reshape(as_tensor(beta), (1, C, 1))


def rms_norm(x, scale, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis by its root mean square, then scale."""
    ms = mean(x * x, axis=-1, keepdims=True)
    return x / sqrt(ms + eps) * scale


def rfft_mag2_diff(y, yhat) -> Tensor:
    """Per-bin ``|F(y)_j - F(yhat)_j|^2`` of the unnormalized real DFT along the last axis."""
    y, yhat = as_tensor(y), as_tensor(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    d = y.data - yhat.data
    T = d.shape[-1]
    F = np.fft.rfft(d, axis=-1)
    out = (F.real**2 + F.imag**2).astype(d.dtype)
    nb = F.shape[-1]

    def bw(g):
        full = np.zeros(d.shape[:-1] + (T,), dtype=np.complex128)
        full[..., :nb] = g * F
        gd = (2.0 * T * np.fft.ifft(full, axis=-1).real).astype(d.dtype)
        return gd, -gd

    return _make(out, (y, yhat), bw, "rfft_mag2_diff")


# ---------------------------------------------------------------------------
# finite-difference oracle

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. ``indices`` restricts the check to
    a subset of flat coordinates.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    backward(loss)
    analytic = xt.grad.reshape(-1) if xt.grad is not None else np.zeros(base.size)
    coords = range(base.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            xp = base.copy().reshape(-1)
            xp[i] += eps
            fp = f(Tensor(xp.reshape(base.shape))).item()
            xp[i] -= 2 * eps
            fm = f(Tensor(xp.reshape(base.shape))).item()
            num = (fp - fm) / (2 * eps)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
