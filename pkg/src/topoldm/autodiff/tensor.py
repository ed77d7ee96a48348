"""Reverse-mode automatic differentiation over numpy arrays.

Each op computes its forward value eagerly and records a closure mapping the
output gradient to gradients of its inputs.  ``Tensor.backward`` walks the
recorded graph in reverse topological order.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError

_state = {"dtype": np.float32, "grad": True}
_ids = itertools.count()


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled():
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "id", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op}" if self._op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs an explicit gradient for non-scalar shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {self.id: np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _state["dtype"]
    return Tensor(np.asarray(x), dtype=dtype)


def _result_dtype(*tensors):
    return np.result_type(*[t.data.dtype for t in tensors])


def _make(data, parents, backward, op):
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype if hasattr(data, "dtype") else None)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and grad.shape[k] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# --- elementwise binary -------------------------------------------------

def add(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), backward, "pow")


# --- elementwise unary --------------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def silu(a):
    a = as_tensor(a)
    sig = _sigmoid(a.data)
    return _make(a.data * sig, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),), "silu")


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


# --- reductions and shape ops -------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[k] for k in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    basic = all(isinstance(k, (int, slice, type(None), type(Ellipsis)))
                for k in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[k] != ref[k] for k in range(len(ref)) if k != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# --- linear algebra -----------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


_CHUNK_ELEMS = 1 << 19  # im2col buffer size kept near cache


def _im2col(xp, kh, kw, s, Ho, Wo, out=None):
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xp.dtype) if out is None else out[:B]
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation.  ``x`` is (B, C, H, W), ``weight`` is (O, C/groups, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups or Cg != C // groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape} for groups={groups}")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    dtype = _result_dtype(x, weight)
    xp = _pad(x.data.astype(dtype, copy=False), p)
    w = weight.data.astype(dtype, copy=False)
    G, Og = groups, O // groups
    depthwise = Cg == 1 and Og == 1 and G > 1
    K = Cg * kh * kw
    pointwise = kh == kw == 1 and s == 1 and p == 0
    chunk = max(1, _CHUNK_ELEMS // max(C * kh * kw * Ho * Wo, 1))
    wm = w.reshape(G, Og, K)

    def columns(b0, b1, buf):
        if pointwise:
            return xp[b0:b1].reshape(b1 - b0, C, Ho * Wo)
        return _im2col(xp[b0:b1], kh, kw, s, Ho, Wo, buf)

    if depthwise:
        out = np.zeros((B, C, Ho, Wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] * w[:, 0, i, j][None, :, None, None]
    else:
        out = np.empty((B, G, Og, Ho * Wo), dtype=dtype)
        buf = None if pointwise else np.empty((min(chunk, B), C, kh, kw, Ho, Wo), dtype=dtype)
        for b0 in range(0, B, chunk):
            b1 = min(B, b0 + chunk)
            cols = columns(b0, b1, buf).reshape(b1 - b0, G, K, Ho * Wo)
            np.matmul(wm, cols, out=out[b0:b1])
        out = out.reshape(B, O, Ho, Wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, O, 1, 1).astype(dtype, copy=False)
        parents.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = None
        if depthwise:
            gw = np.empty_like(w) if weight.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + s * Ho, s), slice(j, j + s * Wo, s))
                    if gw is not None:
                        gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                    if gxp is not None:
                        gxp[sl] += g * w[:, 0, i, j][None, :, None, None]
        else:
            gm = g.reshape(B, G, Og, Ho * Wo)
            gwm = np.zeros((G, Og, K), dtype=dtype) if weight.requires_grad else None
            wt = wm.transpose(0, 2, 1)
            buf = None if pointwise else np.empty((min(chunk, B), C, kh, kw, Ho, Wo), dtype=dtype)
            for b0 in range(0, B, chunk):
                b1 = min(B, b0 + chunk)
                gb = gm[b0:b1]
                if gwm is not None:
                    cols = columns(b0, b1, buf).reshape(b1 - b0, G, K, Ho * Wo)
                    gwm += np.matmul(gb, cols.transpose(0, 1, 3, 2)).sum(axis=0)
                if gxp is not None and O == 1 and not pointwise:
                    # single output channel: an outer product, cheaper as broadcasts
                    tgt = gxp[b0:b1]
                    for i in range(kh):
                        for j in range(kw):
                            tgt[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += (
                                g[b0:b1] * w[0, :, i, j][None, :, None, None])
                elif gxp is not None:
                    dcols = np.matmul(wt, gb).reshape(b1 - b0, C, kh, kw, Ho, Wo)
                    if pointwise:
                        gxp[b0:b1] += dcols.reshape(b1 - b0, C, Ho, Wo)
                        continue
                    tgt = gxp[b0:b1]
                    for i in range(kh):
                        for j in range(kw):
                            tgt[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, i, j]
            gw = gwm.reshape(w.shape) if gwm is not None else None
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def upsample2x(x):
    """Nearest-neighbour upsampling of the last two axes by a factor of 2."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"upsample2x needs at least 2-D input, got {x.shape}")
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        *lead, h2, w2 = g.shape
        return (g.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward, "upsample2x")


def group_norm(x, num_groups=8, weight=None, bias=None, eps=1e-5):
    """Normalize (B, C, ...) over channel groups, then apply per-channel affine."""
    x = as_tensor(x)
    B, C = x.shape[:2]
    if C % num_groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {num_groups} groups")
    spatial = x.shape[2:]
    xg = x.data.reshape(B, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * len(spatial)
    out = xhat
    parents = [x]
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data.reshape(bshape)
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(bshape)
        parents.append(bias)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        dxhat = g * weight.data.reshape(bshape) if weight is not None else g
        dg = dxhat.reshape(B, num_groups, -1)
        xh = xhat.reshape(B, num_groups, -1)
        n = dg.shape[2]
        gx = inv / n * (n * dg - dg.sum(axis=2, keepdims=True) - xh * (dg * xh).sum(axis=2, keepdims=True))
        grads = [gx.reshape(x.shape)]
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), parents, backward, "group_norm")
