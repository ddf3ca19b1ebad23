"""Minimal reverse-mode autodiff engine: dense/conv/recurrent layers plus Adam.

Everything runs on numpy arrays. A forward pass records a tape of parent
links and gradient closures on each result tensor; ``backward`` walks the
tape in reverse topological order. Default precision is float32; gradient
checking code may switch to float64 via ``set_default_dtype``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

_DEFAULT_DTYPE = np.float32

CHECKPOINT_MAGIC = b"L2SP"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GradientError(ArithmeticError):
    """Raised when a non-finite value is met during backpropagation."""


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-d float array with optional gradient buffer and tape links.

    ``requires_grad`` marks leaves (parameters) whose ``grad`` is populated
    by ``backward``. Interior nodes carry gradient closures but do not keep
    their gradients after the pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns",
                 "_op", "_needs_grad")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fns=(),
                 _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._grad_fns = _grad_fns
        self._op = _op
        self._needs_grad = self.requires_grad or any(
            p._needs_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # operator sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def astensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data, parents, grad_fns, op):
    """Build a result tensor, dropping tape links when no parent needs them."""
    if any(p._needs_grad for p in parents):
        return Tensor(data, _parents=tuple(parents), _grad_fns=tuple(grad_fns),
                      _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data + b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(g, b.data.shape)), "add")


def sub(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data - b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(-g, b.data.shape)), "sub")


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data * b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)), "mul")


def div(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.data.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                         b.data.shape)), "div")


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def da(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def db(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _make(out, (a, b), (da, db), "matmul")


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), (da,), "sum")


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.data.shape[i]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = astensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), (lambda g: g.reshape(a.data.shape),), "reshape")


def transpose(a, axes):
    a = astensor(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)
    return _make(out, (a,), (lambda g: np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    a = astensor(a)
    out = np.broadcast_to(a.data, shape)
    return _make(np.ascontiguousarray(out), (a,),
                 (lambda g: _unbroadcast(g, a.data.shape),), "broadcast")


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        def fn(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return fn

    return _make(out, tuple(tensors),
                 tuple(make_fn(i) for i in range(len(tensors))), "concat")


def narrow(a, axis, start, length):
    a = astensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]

    def da(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return full

    return _make(out, (a,), (da,), "narrow")


def relu(a):
    a = astensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), (lambda g: g * (a.data > 0),), "relu")


def sigmoid(a):
    a = astensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),), "tanh")


def exp(a):
    a = astensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,), "exp")


def log(a):
    a = astensor(a)
    out = np.log(a.data)
    return _make(out, (a,), (lambda g: g / a.data,), "log")


def sqrt(a):
    a = astensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), (lambda g: g * 0.5 / out,), "sqrt")


def square(a):
    a = astensor(a)
    return _make(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,), "square")


def softmax(a, axis=-1):
    """Probability-normalize along ``axis`` with max-subtraction for stability."""
    a = astensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax: input must be finite")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def da(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (g - dot) * out

    return _make(out, (a,), (da,), "softmax")


def dropout(a, p, rng, train=True):
    """Inverted dropout; identity when ``train`` is false or p == 0."""
    a = astensor(a)
    if not train or p <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _make(a.data * mask, (a,), (lambda g: g * mask,), "dropout")


# ---------------------------------------------------------------------------
# convolution primitives (im2col / col2im)
# ---------------------------------------------------------------------------

def _pair(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ShapeError(f"expected {n} values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def _resolve_padding(padding, kernel, stride):
    """'same' keeps stride-1 extents; requires odd kernels on padded axes."""
    n = len(kernel)
    if padding == "same":
        pads = []
        for k, s in zip(kernel, stride):
            if k % 2 == 0:
                raise ShapeError("'same' padding requires odd kernel extents")
            pads.append((k - 1) // 2)
        return tuple(pads)
    return _pair(padding, n)


def _im2col(xp, kernel, stride, out_sizes):
    """Extract sliding patches: (B, prod(out), C*prod(kernel))."""
    view = np.lib.stride_tricks.sliding_window_view(
        xp, kernel, axis=tuple(range(2, 2 + len(kernel))))
    sl = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    view = view[sl]
    b, c = xp.shape[0], xp.shape[1]
    # (B, C, *out, *kernel) -> (B, *out, C, *kernel)
    nd = len(kernel)
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    view = np.transpose(view, order)
    return np.ascontiguousarray(view).reshape(
        b, int(np.prod(out_sizes)), c * int(np.prod(kernel)))


def _col2im(dcol, xp_shape, kernel, stride, out_sizes):
    """Scatter-add patch gradients back into the padded input buffer."""
    b, c = xp_shape[0], xp_shape[1]
    nd = len(kernel)
    dcol = dcol.reshape((b,) + tuple(out_sizes) + (c,) + tuple(kernel))
    order = (0, 1 + nd) + tuple(range(2 + nd, 2 + 2 * nd)) + tuple(range(1, 1 + nd))
    dcol = np.transpose(dcol, order)  # (B, C, *kernel, *out)
    dxp = np.zeros(xp_shape, dtype=dcol.dtype)
    for idx in np.ndindex(*kernel):
        sl = (slice(None), slice(None)) + tuple(
            slice(i, i + s * o, s) for i, s, o in zip(idx, stride, out_sizes))
        dxp[sl] += dcol[(slice(None), slice(None)) + idx]
    return dxp


def _conv_nd(x, w, b, stride, padding, nd, op_name):
    x, w = astensor(x), astensor(w)
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError(f"{op_name}: expected {nd + 2}-d input/kernel, got "
                         f"{x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"{op_name}: input has {x.data.shape[1]} channels, "
                         f"kernel expects {w.data.shape[1]}")
    kernel = w.data.shape[2:]
    stride = _pair(stride, nd)
    pads = _resolve_padding(padding, kernel, stride)
    spatial = x.data.shape[2:]
    out_sizes = tuple((s + 2 * p - k) // st + 1
                      for s, p, k, st in zip(spatial, pads, kernel, stride))
    if any(o <= 0 for o in out_sizes):
        raise ShapeError(f"{op_name}: kernel {kernel} larger than padded "
                         f"input {spatial} with padding {pads}")
    pad_spec = ((0, 0), (0, 0)) + tuple((p, p) for p in pads)
    xp = np.pad(x.data, pad_spec) if any(pads) else x.data
    bsz, o_ch = x.data.shape[0], w.data.shape[0]

    col = _im2col(xp, kernel, stride, out_sizes)          # (B, P, CK)
    w2d = w.data.reshape(o_ch, -1)                        # (O, CK)
    out = col @ w2d.T                                     # (B, P, O)
    parents = [x, w]
    if b is not None:
        b = astensor(b)
        if b.data.size != o_ch:
            raise ShapeError(f"{op_name}: bias size {b.data.size} != output "
                             f"channels {o_ch}")
        out = out + b.data.reshape(-1)
        parents.append(b)
    out = np.ascontiguousarray(
        np.moveaxis(out.reshape((bsz,) + out_sizes + (o_ch,)), -1, 1))

    def dx_fn(g):
        g2d = np.moveaxis(g, 1, -1).reshape(bsz, -1, o_ch)   # (B, P, O)
        dcol = g2d @ w2d                                     # (B, P, CK)
        dxp = _col2im(dcol, xp.shape, kernel, stride, out_sizes)
        if any(pads):
            sl = (slice(None), slice(None)) + tuple(
                slice(p, p + s) for p, s in zip(pads, spatial))
            return dxp[sl]
        return dxp

    def dw_fn(g):
        g2d = np.moveaxis(g, 1, -1).reshape(-1, o_ch)        # (BP, O)
        return (g2d.T @ col.reshape(-1, col.shape[-1])).reshape(w.data.shape)

    fns = [dx_fn, dw_fn]
    if b is not None:
        b_shape = b.data.shape
        fns.append(lambda g: g.sum(
            axis=(0,) + tuple(range(2, g.ndim))).reshape(b_shape))
    return _make(out, tuple(parents), tuple(fns), op_name)


def conv1d(x, w, b=None, stride=1, padding=0):
    """x: (B, C, L), w: (O, C, k) -> (B, O, L')."""
    return _conv_nd(x, w, b, stride, padding, 1, "conv1d")


def conv2d(x, w, b=None, stride=1, padding=0):
    """x: (B, C, H, W), w: (O, C, kh, kw) -> (B, O, H', W')."""
    return _conv_nd(x, w, b, stride, padding, 2, "conv2d")


def conv3d(x, w, b=None, stride=1, padding=0):
    """x: (B, C, D, H, W), w: (O, C, kd, kh, kw) -> (B, O, D', H', W')."""
    return _conv_nd(x, w, b, stride, padding, 3, "conv3d")


def conv_transpose2d(x, w, b=None, stride=2, padding=1):
    """x: (B, C, H, W), w: (C, O, kh, kw) -> (B, O, (H-1)s - 2p + kh, ...)."""
    x, w = astensor(x), astensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv_transpose2d: expected 4-d input and kernel")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input has {x.data.shape[1]} channels, "
            f"kernel expects {w.data.shape[0]}")
    kernel = w.data.shape[2:]
    stride = _pair(stride, 2)
    pads = _pair(padding, 2)
    bsz, c_in, h, wd = x.data.shape
    o_ch = w.data.shape[1]
    full = tuple((s - 1) * st + k
                 for s, st, k in zip((h, wd), stride, kernel))
    out_sizes = tuple(f - 2 * p for f, p in zip(full, pads))
    if any(o <= 0 for o in out_sizes):
        raise ShapeError("conv_transpose2d: output size would be non-positive")

    w2d = w.data.reshape(c_in, -1)                     # (C, O*kh*kw)
    x2d = np.moveaxis(x.data, 1, -1).reshape(bsz, -1, c_in)  # (B, HW, C)
    dcol = x2d @ w2d                                   # (B, HW, OK)
    yp = _col2im(dcol, (bsz, o_ch) + full, kernel, stride, (h, wd))
    sl = (slice(None), slice(None)) + tuple(
        slice(p, p + o) for p, o in zip(pads, out_sizes))
    out = np.ascontiguousarray(yp[sl])
    parents = [x, w]
    if b is not None:
        b = astensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def pad_back(g):
        gp = np.zeros((bsz, o_ch) + full, dtype=g.dtype)
        gp[sl] = g
        return gp

    def dx_fn(g):
        col = _im2col(pad_back(g), kernel, stride, (h, wd))  # (B, HW, OK)
        dx2d = col @ w2d.T                                   # (B, HW, C)
        return np.moveaxis(dx2d.reshape(bsz, h, wd, c_in), -1, 1)

    def dw_fn(g):
        col = _im2col(pad_back(g), kernel, stride, (h, wd))
        return (x2d.reshape(-1, c_in).T
                @ col.reshape(-1, col.shape[-1])).reshape(w.data.shape)

    fns = [dx_fn, dw_fn]
    if b is not None:
        fns.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _make(out, tuple(parents), tuple(fns), "conv_transpose2d")


def global_avg_pool(x):
    """Mean over all trailing spatial axes of (B, C, *spatial) -> (B, C)."""
    x = astensor(x)
    axes = tuple(range(2, x.ndim))
    return tmean(x, axis=axes)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Raises GradientError naming the producing operation if a non-finite
    gradient appears.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape "
                         f"{loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise GradientError("loss is not finite")

    # iterative post-order topological sort
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._needs_grad:
                stack.append((p, False))

    flow = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
        for parent, fn in zip(node._parents, node._grad_fns):
            if not parent._needs_grad:
                continue
            pg = fn(g)
            if not np.isfinite(pg).all():
                raise GradientError(
                    f"non-finite gradient produced by op {node._op!r}")
            if id(parent) in flow:
                flow[id(parent)] = flow[id(parent)] + pg
            else:
                flow[id(parent)] = pg


# ---------------------------------------------------------------------------
# modules and layers
# ---------------------------------------------------------------------------

def init_uniform(shape, fan_in, rng):
    """Uniform in +-1/sqrt(fan_in), the project-wide weight init."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(_DEFAULT_DTYPE)


class Module:
    """Base class; parameters are discovered by walking instance attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        yield f"{full}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self):
        return [t for t in self.parameters() if t.requires_grad]

    def freeze(self):
        for t in self.parameters():
            t.requires_grad = False
        return self

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, "
                           f"unexpected={sorted(extra)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != "
                                 f"model shape {t.data.shape}")
            t.data = arr.astype(t.data.dtype)


def parameter_fingerprint(module_or_params):
    """SHA-256 over raw parameter bytes; constant iff values are bit-identical."""
    if isinstance(module_or_params, Module):
        items = module_or_params.named_parameters()
    else:
        items = module_or_params
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = Tensor(init_uniform((in_dim, out_dim), in_dim, rng),
                             requires_grad=True)
        self.bias = Tensor(init_uniform((out_dim,), in_dim, rng),
                           requires_grad=True) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 bias=True):
        kh, kw = _pair(kernel, 2)
        fan_in = in_ch * kh * kw
        self.weight = Tensor(init_uniform((out_ch, in_ch, kh, kw), fan_in, rng),
                             requires_grad=True)
        self.bias = Tensor(init_uniform((out_ch,), fan_in, rng),
                           requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 bias=True):
        kd, kh, kw = _pair(kernel, 3)
        fan_in = in_ch * kd * kh * kw
        self.weight = Tensor(
            init_uniform((out_ch, in_ch, kd, kh, kw), fan_in, rng),
            requires_grad=True)
        self.bias = Tensor(init_uniform((out_ch,), fan_in, rng),
                           requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 bias=True):
        (k,) = _pair(kernel, 1)
        fan_in = in_ch * k
        self.weight = Tensor(init_uniform((out_ch, in_ch, k), fan_in, rng),
                             requires_grad=True)
        self.bias = Tensor(init_uniform((out_ch,), fan_in, rng),
                           requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=2, padding=1,
                 bias=True):
        kh, kw = _pair(kernel, 2)
        fan_in = in_ch * kh * kw
        self.weight = Tensor(init_uniform((in_ch, out_ch, kh, kw), fan_in, rng),
                             requires_grad=True)
        self.bias = Tensor(init_uniform((out_ch,), fan_in, rng),
                           requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride,
                                self.padding)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmState:
    """Per-(layer, direction) hidden and cell tensors, each (B, hidden)."""
    hidden: list
    cell: list

    def __post_init__(self):
        if len(self.hidden) != len(self.cell):
            raise ShapeError("LstmState: hidden and cell layer counts differ")
        for h, c in zip(self.hidden, self.cell):
            if h.data.shape != c.data.shape:
                raise ShapeError("LstmState: hidden/cell shape mismatch")


def lstm_cell(x, h, c, w_x, w_h, b):
    """One LSTM step. Gate layout along the last axis: input, forget, cell, output."""
    hidden = h.data.shape[-1]
    gates = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


class LSTM(Module):
    """Stacked (optionally bidirectional) LSTM over (B, T, D) inputs."""

    def __init__(self, input_dim, hidden_dim, layers, rng, bidirectional=False):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.bidirectional = bidirectional
        dirs = 2 if bidirectional else 1
        self.w_x, self.w_h, self.b = [], [], []
        for layer in range(layers):
            in_dim = input_dim if layer == 0 else hidden_dim * dirs
            for _ in range(dirs):
                self.w_x.append(Tensor(
                    init_uniform((in_dim, 4 * hidden_dim), in_dim, rng),
                    requires_grad=True))
                self.w_h.append(Tensor(
                    init_uniform((hidden_dim, 4 * hidden_dim), hidden_dim, rng),
                    requires_grad=True))
                self.b.append(Tensor(
                    init_uniform((4 * hidden_dim,), hidden_dim, rng),
                    requires_grad=True))

    def zero_state(self, batch, dtype=None):
        dirs = 2 if self.bidirectional else 1
        dt = dtype or self.w_x[0].data.dtype
        zeros = [Tensor(np.zeros((batch, self.hidden_dim), dtype=dt))
                 for _ in range(self.layers * dirs)]
        return LstmState(list(zeros), [Tensor(np.zeros((batch, self.hidden_dim),
                                                       dtype=dt))
                                       for _ in range(self.layers * dirs)])

    def __call__(self, x, initial=None):
        return lstm_forward(x, self, initial, self.bidirectional)


def lstm_forward(inputs, lstm, initial=None, bidirectional=None):
    """Run ``lstm`` over (B, T, D) inputs.

    Returns (outputs (B, T, H*dirs), final LstmState). The final state of
    the reverse direction is the state after consuming the sequence
    back-to-front.
    """
    inputs = astensor(inputs)
    if inputs.ndim != 3:
        raise ShapeError(f"lstm_forward expects (B, T, D), got {inputs.shape}")
    bsz, steps, in_dim = inputs.data.shape
    if steps == 0:
        raise ShapeError("lstm_forward: empty sequence")
    if in_dim != lstm.input_dim:
        raise ShapeError(f"lstm_forward: input dim {in_dim} != expected "
                         f"{lstm.input_dim}")
    if bidirectional is None:
        bidirectional = lstm.bidirectional
    dirs = 2 if bidirectional else 1
    if initial is None:
        initial = lstm.zero_state(bsz, inputs.data.dtype)

    seq = [reshape(narrow(inputs, 1, t, 1), (bsz, in_dim))
           for t in range(steps)]
    final_h, final_c = list(initial.hidden), list(initial.cell)
    layer_in = seq
    for layer in range(lstm.layers):
        dir_outs = []
        for d in range(dirs):
            idx = layer * dirs + d
            h, c = initial.hidden[idx], initial.cell[idx]
            outs = [None] * steps
            time = range(steps) if d == 0 else range(steps - 1, -1, -1)
            for t in time:
                h, c = lstm_cell(layer_in[t], h, c,
                                 lstm.w_x[idx], lstm.w_h[idx], lstm.b[idx])
                outs[t] = h
            final_h[idx], final_c[idx] = h, c
            dir_outs.append(outs)
        if dirs == 2:
            layer_in = [concat([f, b], axis=1)
                        for f, b in zip(dir_outs[0], dir_outs[1])]
        else:
            layer_in = dir_outs[0]
    stacked = concat([reshape(h, (bsz, 1, -1)) for h in layer_in], axis=1)
    return stacked, LstmState(final_h, final_c)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    first_moment: list
    second_moment: list
    lr: float
    beta1: float
    beta2: float
    eps: float


class Adam:
    """Adam with bias correction; moments kept per parameter."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(
            step=0,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        s = self.state
        s.step += 1
        b1c = 1.0 - s.beta1 ** s.step
        b2c = 1.0 - s.beta2 ** s.step
        for p, m, v in zip(self.params, s.first_moment, s.second_moment):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise GradientError("adam_step: non-finite gradient")
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data = p.data - s.lr * (m / b1c) / (np.sqrt(v / b2c) + s.eps)


def adam_step(params, grads, state):
    """Functional single Adam update; mutates and returns (params, state)."""
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment,
                          state.second_moment):
        if not np.isfinite(g).all():
            raise GradientError("adam_step: non-finite gradient")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(path, named_params):
    """Write parameters in the project binary format (f32 little-endian)."""
    items = list(named_params.items()) if isinstance(named_params, dict) \
        else list(named_params)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(items)))
        for name, tensor in items:
            arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered {name: float32 array} dict."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        count, = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            name_len, = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            rank, = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.copy()
        return out
