"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op records a node (inputs + backward rule + a global
sequence number). ``Tensor.backward`` collects the nodes reachable from the
loss and replays them in reverse recording order, so each node runs exactly
once after all of its consumers. Leaf gradients accumulate into ``.grad``.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError, NumericError

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them (evaluation, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

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
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data)

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in tensor {self.name or ''} of shape {self.shape}")
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if self._node is None:
            if self.requires_grad:
                self.grad = grad.copy() if self.grad is None else self.grad + grad
            return
        pending = {id(self): grad}
        for t in tape(self):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            for p, pg in zip(node.parents, node.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    pending[key] = pg if key not in pending else pending[key] + pg

    # operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return mul(self, reciprocal(o))
        return scale(self, 1.0 / o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tape(root: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``root``, newest node first."""
    seen = set()
    found = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(t._node.parents)
    found.sort(key=lambda t: t._node.seq, reverse=True)
    return found


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data, parents, backward, op):
    req = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, req)
    if req:
        out._node = _Node(op, tuple(parents), backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), back, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _result(out, (a,), back, "gelu")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; backward scatters with ``np.add.at``."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), back, "getitem")


def take_rows(a, rows) -> Tensor:
    """Gather rows along axis 0 (embedding lookup)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _result(a.data[rows], (a,), back, "take_rows")


embedding = take_rows


def concat(tensors: Sequence, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, back, "concat")


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast (batched attention)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: x @ weight.T + bias, weight is [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear input dim {x.shape[-1]} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, back, "linear")


# ---------------------------------------------------------------- normalisation / activations

def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back, "softmax")


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    d = xd.shape[-1]

    def back(g):
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0)
        gbias = lead.sum(axis=0)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------- convolutions

def depthwise_conv2d(x, kernel, pad_h=None, pad_w=None) -> Tensor:
    """Per-channel 'same' cross-correlation (no kernel flip, zero padding, no bias).

    x: [B, d, H, W]; kernel: [d, k_h, k_w] with both extents odd.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim != 4 or kernel.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    kh, kw = kernel.shape[1:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"depthwise_conv2d needs odd kernel extents, got {kh}x{kw}")
    if (pad_h is not None and pad_h != kh // 2) or (pad_w is not None and pad_w != kw // 2):
        raise ConfigError("depthwise_conv2d only supports same padding (k - 1) / 2")
    xd, kd = x.data, kernel.data

    def back(g):
        return kernels.dwconv2d_backward(xd, kd, g)

    return _result(kernels.dwconv2d_forward(xd, kd), (x, kernel), back, "depthwise_conv2d")


def conv1d(x, weight, bias=None, stride=1, pad=0) -> Tensor:
    """x: [N, C_in, L]; weight: [C_out, C_in, K]; bias: [C_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = kernels.conv1d_forward(xd, wd, stride, pad)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None]
        parents.append(bias)

    def back(g):
        gx, gw = kernels.conv1d_backward(xd, wd, g, stride, pad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _result(out, parents, back, "conv1d")


# ---------------------------------------------------------------- spectral (off-tape)

def rdft_magnitude(x):
    """|real DFT| over the last axis by direct summation; result never carries gradient."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    t = arr.shape[-1]
    if t % 2:
        raise ConfigError(f"rdft_magnitude needs an even length, got {t}")
    lead = arr.shape[:-1]
    out = kernels.dft_magnitude(arr.reshape(-1, t)).reshape(*lead, t // 2 + 1)
    return Tensor._wrap(out) if isinstance(x, Tensor) else out


# ---------------------------------------------------------------- losses

def mse(pred, target) -> Tensor:
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------- verification

def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def grad_check(f: Callable[[Tensor], Tensor], x, h=1e-5, coords=None) -> float:
    """Max relative error between tape gradient and central differences.

    ``coords`` optionally restricts the finite-difference sweep to a list of
    flat indices.
    """
    if h <= 0:
        raise ConfigError("grad_check step h must be positive")
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = _central_differences(lambda: f(x).item(), x, h, coords)
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    return float(rel_error(analytic.reshape(-1)[idx], numeric).max())


def grad_check_many(f: Callable[[], Tensor], tensors: Sequence[Tensor], h=1e-5,
                    coords_per_tensor=None, rng=None) -> dict:
    """Gradient check of a closure against several tensors at once.

    Returns {name-or-index: max relative error}. With ``coords_per_tensor`` a
    random subset of that many coordinates is checked per tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    results = {}
    for i, t in enumerate(tensors):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if coords_per_tensor is None or coords_per_tensor >= t.size:
            idx = np.arange(t.size)
        else:
            idx = np.sort(rng.choice(t.size, coords_per_tensor, replace=False))
        numeric = _central_differences(lambda: f().item(), t, h, idx)
        results[t.name or i] = float(rel_error(analytic.reshape(-1)[idx], numeric).max())
    return results


def _central_differences(evaluate, x: Tensor, h, coords):
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = []
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            out.append((up - down) / (2 * h))
    return np.array(out)
