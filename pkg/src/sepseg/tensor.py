"""Dense tensors with reverse-mode automatic differentiation.

Design:
  - A Tensor wraps a contiguous numpy array (f32 or f64 only) plus an optional
    gradient of identical shape/dtype.
  - Gradients are recorded on an explicit Tape. Ops record themselves only
    while a tape is active AND some input can influence a tracked leaf, so
    inference outside a tape context carries no bookkeeping cost.
  - backward(loss) replays the active tape in reverse creation order (which is
    a reverse topological order), accumulates gradients additively across
    fan-out, materializes zero gradients for touched-but-off-path leaves, and
    clears the tape.

Each tape is confined to one thread; the active-tape stack is thread-local.
"""

import math
import threading
from functools import lru_cache

import numpy as np

from . import _convops, backend


class ShapeError(ValueError):
    """Raised for any shape/dtype mismatch; message names the op and shapes."""


def _fail(op: str, msg: str, *shapes) -> ShapeError:
    detail = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: {msg}" + (f" ({detail})" if detail else ""))


_tls = threading.local()


def _stack():
    s = getattr(_tls, "tapes", None)
    if s is None:
        s = _tls.tapes = []
    return s


def _active_tape():
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of differentiable ops for one backward pass."""

    def __init__(self):
        self._ops = []      # (out, inputs, backward_fn) in creation order
        self._leaves = set()  # requires_grad leaves touched by recorded ops

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def clear(self):
        self._ops.clear()
        self._leaves.clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._needs_grad = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise _fail("item", "tensor is not a scalar", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(op: str, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise _fail(op, f"mixed dtypes {dt} and {t.dtype}")


def _record(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is None:
        return
    if not any(t._needs_grad for t in inputs):
        return
    out._needs_grad = True
    tape._ops.append((out, inputs, backward_fn))
    for t in inputs:
        if t.requires_grad:
            tape._leaves.add(t)


def _accumulate(t: Tensor, g):
    if t.grad is None:
        t.grad = np.ascontiguousarray(g)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Reverse-replay the active tape from `loss`; clears the tape afterwards."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward: no active Tape")
    if loss.data.size != 1:
        raise _fail("backward", "loss must be a scalar", loss.shape)
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape._ops):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is None or not t._needs_grad:
                continue
            if g.shape != t.data.shape:
                raise _fail("backward", "gradient shape mismatch", g.shape, t.data.shape)
            _accumulate(t, g)
    for t in tape._leaves:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape.clear()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    b = _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    a = _as_tensor(a, b.dtype)
    _check_dtypes("add", a, b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise _fail("add", "cannot broadcast", a.shape, b.shape) from None
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    b = _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    a = _as_tensor(a, b.dtype)
    _check_dtypes("sub", a, b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise _fail("sub", "cannot broadcast", a.shape, b.shape) from None
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b):
    b = _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    a = _as_tensor(a, b.dtype)
    _check_dtypes("mul", a, b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise _fail("mul", "cannot broadcast", a.shape, b.shape) from None
    _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                    _unbroadcast(g * a.data, b.shape)))
    return out


def div(a, b):
    b = _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    a = _as_tensor(a, b.dtype)
    _check_dtypes("div", a, b)
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        raise _fail("div", "cannot broadcast", a.shape, b.shape) from None
    _record(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                    _unbroadcast(-g * out.data / b.data, b.shape)))
    return out


def neg(a):
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


def power(a, p):
    p = float(p)
    out = Tensor(a.data ** p)
    _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))
    return out


def texp(a):
    out = Tensor(np.exp(a.data))
    _record(out, (a,), lambda g: (g * out.data,))
    return out


def tlog(a):
    out = Tensor(np.log(a.data))
    _record(out, (a,), lambda g: (g / a.data,))
    return out


def tsqrt(a):
    out = Tensor(np.sqrt(a.data))
    _record(out, (a,), lambda g: (g * 0.5 / out.data,))
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    _record(out, (a,), lambda g: (g * (a.data > 0),))
    return out


def ttanh(a):
    out = Tensor(np.tanh(a.data))
    _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))
    return out


def _sigmoid_np(x):
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    z[~pos] = ex / (1.0 + ex)
    return z


def sigmoid(a):
    out = Tensor(_sigmoid_np(a.data))
    _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def softplus(a):
    x = a.data
    out = Tensor(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))))
    _record(out, (a,), lambda g: (g * _sigmoid_np(x),))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a):
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    _record(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g, in_shape, axes, keepdims):
    """Broadcast a reduced gradient back to the input shape."""
    if axes is None:
        return np.ascontiguousarray(np.broadcast_to(g, in_shape))
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.ascontiguousarray(np.broadcast_to(g, in_shape))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))
    _record(out, (a,), lambda g: (_spread(g, a.shape, axes, keepdims),))
    return out


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    count = a.data.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    _record(out, (a,), lambda g: (_spread(g / count, a.shape, axes, keepdims),))
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise _fail("reshape", "element count mismatch", a.shape, shape)
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (np.ascontiguousarray(g.reshape(a.shape)),))
    return out


def transpose(a, perm):
    perm = tuple(perm)
    if sorted(perm) != list(range(a.ndim)):
        raise _fail("transpose", f"invalid permutation {perm}", a.shape)
    inv = tuple(np.argsort(perm))
    out = Tensor(np.ascontiguousarray(a.data.transpose(perm)))
    _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))
    return out


def concat(tensors, axis: int):
    tensors = tuple(tensors)
    _check_dtypes("concat", *tensors)
    axis = axis % tensors[0].ndim
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        raise _fail("concat", "incompatible shapes", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(pieces)

    _record(out, tensors, bw)
    return out


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = Tensor(np.ascontiguousarray(np.broadcast_to(a.data, shape)))
    except ValueError:
        raise _fail("broadcast_to", "cannot broadcast", a.shape, shape) from None
    _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise _fail("matmul", "inputs must have rank >= 2", a.shape, b.shape)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise _fail("matmul", "leading dimensions must match", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise _fail("matmul", "inner dimensions must match", a.shape, b.shape)
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        swap = lambda m: np.swapaxes(m, -1, -2)
        return (np.matmul(g, swap(b.data)), np.matmul(swap(a.data), g))

    _record(out, (a, b), bw)
    return out


# ---------------------------------------------------------------------------
# normalizations and softmaxes


def softmax(a, axis: int):
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise _fail("softmax", "empty axis", a.shape)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def bw(g):
        y = out.data
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    _record(out, (a,), bw)
    return out


def log_softmax(a, axis: int):
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise _fail("log_softmax", "empty axis", a.shape)
    m = a.data.max(axis=axis, keepdims=True)
    s = a.data - m
    out = Tensor(s - np.log(np.exp(s).sum(axis=axis, keepdims=True)))

    def bw(g):
        return (g - np.exp(out.data) * g.sum(axis=axis, keepdims=True),)

    _record(out, (a,), bw)
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    _check_dtypes("layer_norm", a, gamma, beta)
    C = a.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise _fail("layer_norm", "affine shape must equal last axis", a.shape, gamma.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y * gamma.data + beta.data)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gy = g * gamma.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - y * (gy * y).mean(axis=-1, keepdims=True))
        return (np.ascontiguousarray(gx),
                np.ascontiguousarray((g * y).sum(axis=lead)),
                np.ascontiguousarray(g.sum(axis=lead)))

    _record(out, (a, gamma, beta), bw)
    return out


def l2_normalize(a, axis: int = -1, eps: float = 1e-12):
    """Scale slices along `axis` to unit L2 norm; zero slices stay zero."""
    axis = axis % a.ndim
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    m = np.maximum(n, eps)
    y = a.data / m
    out = Tensor(y)

    def bw(g):
        live = (n > eps).astype(a.dtype)
        return (g / m - live * y * (g * y).sum(axis=axis, keepdims=True) / m,)

    _record(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """2-D convolution (cross-correlation), zero padding, contiguous groups."""
    _check_dtypes("conv2d", *( (x, w, b) if b is not None else (x, w) ))
    if x.ndim != 4 or w.ndim != 4:
        raise _fail("conv2d", "expected 4-D input and kernel", x.shape, w.shape)
    if stride < 1 or padding < 0:
        raise _fail("conv2d", f"bad stride/padding {stride}/{padding}")
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    if Cin % groups or Cout % groups:
        raise _fail("conv2d", f"channels not divisible by groups={groups}", x.shape, w.shape)
    if cin_g != Cin // groups:
        raise _fail("conv2d", "kernel input-channel extent mismatch", x.shape, w.shape)
    if b is not None and b.shape != (Cout,):
        raise _fail("conv2d", "bias shape mismatch", b.shape, (Cout,))
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise _fail("conv2d", "kernel larger than padded input", x.shape, w.shape)

    out_data = _convops.conv2d_forward(x.data, w.data, stride, padding, groups)
    if b is not None:
        out_data = out_data + b.data.reshape(1, Cout, 1, 1)
    out = Tensor(out_data)

    if b is None:
        def bw(g):
            gx, gw = _convops.conv2d_backward(x.data, w.data, np.ascontiguousarray(g),
                                              stride, padding, groups,
                                              x._needs_grad, w._needs_grad)
            return (gx, gw)
        _record(out, (x, w), bw)
    else:
        def bw(g):
            g = np.ascontiguousarray(g)
            gx, gw = _convops.conv2d_backward(x.data, w.data, g, stride, padding, groups,
                                              x._needs_grad, w._needs_grad)
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        _record(out, (x, w, b), bw)
    return out


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear sampling matrix.

    Half-pixel centers with edge clamping; the identity when n_out == n_in.
    """
    R = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        R[i, i0] += 1.0 - f
        R[i, i1] += f
    return R


def bilinear_resize(x, out_h: int, out_w: int):
    if x.ndim != 4:
        raise _fail("bilinear_resize", "expected 4-D input", x.shape)
    if out_h < 1 or out_w < 1:
        raise _fail("bilinear_resize", f"bad output size {out_h}x{out_w}")
    B, C, H, W = x.shape
    if out_h == H and out_w == W:
        out = Tensor(x.data)
        _record(out, (x,), lambda g: (g,))
        return out
    Ry = _resize_matrix(H, out_h, x.dtype.name)
    Rx = _resize_matrix(W, out_w, x.dtype.name)
    out = Tensor(np.matmul(np.matmul(Ry, x.data), Rx.T))

    def bw(g):
        return (np.ascontiguousarray(np.matmul(np.matmul(Ry.T, g), Rx)),)

    _record(out, (x,), bw)
    return out


def pixel_shuffle(x, r: int):
    """(B, C*r^2, H, W) -> (B, C, rH, rW); channel c*r^2 + dr*r + dc fills (dr, dc)."""
    B, Crr, H, W = x.shape
    if Crr % (r * r):
        raise _fail("pixel_shuffle", f"channels not divisible by r^2={r * r}", x.shape)
    C = Crr // (r * r)
    t = reshape(x, (B, C, r, r, H, W))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (B, C, H * r, W * r))


def pixel_unshuffle(x, r: int):
    """Exact inverse of pixel_shuffle."""
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise _fail("pixel_unshuffle", f"spatial extents not divisible by r={r}", x.shape)
    H, W = Hr // r, Wr // r
    t = reshape(x, (B, C, H, r, W, r))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (B, C * r * r, H, W))


def global_avg_pool(x):
    if x.ndim != 4:
        raise _fail("global_avg_pool", "expected 4-D input", x.shape)
    return tmean(x, axis=(2, 3), keepdims=True)


def saf_apply(x, saf):
    """Grouped per-site 3x3 filtering; see backend.saf_apply_forward."""
    _check_dtypes("saf_apply", x, saf)
    if x.ndim != 4 or saf.ndim != 6:
        raise _fail("saf_apply", "expected 4-D input and 6-D filters", x.shape, saf.shape)
    B, C, H, W = x.shape
    Bf, G, nf, taps, Hf, Wf = saf.shape
    if Bf != B or Hf != H or Wf != W or nf != 4 or taps != 9 or C % G:
        raise _fail("saf_apply", "filter bank does not match input", x.shape, saf.shape)
    out = Tensor(backend.saf_apply_forward(x.data, saf.data))

    def bw(g):
        gx, gsaf = backend.saf_apply_backward(x.data, saf.data, np.ascontiguousarray(g),
                                              x._needs_grad, saf._needs_grad)
        return (gx, gsaf)

    _record(out, (x, saf), bw)
    return out
