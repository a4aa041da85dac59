"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op records a :class:`Node` when grad mode is on and at
least one input requires a gradient. Nodes carry a global sequence number,
so :func:`backward` can replay the tape strictly in reverse recording order.
Computation happens in single precision unless :func:`precision` switches
the default to double (used by gradient checks).
"""

import itertools
import threading
import weakref
from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import EmptyTape, NotScalar, ShapeMismatch, UnsupportedAttr

_state = threading.local()
_seq = itertools.count()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextmanager
def precision(mode):
    """Temporarily switch the default dtype: ``"single"`` or ``"double"``."""
    old = default_dtype()
    set_default_dtype({"single": np.float32, "double": np.float64}[mode])
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled():
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("seq", "op", "inputs", "backward_fn", "out_ref")

    def __init__(self, op, inputs, backward_fn):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out_ref = None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        self.data = np.asarray(arr, dtype=dtype or default_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self._retain = False

    # -- basic properties
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

    def retain_grad(self):
        """Keep the gradient of a non-leaf tensor after :func:`backward`."""
        self._retain = True
        return self

    def backward(self):
        backward(self)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, out_data, inputs, backward_fn):
    out = Tensor(out_data, dtype=out_data.dtype.type)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(op, tuple(inputs), backward_fn)
        out.node = node
        out.requires_grad = True
        # weak link back so retain_grad() can be honoured during backward
        node.out_ref = weakref.ref(out)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------------ ops

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), bw)


def neg(x):
    return scale(x, -1.0)


def scale(x, c):
    x = _wrap(x)
    c = float(c)
    return _record("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


def relu(x):
    x = _wrap(x)
    out = np.maximum(x.data, 0)
    # derivative at exactly 0 is taken as 0
    return _record("relu", out, (x,), lambda g: (g * (x.data > 0),))


def reshape(x, shape):
    x = _wrap(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record("reshape", out.copy(), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat: empty input list")
    nd = tensors[0].ndim
    axis = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(lo, hi)
                out.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                out.append(None)
        return tuple(out)

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def getitem(x, idx):
    x = _wrap(x)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("getitem", np.array(x.data[idx]), (x,), bw)


def split(x, sizes, axis=0):
    """Cut ``x`` along ``axis`` into pieces of the given sizes."""
    x = _wrap(x)
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeMismatch(f"split: sizes {sizes} do not sum to {x.shape[axis]}")
    pieces, start = [], 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        pieces.append(getitem(x, tuple(sl)))
        start += s
    return pieces


def tsum(x):
    x = _wrap(x)
    return _record("sum", np.array(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    x = _wrap(x)
    n = x.size
    return scale(tsum(x), 1.0 / n)


def softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = _kernels.flush_subnormal(e / e.sum(axis=axis, keepdims=True))

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", s, (x,), bw)


def log_softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = _kernels.flush_subnormal(np.exp(out))

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / b),)

    return _record("cross_entropy", np.array(loss, dtype=logits.dtype), (logits,), bw)


def global_avg_pool(x):
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return _record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), bw)


def max_pool2d(x, kernel=2, stride=None):
    x = _wrap(x)
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise UnsupportedAttr(f"max_pool2d: kernel={kernel} stride={stride}")
    if x.ndim != 4:
        raise ShapeMismatch(f"max_pool2d expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if kernel > h or kernel > w:
        raise ShapeMismatch(f"max_pool2d: kernel {kernel} larger than input {x.shape}")
    out, idx = _kernels.maxpool_forward(x.data, kernel, stride)

    def bw(g):
        return (_kernels.maxpool_backward(g, idx, h, w, kernel, stride),)

    return _record("max_pool2d", out, (x,), bw)


def _conv_shift(x, weight, bias, padding):
    """Stride-1 convolution as one GEMM per kernel tap.

    The padded input is laid out channel-major and flattened, so tap (u, v)
    is a constant offset into it. Output positions that straddle a row or
    image boundary are computed too and then cropped away.
    """
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    total = n * hp * wp
    span = total - (kh - 1) * wp - (kw - 1)
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xflat = np.zeros((c, n, hp, wp), x.data.dtype)
        xflat[:, :, padding : padding + h, padding : padding + w] = xt
    else:
        xflat = np.ascontiguousarray(xt)
    xflat = xflat.reshape(c, total)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
    y = np.zeros((f, total), x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            off = u * wp + v
            y[:, :span] += taps[u, v] @ xflat[:, off : off + span]
    if bias is not None:
        y += bias.data[:, None]
    out = np.ascontiguousarray(y.reshape(f, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3))

    def bw(g):
        gflat = np.zeros((f, n, hp, wp), g.dtype)
        gflat[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gflat = gflat.reshape(f, total)[:, :span]
        gw = gx = None
        if weight.requires_grad:
            gw = np.empty(weight.shape, g.dtype)
            for u in range(kh):
                for v in range(kw):
                    off = u * wp + v
                    gw[:, :, u, v] = gflat @ xflat[:, off : off + span].T
        if x.requires_grad:
            taps_t = np.ascontiguousarray(taps.transpose(0, 1, 3, 2))
            dx = np.zeros((c, total), g.dtype)
            for u in range(kh):
                for v in range(kw):
                    off = u * wp + v
                    dx[:, off : off + span] += taps_t[u, v] @ gflat
            dx = dx.reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return out, bw


def _conv_im2col(x, weight, bias, stride, padding, ho, wo):
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            gx = _kernels.col2im(dcols, n, c, hp, wp, kh, kw, stride, ho, wo)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return out, bw


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [F,C,kh,kw], zero padding."""
    x, weight = _wrap(x), _wrap(weight)
    if stride < 1 or padding < 0:
        raise UnsupportedAttr(f"conv2d: stride={stride} padding={padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeMismatch(f"conv2d: kernel {weight.shape} larger than padded input {(hp, wp)}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (f,):
            raise ShapeMismatch(f"conv2d: bias {bias.shape} for {f} filters")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if stride == 1:
        out, bw = _conv_shift(x, weight, bias, padding)
    else:
        out, bw = _conv_im2col(x, weight, bias, stride, padding, ho, wo)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", out, inputs, bw)


OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "relu": relu,
    "concat": concat,
    "max_pool2d": max_pool2d,
    "global_avg_pool": global_avg_pool,
    "softmax": softmax,
    "reshape": reshape,
    "scale": scale,
}


def tensor_op_forward(op, inputs, **attrs):
    """Dispatch ``op`` by name; ``concat`` takes the whole list as one argument."""
    fn = OPS.get(op)
    if fn is None:
        raise UnsupportedAttr(f"unknown op {op!r}")
    if op == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ------------------------------------------------------------------ backward

def backward(loss):
    """Populate ``.grad`` of every leaf reachable from scalar ``loss``."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise EmptyTape("loss is not connected to any recorded op")

    nodes, stack, seen = [], [loss.node], {loss.node.seq}
    while stack:
        node = stack.pop()
        nodes.append(node)
        for t in node.inputs:
            if t.node is not None and t.node.seq not in seen:
                seen.add(t.node.seq)
                stack.append(t.node)
    nodes.sort(key=lambda nd: nd.seq, reverse=True)

    grads = {loss.node.seq: np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(node.seq, None)
        if g is None:
            continue
        out = node.out_ref() if node.out_ref is not None else None
        if out is not None and out._retain:
            out.grad = g if out.grad is None else out.grad + g
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if isinstance(gi, np.ndarray):
                gi = _kernels.flush_subnormal(gi if gi.flags.writeable else gi.copy())
            if t.node is not None:
                prev = grads.get(t.node.seq)
                grads[t.node.seq] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
