"""Reverse-mode differentiable tensors over numpy NCHW arrays.

Every value is a 4-axis (batch, channel, height, width) array. Operations
record themselves onto the active :class:`Tape`; walking the tape backwards
propagates gradients with plain chain-rule closures, micrograd style. Double
precision is the default so finite-difference checks are meaningful; arrays
of any float dtype pass through unchanged.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """A 4-d array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ValueError(f"tensors are (n, c, h, w); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic (same-shape tensors or python scalars; no broadcasting)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def scalar(value, requires_grad=False):
    """Wrap a python number as a (1,1,1,1) tensor."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float64), requires_grad)


class Parameter(Tensor):
    """Named trainable tensor carrying its Adam moment buffers."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def reset_opt_state(self):
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.step = 0


# ---------------------------------------------------------------------------
# tape

_TAPES = []


class Tape:
    """Ordered record of executed primitives; reverse replay backpropagates."""

    def __init__(self):
        self._ops = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self):
        return len(self._ops)

    def clear(self):
        self._ops.clear()


def _active_tape():
    return _TAPES[-1] if _TAPES else None


@contextmanager
def pause_tape():
    """Temporarily disable recording (inference inside a training step)."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def backward(loss):
    """Populate grads of every requires_grad tensor the loss depends on.

    Repeated calls without clearing grads accumulate.
    """
    if loss.data.size != 1:
        raise ValueError("backward() expects a scalar loss")
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() called with no active tape")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any recorded operation")
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for out, inputs, bw in reversed(tape._ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        for t, gi in zip(inputs, bw(g)):
            if gi is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
                holders[tid] = t
    for tid, g in grads.items():
        t = holders[tid]
        t.grad = g if t.grad is None else t.grad + g


def zero_grads(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# arithmetic-work counter (debug instrumentation for the FLOP cross-check)

_COUNTER = None


class FlopCounter:
    """Tallies the arithmetic work of ledgered ops, keyed by op kind.

    Convolutions count 2*k*k*c_in*c_out*h_out*w_out (multiply-adds, bias
    included); pooling and upsampling count one unit per element (global
    pooling by the elements it reduces). Cheap pointwise ops are below the
    ledger's resolution and count nothing.
    """

    def __init__(self):
        self.total = 0
        self.by_kind = {}

    def add(self, kind, n):
        self.total += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n


@contextmanager
def counting(counter):
    global _COUNTER
    prev, _COUNTER = _COUNTER, counter
    try:
        yield counter
    finally:
        _COUNTER = prev


def _count(kind, n):
    if _COUNTER is not None:
        _COUNTER.add(kind, int(n))


# ---------------------------------------------------------------------------
# primitive ops

def _emit(out_data, inputs, bw):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._ops.append((out, inputs, bw))
    return out


def conv2d(x, w, b, stride=1, padding=0, dilation=1):
    """2-d convolution with square kernels, via im2col matmul.

    ``w`` is (c_out, c_in, k, k); ``b`` is (1, c_out, 1, 1).
    """
    if dilation < 1 or stride < 1:
        raise ValueError("stride and dilation must be >= 1")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    ho = (h + 2 * padding - eh) // stride + 1
    wo = (wd + 2 * padding - ew) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: empty output for input {h}x{wd}, kernel {kh} dil {dilation}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.data.reshape(cout, -1).T
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2) + b.data
    _count("conv", 2 * kh * kw * cin * cout * ho * wo * n)

    wdata = w.data

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gm.T @ cols).reshape(cout, cin, kh, kw)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        gxp = np.zeros(
            (n, cin, h + 2 * padding, wd + 2 * padding), dtype=g.dtype
        )
        for i in range(kh):
            for j in range(kw):
                t = np.tensordot(g, wdata[:, :, i, j], axes=([1], [0]))
                gxp[
                    :,
                    :,
                    i * dilation : i * dilation + ho * stride : stride,
                    j * dilation : j * dilation + wo * stride : stride,
                ] += t.transpose(0, 3, 1, 2)
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        else:
            gx = gxp
        return gx, gw, gb

    return _emit(out, (x, w, b), bw)


def maxpool2d(x, k=2, stride=2):
    """Max pooling; gradient goes to the first maximal element per window."""
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d: window {k} exceeds spatial size {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    _count("pool", c * ho * wo * n)

    def bw(g):
        gx = np.zeros_like(x.data)
        hpos = (np.arange(ho) * stride)[:, None] + idx // k
        wpos = (np.arange(wo) * stride)[None, :] + idx % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, hpos, wpos), g)
        return (gx,)

    return _emit(out, (x,), bw)


def avgpool2x2(x):
    """2x2 average pooling (even spatial dims); used to resize score maps down."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    _count("pool", c * (h // 2) * (w // 2) * n)

    def bw(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return _emit(out, (x,), bw)


def relu(x):
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (x.data > 0),)

    return _emit(out, (x,), bw)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the range strictly open so a gate probability can never reach 1
    # exactly and a threshold of 1 always selects the full path
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def sigmoid(x):
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (x,), bw)


def pointwise(x, kind):
    """Elementwise nonlinearity dispatch: kind is 'relu' or 'sigmoid'."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def abs_(x):
    out = np.abs(x.data)

    def bw(g):
        return (g * np.sign(x.data),)

    return _emit(out, (x,), bw)


def clamp_min(x, floor):
    """max(x, floor) elementwise; gradient is zero where the floor is active."""
    out = np.maximum(x.data, floor)

    def bw(g):
        return (g * (x.data > floor),)

    return _emit(out, (x,), bw)


def add(a, b):
    if not isinstance(b, Tensor):
        out = a.data + float(b)

        def bw(g):
            return (g,)

        return _emit(out, (a,), bw)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bw2(g):
        return g, g

    return _emit(out, (a, b), bw2)


def sub(a, b):
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = a.data - b.data

    def bw(g):
        return g, -g

    return _emit(out, (a, b), bw)


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        out = a.data * s

        def bw(g):
            return (g * s,)

        return _emit(out, (a,), bw)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bw2(g):
        return g * b.data, g * a.data

    return _emit(out, (a, b), bw2)


_INTERP_CACHE = {}


def _interp_matrix_2x(n):
    """(2n x n) half-pixel-center bilinear upsampling matrix; rows sum to 1."""
    m = _INTERP_CACHE.get(n)
    if m is None:
        src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        i0f = np.floor(src)
        frac = src - i0f
        i0 = np.clip(i0f.astype(int), 0, n - 1)
        i1 = np.clip(i0f.astype(int) + 1, 0, n - 1)
        m = np.zeros((2 * n, n))
        rows = np.arange(2 * n)
        np.add.at(m, (rows, i0), 1.0 - frac)
        np.add.at(m, (rows, i1), frac)
        _INTERP_CACHE[n] = m
    return m


def upsample_bilinear2x(x):
    """Doubles spatial size with half-pixel-center bilinear interpolation."""
    n, c, h, w = x.shape
    mh = _interp_matrix_2x(h)
    mw = _interp_matrix_2x(w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    _count("upsample", c * 2 * h * 2 * w * n)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _emit(out, (x,), bw)


def concat_channels(xs):
    """Concatenate along the channel axis; inputs share (n, h, w)."""
    if not xs:
        raise ValueError("concat_channels: empty input list")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ValueError(
                f"concat_channels: mismatched dims {t.shape} vs {(n, '?', h, w)}"
            )
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _emit(out, tuple(xs), bw)


def global_avg_pool(x):
    """Mean over the spatial axes, keeping (n, c, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _count("pool", c * h * w * n)

    def bw(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _emit(out, (x,), bw)


def sum_all(x):
    out = np.full((1, 1, 1, 1), x.data.sum())

    def bw(g):
        return (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return _emit(out, (x,), bw)


def mean_all(x):
    size = x.data.size
    out = np.full((1, 1, 1, 1), x.data.mean())

    def bw(g):
        return (np.broadcast_to(g.reshape(()) / size, x.shape).copy(),)

    return _emit(out, (x,), bw)


def l2_mean(a, b):
    """Mean squared elementwise difference, as a scalar tensor."""
    if a.shape != b.shape:
        raise ValueError(f"l2_mean: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return mean_all(mul(d, d))


def bce_with_logits(logits, target):
    """Mean binary cross entropy on logits, in the stable log-sum-exp form."""
    if logits.shape != target.shape:
        raise ValueError(f"bce_with_logits: shape mismatch {logits.shape} vs {target.shape}")
    t = target.data
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    per_elem = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    size = z.size
    out = np.full((1, 1, 1, 1), per_elem.mean())

    def bw(g):
        gs = g.reshape(()) / size
        gz = gs * (_sigmoid(z) - t)
        gt = gs * (-z)
        return gz, gt

    return _emit(out, (logits, target), bw)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over ``params``; clears gradients afterwards."""
    for p in params:
        if p.grad is None:
            raise RuntimeError(f"adam_step: parameter {p.name!r} has no gradient")
    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1**p.step)
        vhat = p.v / (1.0 - beta2**p.step)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, header text, float32 records

_MAGIC = b"RGV1"
_VERSION = 1


def save_checkpoint(path, params, header=""):
    """Write named arrays as little-endian float32 records."""
    head = header.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                f.write(struct.pack("<I", d))
            f.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (header text, dict name -> float32 array)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = f.read(hlen).decode("utf-8")
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack("<" + "I" * ndim, f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            arrays[name] = data
    return header, arrays
