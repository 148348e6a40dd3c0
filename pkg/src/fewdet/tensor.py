"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 for verification, float32 for training).
Every operation that sees a gradient-requiring input while a :class:`Tape`
is active appends one record to that tape; ``Tape.backward`` replays the
records once, in reverse recording order, which keeps evaluation
deterministic and makes seeded runs bit-reproducible.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """A dense n-dimensional value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of operations for one forward pass.

    Single-threaded by design: one training step builds and consumes one
    tape.  Entering the context installs the tape for the current thread;
    records survive exit so ``backward`` may run after the ``with`` block.
    """

    def __init__(self):
        self._records = []  # (output tensor, grad_fn)

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

        Visits each record exactly once in reverse recording order. Gradients
        are computed into a fresh map per call, then added to ``.grad``, so
        two backward calls without zeroing double the stored gradients.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads = {loss: np.ones_like(loss.data)}
        for out, grad_fn in reversed(self._records):
            g = grads.get(out)
            if g is None:
                continue
            for t, d in grad_fn(g):
                if not t.requires_grad:
                    continue
                prev = grads.get(t)
                grads[t] = d if prev is None else prev + d
        for t, g in grads.items():
            t.grad = g if t.grad is None else t.grad + g


def backward(loss, tape=None):
    """Run reverse-mode differentiation from a scalar loss."""
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active Tape")
    tape.backward(loss)


def record_op(data, inputs, grad_fn):
    """Wrap an op result, registering ``grad_fn`` on the active tape.

    ``grad_fn(g)`` must yield ``(input_tensor, gradient_contribution)``
    pairs.  Extension ops (RoI pooling, bilinear resize) hook in here.
    """
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append((out, grad_fn))
    return out


def _sum_to_shape(g, shape):
    # collapse axes that were broadcast in the forward direction
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        yield a, _sum_to_shape(g, a.data.shape)
        yield b, _sum_to_shape(g, b.data.shape)

    return record_op(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        yield a, _sum_to_shape(g, a.data.shape)
        yield b, _sum_to_shape(-g, b.data.shape)

    return record_op(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        yield a, _sum_to_shape(g * b.data, a.data.shape)
        yield b, _sum_to_shape(g * a.data, b.data.shape)

    return record_op(a.data * b.data, (a, b), grad_fn)


def scale(x, s):
    s = float(s)

    def grad_fn(g):
        yield x, g * s

    return record_op(x.data * s, (x,), grad_fn)


def neg(x):
    def grad_fn(g):
        yield x, -g

    return record_op(-x.data, (x,), grad_fn)


def relu(x):
    mask = x.data > 0

    def grad_fn(g):
        yield x, g * mask

    return record_op(np.where(mask, x.data, 0.0), (x,), grad_fn)


def reshape(x, shape):
    shape = tuple(shape)
    old = x.data.shape

    def grad_fn(g):
        yield x, g.reshape(old)

    return record_op(x.data.reshape(shape), (x,), grad_fn)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        yield x, g.transpose(inv)

    return record_op(x.data.transpose(axes), (x,), grad_fn)


def tsum(x, axis=None, keepdims=False):
    def grad_fn(g):
        if axis is None:
            yield x, np.broadcast_to(g, x.data.shape).copy()
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            yield x, np.broadcast_to(gg, x.data.shape).copy()

    return record_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]

    def grad_fn(g):
        if axis is None:
            yield x, np.broadcast_to(g / count, x.data.shape).copy()
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            yield x, np.broadcast_to(gg / count, x.data.shape).copy()

    return record_op(x.data.mean(axis=axis, keepdims=keepdims), (x,), grad_fn)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty tensor list")
    ref = tensors[0].data.shape
    for i, t in enumerate(tensors[1:], 1):
        s = t.data.shape
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ValueError(f"concat: tensor {i} shape {s} incompatible with {ref} along axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            yield t, g[tuple(idx)]

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def stack(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack: empty tensor list")

    def grad_fn(g):
        for i, t in enumerate(tensors):
            yield t, np.take(g, i, axis=axis)

    return record_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def gather_rows(x, idx):
    """Select rows along axis 0; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.intp)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        yield x, gx

    return record_op(x.data[idx], (x,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product. Operands share leading batch dims, or one side is 2-D."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {ad.shape[-1]} vs {bd.shape[-2]}")
    if ad.ndim != 2 and bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {ad.shape[:-2]} vs {bd.shape[:-2]}")

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        yield a, _sum_to_shape(ga, ad.shape)
        yield b, _sum_to_shape(gb, bd.shape)

    return record_op(np.matmul(ad, bd), (a, b), grad_fn)


def linear(x, weight, bias):
    """Affine map over the trailing dimension: ``y = x @ W.T + b``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear: input dim {xd.shape[-1]} != weight input dim {wd.shape[1]}")
    if bias.data.shape != (wd.shape[0],):
        raise ValueError(f"linear: bias shape {bias.data.shape} != ({wd.shape[0]},)")
    x2 = xd.reshape(-1, xd.shape[-1])

    def grad_fn(g):
        g2 = g.reshape(-1, wd.shape[0])
        yield x, (g2 @ wd).reshape(xd.shape)
        yield weight, g2.T @ x2
        yield bias, g2.sum(axis=0)

    out = x2 @ wd.T + bias.data
    return record_op(out.reshape(xd.shape[:-1] + (wd.shape[0],)), (x, weight, bias), grad_fn)


def _im2col(xp, kh, kw, stride, oh, ow):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(cols, xp_shape, kh, kw, stride, oh, ow):
    b, c, hp, wp = xp_shape
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += cols[:, :, i, j]
    return gxp


def conv2d(x, weight, bias, stride=1, padding=0, strict=False):
    """2-D convolution with odd kernels; accepts [C,H,W] or [B,C,H,W] input.

    Output side is ``(H + 2*padding - k) // stride + 1``; with ``strict`` the
    division must be exact.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride {stride} must be >= 1 and padding {padding} >= 0")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d: input must be 3-D or 4-D, got {x.data.ndim}-D")
    wd = weight.data
    if wd.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D, got {wd.ndim}-D")
    cout, cin, kh, kw = wd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if xd.shape[1] != cin:
        raise ValueError(f"conv2d: input channels {xd.shape[1]} != weight input channels {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    b, _, h, w = xd.shape
    if strict and ((h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride):
        raise ValueError(
            f"conv2d: size {h}x{w} with kernel {kh}x{kw}, stride {stride}, padding {padding} "
            "does not divide exactly"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: output size {oh}x{ow} is empty")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = wd.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols) + bias.data[:, None]
    out = out.reshape(b, cout, oh, ow)

    def grad_fn(g):
        g4 = g[None] if squeeze and g.ndim == 3 else g
        gmat = g4.reshape(b, cout, oh * ow)
        gw = np.ascontiguousarray(gmat.transpose(1, 0, 2)).reshape(cout, -1) @ np.ascontiguousarray(
            cols.transpose(0, 2, 1)
        ).reshape(-1, cols.shape[1])
        yield weight, gw.reshape(wd.shape)
        yield bias, gmat.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, gmat)
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        yield x, gxp[0] if squeeze else gxp

    return record_op(out[0] if squeeze else out, (x, weight, bias), grad_fn)


def global_avg_pool(x):
    """Spatial mean: [C,H,W] -> [C] or [B,C,H,W] -> [B,C]."""
    if x.data.ndim not in (3, 4):
        raise ValueError(f"global_avg_pool: expected 3-D or 4-D input, got {x.data.ndim}-D")
    h, w = x.data.shape[-2:]

    def grad_fn(g):
        yield x, np.broadcast_to(g[..., None, None] / (h * w), x.data.shape).copy()

    return record_op(x.data.mean(axis=(-2, -1)), (x,), grad_fn)


def softmax(x, axis):
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        yield x, y * (g - dot)

    return record_op(y, (x,), grad_fn)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels):
    """Mean-reduced softmax cross entropy; integer labels in [0, K)."""
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be 2-D [n, K], got {ld.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (ld.shape[0],):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} != ({ld.shape[0]},)")
    k = ld.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    n = ld.shape[0]
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(n), labels]
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def grad_fn(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        yield logits, gl * (g / n)

    return record_op(np.asarray(per.mean(), dtype=ld.dtype), (logits,), grad_fn)


def smooth_l1(pred, target, beta=1.0):
    """Mean-reduced smooth L1 with transition point ``beta`` (default 1.0)."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"smooth_l1: shapes differ, {pred.data.shape} vs {target.data.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = max(d.size, 1)

    def grad_fn(g):
        gd = np.clip(d / beta, -1.0, 1.0) * (g / n)
        yield pred, gd
        yield target, -gd

    return record_op(np.asarray(per.mean() if d.size else 0.0, dtype=pred.data.dtype), (pred, target), grad_fn)


def bce_with_logits(logits, targets):
    """Mean-reduced binary cross entropy on raw logits."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"bce_with_logits: target shape {t.shape} != logits shape {z.shape}")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)
    sig = 1.0 / (1.0 + np.exp(-z))

    def grad_fn(g):
        yield logits, (sig - t) * (g / n)

    return record_op(np.asarray(per.mean() if z.size else 0.0, dtype=z.dtype), (logits,), grad_fn)
