"""Dense-tensor engine: forward operators plus reverse-mode gradients.

The engine is a small tape: every operator returns a ``Tensor`` that remembers
its parents and a closure that routes the output gradient back to them.
``backward(loss)`` walks the tape in reverse topological order.

Two numeric modes exist. Run mode keeps everything in float32 (4 bytes per
weight, which is what the published model-size arithmetic assumes);
verification mode switches to float64 so central finite differences stay
meaningful. Use ``use_dtype(np.float64)`` or ``set_default_dtype``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ArgumentError, DimensionError, GraphStateError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

# Batch-norm defaults. The source protocol never states them; they are fixed
# here and recorded in checkpoint headers and experiment logs.
BN_EPS = 1e-3
BN_MOMENTUM = 0.99


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ArgumentError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default construction dtype."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Disable tape recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus an optional backward closure on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A trainable leaf: value, persistent gradient, and Adagrad accumulator.

    Non-trainable entries (``trainable=False``) hold state such as batch-norm
    running statistics; they live in the same table so parameter counts and
    checkpoints cover them, but the optimizer never touches them.
    """

    __slots__ = ("accumulator", "name", "trainable")

    def __init__(self, data, name="", trainable=True):
        super().__init__(np.ascontiguousarray(data), requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.accumulator = np.zeros_like(self.data)
        self.name = name
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def tensor(data, requires_grad=False, dtype=None):
    """Build a leaf tensor in the current default dtype."""
    return Tensor(np.asarray(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def _record(out, parents, backward_fn):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Fill ``.grad`` of every tensor the scalar ``loss`` depends on."""
    if not isinstance(loss, Tensor):
        raise GraphStateError("backward target must be a Tensor")
    if loss.data.size != 1:
        raise GraphStateError(f"backward target must be scalar, got shape {loss.data.shape}")
    if loss._backward is None:
        raise GraphStateError("no recorded forward pass to differentiate")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# elementwise / structural ops


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def bw():
        _accum(x, out.grad * (x.data > 0))

    return _record(out, (x,), bw)


def add(a, b):
    """Residual-style addition; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def bw():
        _accum(a, out.grad)
        _accum(b, out.grad)

    return _record(out, (a, b), bw)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def bw():
        _accum(x, out.grad.reshape(x.data.shape))

    return _record(out, (x,), bw)


def concat(tensors, axis=-1):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            _accum(t, g)

    return _record(out, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# affine maps


def _affine(x, w, b, opname):
    cin, cout = w.data.shape
    if x.data.shape[-1] != cin:
        raise DimensionError(
            f"{opname}: input shape {x.data.shape} does not match weights {w.data.shape}"
        )
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (cout,):
            raise DimensionError(f"{opname}: bias shape {b.data.shape}, expected ({cout},)")
        y = y + b.data
    out = Tensor(y)

    def bw():
        g2 = out.grad.reshape(-1, cout)
        x2 = x.data.reshape(-1, cin)
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, (out.grad @ w.data.T).reshape(x.data.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw)


def pointwise_conv(x, w, b=None):
    """Kernel-size-1 convolution over a sequence: out[l,j] = sum_i x[l,i] w[i,j] + b[j].

    Accepts [L, Cin] or [B, L, Cin]; the position count is always preserved.
    """
    return _affine(x, w, b, "pointwise_conv")


def dense(x, w, b=None):
    """Affine map on the trailing feature axis ([Cin] or [B, Cin])."""
    return _affine(x, w, b, "dense")


def depthwise_scale(x, d):
    """Per-channel scaling (depthwise convolution with kernel size 1, no bias)."""
    c = x.data.shape[-1]
    if d.data.shape != (c,):
        raise DimensionError(f"depthwise_scale: channels {c} vs scale shape {d.data.shape}")
    out = Tensor(x.data * d.data)

    def bw():
        if d.requires_grad:
            _accum(d, (out.grad * x.data).reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            _accum(x, out.grad * d.data)

    return _record(out, (x, d), bw)


# ---------------------------------------------------------------------------
# pooling


def maxpool_seq(x, k=3):
    """Stride-1 same-padded max over a window of k positions.

    Edge windows are truncated (implemented by -inf padding), so the sequence
    length never changes. Ties route the gradient to the earliest position.
    """
    if k < 1:
        raise ArgumentError(f"maxpool_seq: window must be >= 1, got {k}")
    if k == 1:
        return reshape(x, x.data.shape)  # identity with a tape node
    xd = x.data
    single = xd.ndim == 2
    if single:
        xd = xd[None]
    b, l, c = xd.shape
    before = (k - 1) // 2
    after = k - 1 - before
    xp = np.pad(xd, ((0, 0), (before, after), (0, 0)), constant_values=-np.inf)
    y = np.full((b, l, c), -np.inf, dtype=xd.dtype)
    for off in range(k):
        np.maximum(y, xp[:, off : off + l, :], out=y)
    out = Tensor(y[0] if single else y)

    def bw():
        if not x.requires_grad:
            return
        g = out.grad if not single else out.grad[None]
        gxp = np.zeros_like(xp)
        taken = np.zeros((b, l, c), dtype=bool)
        for off in range(k):
            hit = (xp[:, off : off + l, :] == y) & ~taken
            taken |= hit
            gxp[:, off : off + l, :] += g * hit
        gx = gxp[:, before : before + l, :]
        _accum(x, gx[0] if single else gx)

    return _record(out, (x,), bw)


def global_avg_pool(x):
    """Mean over the position axis: [B, L, C] -> [B, C] (or [L, C] -> [C])."""
    axis = x.data.ndim - 2
    if x.data.shape[axis] < 1:
        raise ArgumentError("global_avg_pool: empty sequence")
    l = x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def bw():
        g = np.expand_dims(out.grad, axis) / l
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _record(out, (x,), bw)


def _pad_geometry(h, w, k, stride, padding):
    """Output size and (top, bottom, left, right) zero padding, TF convention."""
    if padding == "valid":
        if k > h or k > w:
            raise DimensionError(f"valid padding: kernel {k} exceeds input {h}x{w}")
        return (h - k) // stride + 1, (w - k) // stride + 1, (0, 0, 0, 0)
    if padding != "same":
        raise ArgumentError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = -(-h // stride)
    wo = -(-w // stride)
    ph = max((ho - 1) * stride + k - h, 0)
    pw = max((wo - 1) * stride + k - w, 0)
    return ho, wo, (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)


def conv2d(x, w, b=None, stride=1, padding="same"):
    """Square cross-correlation on [H, W, Cin] or [B, H, W, Cin] inputs."""
    k = w.data.shape[0]
    if w.data.ndim != 4 or w.data.shape[1] != k:
        raise DimensionError(f"conv2d: weights must be [k,k,Cin,Cout], got {w.data.shape}")
    cin, cout = w.data.shape[2], w.data.shape[3]
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[3] != cin:
        raise DimensionError(f"conv2d: input {x.data.shape} vs weights {w.data.shape}")
    nb, h, wd = xd.shape[0], xd.shape[1], xd.shape[2]
    ho, wo, (pt, pb, pl, pr) = _pad_geometry(h, wd, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    y = np.zeros((nb, ho, wo, cout), dtype=xd.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for di in range(k):
        for dj in range(k):
            xs = xp[:, di : di + hs : stride, dj : dj + ws : stride, :]
            y += xs @ w.data[di, dj]
    if b is not None:
        y += b.data
    out = Tensor(y[0] if single else y)

    def bw():
        g = out.grad[None] if single else out.grad
        if w.requires_grad and w.grad is None:
            w.grad = np.zeros_like(w.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        g2 = g.reshape(-1, cout)
        for di in range(k):
            for dj in range(k):
                sl = np.s_[:, di : di + hs : stride, dj : dj + ws : stride, :]
                if w.requires_grad:
                    w.grad[di, dj] += xp[sl].reshape(-1, cin).T @ g2
                if gxp is not None:
                    gxp[sl] += g @ w.data[di, dj].T
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if gxp is not None:
            gx = gxp[:, pt : pt + h, pl : pl + wd, :]
            _accum(x, gx[0] if single else gx)

    return _record(out, (x, w) if b is None else (x, w, b), bw)


def pool2d(x, k, stride=1, padding="valid", mode="max"):
    """Square max/avg pooling; avg divides by the count of non-pad cells."""
    if mode not in ("max", "avg"):
        raise ArgumentError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    nb, h, wd, c = xd.shape
    ho, wo, (pt, pb, pl, pr) = _pad_geometry(h, wd, k, stride, padding)
    fill = -np.inf if mode == "max" else 0.0
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=fill)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    counts = None
    if mode == "max":
        y = np.full((nb, ho, wo, c), -np.inf, dtype=xd.dtype)
        for di in range(k):
            for dj in range(k):
                np.maximum(y, xp[:, di : di + hs : stride, dj : dj + ws : stride, :], out=y)
    else:
        ones = np.pad(np.ones((h, wd), dtype=xd.dtype), ((pt, pb), (pl, pr)))
        counts = np.zeros((ho, wo), dtype=xd.dtype)
        y = np.zeros((nb, ho, wo, c), dtype=xd.dtype)
        for di in range(k):
            for dj in range(k):
                y += xp[:, di : di + hs : stride, dj : dj + ws : stride, :]
                counts += ones[di : di + hs : stride, dj : dj + ws : stride]
        y /= counts[None, :, :, None]
    out = Tensor(y[0] if single else y)

    def bw():
        if not x.requires_grad:
            return
        g = out.grad[None] if single else out.grad
        gxp = np.zeros_like(xp)
        if mode == "max":
            taken = np.zeros_like(y, dtype=bool)
            for di in range(k):
                for dj in range(k):
                    sl = np.s_[:, di : di + hs : stride, dj : dj + ws : stride, :]
                    hit = (xp[sl] == y) & ~taken
                    taken |= hit
                    gxp[sl] += g * hit
        else:
            gshare = g / counts[None, :, :, None]
            for di in range(k):
                for dj in range(k):
                    gxp[:, di : di + hs : stride, dj : dj + ws : stride, :] += gshare
        gx = gxp[:, pt : pt + h, pl : pl + wd, :]
        _accum(x, gx[0] if single else gx)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# normalization and loss


def batch_norm(x, gamma, beta, running_mean, running_var, train,
               eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalization over all leading axes.

    Train mode uses (biased) batch statistics and folds them into the running
    buffers with the fixed momentum; infer mode reads the buffers.
    """
    c = x.data.shape[-1]
    for p, label in ((gamma, "scale"), (beta, "shift")):
        if p.data.shape != (c,):
            raise DimensionError(f"batch_norm: {label} shape {p.data.shape}, expected ({c},)")
    n = x.data.size // c
    if n == 0:
        raise ArgumentError("batch_norm: zero-size batch")
    axes = tuple(range(x.data.ndim - 1))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data[...] = momentum * running_mean.data + (1 - momentum) * mu
        running_var.data[...] = momentum * running_var.data + (1 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def bw():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gxhat = g * gamma.data
            if train:
                m1 = gxhat.mean(axis=axes)
                m2 = (gxhat * xhat).mean(axis=axes)
                _accum(x, inv * (gxhat - m1 - xhat * m2))
            else:
                _accum(x, gxhat * inv)

    return _record(out, (x, gamma, beta), bw)


def softmax_xent(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer class labels.

    ``logits`` is [K] or [B, K]; ``labels`` a scalar or [B] of class indices.
    """
    ld = logits.data
    single = ld.ndim == 1
    l2 = ld[None] if single else ld
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    nb, k = l2.shape
    if lab.shape != (nb,):
        raise DimensionError(f"softmax_xent: logits {ld.shape} vs labels {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise IndexError(f"label out of range [0, {k}): {int(lab.min())}..{int(lab.max())}")
    z = l2 - l2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(nb), lab].mean()
    out = Tensor(np.asarray(loss, dtype=ld.dtype))

    def bw():
        if not logits.requires_grad:
            return
        p = np.exp(logp)
        p[np.arange(nb), lab] -= 1.0
        g = out.grad * p / nb
        _accum(logits, g[0] if single else g)

    return _record(out, (logits,), bw)


def softmax(logits):
    """Probabilities for inference; not recorded on the tape."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=None):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype or _DEFAULT_DTYPE)
