"""Minimal reverse-mode autodiff on float32 numpy buffers.

Forward values live in float32; reductions accumulate in float64 before
casting back so results are deterministic. Each op records a backward
closure on a tape that is rebuilt every step; tensors that take part in
a recorded graph are never mutated in place.
"""
from __future__ import annotations

import numpy as np

_F32 = np.float32
LOG_CLAMP = 1e-12   # lower bound for log/div arguments, keeps KL finite
EXP_CLAMP = 88.0    # exp(88) is near the float32 ceiling


def _as_f32(data):
    arr = np.asarray(data, dtype=_F32)
    return arr


class Tensor:
    """Dense float32 array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
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

    def detach(self):
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=_F32, copy=True)
        else:
            self.grad = self.grad + _as_f32(g)

    def backward(self):
        """Reverse sweep from a scalar output."""
        if self.data.ndim != 0:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=_F32)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; full ops live at module level
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make(data, parents, backward):
    """Wrap an op result; records the closure only if a parent needs grad."""
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_F32))


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary_shapes(a, b, op):
    # identical shapes or one side scalar; no general broadcasting
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    _check_same_shape(a, b, op)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum_grad(g if a.data.ndim else np.sum(g, dtype=np.float64))
        if b.requires_grad:
            b._accum_grad(g if b.data.ndim else np.sum(g, dtype=np.float64))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum_grad(g if a.data.ndim else np.sum(g, dtype=np.float64))
        if b.requires_grad:
            b._accum_grad(-g if b.data.ndim else -np.sum(g, dtype=np.float64))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            a._accum_grad(ga if a.data.ndim else np.sum(ga, dtype=np.float64))
        if b.requires_grad:
            gb = g * a.data
            b._accum_grad(gb if b.data.ndim else np.sum(gb, dtype=np.float64))

    return _make(out_data, (a, b), backward)


def div(a, b):
    """Elementwise a / b with the denominator clamped away from zero."""
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "div")
    denom = np.maximum(b.data, LOG_CLAMP)
    out_data = a.data / denom

    def backward(g):
        if a.requires_grad:
            ga = g / denom
            a._accum_grad(ga if a.data.ndim else np.sum(ga, dtype=np.float64))
        if b.requires_grad:
            live = b.data > LOG_CLAMP
            gb = np.where(live, -g * a.data / (denom * denom), 0.0)
            b._accum_grad(gb if b.data.ndim else np.sum(gb, dtype=np.float64))

    return _make(out_data, (a, b), backward)


def square(a):
    a = _coerce(a)
    out_data = a.data * a.data

    def backward(g):
        a._accum_grad(g * (2.0 * a.data))

    return _make(out_data, (a,), backward)


def exp(a):
    a = _coerce(a)
    clamped = np.minimum(a.data, EXP_CLAMP)
    out_data = np.exp(clamped)

    def backward(g):
        a._accum_grad(g * out_data * (a.data <= EXP_CLAMP))

    return _make(out_data, (a,), backward)


def log(a):
    """Natural log with the argument clamped at LOG_CLAMP."""
    a = _coerce(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    out_data = np.log(clamped)

    def backward(g):
        a._accum_grad(np.where(a.data > LOG_CLAMP, g / clamped, 0.0))

    return _make(out_data, (a,), backward)


def relu(a):
    a = _coerce(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accum_grad(g * (a.data > 0))

    return _make(out_data, (a,), backward)


def stop_gradient(a):
    """Identity whose wrapped subgraph receives zero adjoint."""
    a = _coerce(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    a = _coerce(a)
    out_data = a.data.reshape(shape)
    old_shape = a.shape

    def backward(g):
        a._accum_grad(np.asarray(g).reshape(old_shape))

    return _make(out_data, (a,), backward)


def transpose(a):
    """2D transpose."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected a 2D tensor, got shape {a.shape}")
    out_data = a.data.T.copy()

    def backward(g):
        a._accum_grad(np.asarray(g).T)

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ValueError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        g = np.asarray(g)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum_grad(g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _axis_tuple(axis, max(a.data.ndim, 1))
    if a.data.size == 0:
        raise ValueError("sum: reduction over empty selection")
    out_data = a.data.sum(axis=axes if a.data.ndim else None, keepdims=keepdims,
                          dtype=np.float64).astype(_F32)

    def backward(g):
        g = np.asarray(g, dtype=_F32)
        if not keepdims and a.data.ndim:
            g = np.expand_dims(g, axes)
        a._accum_grad(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _axis_tuple(axis, max(a.data.ndim, 1))
    if a.data.size == 0:
        raise ValueError("mean: reduction over empty selection")
    count = 1
    if a.data.ndim:
        for ax in axes:
            count *= a.shape[ax]
    out_data = a.data.mean(axis=axes if a.data.ndim else None, keepdims=keepdims,
                           dtype=np.float64).astype(_F32)

    def backward(g):
        g = np.asarray(g, dtype=_F32) / _F32(count)
        if not keepdims and a.data.ndim:
            g = np.expand_dims(g, axes)
        a._accum_grad(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def masked_mean(a, mask):
    """Mean of the entries selected by a boolean mask of the same shape."""
    a = _coerce(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError(f"masked_mean: shape mismatch {a.shape} vs {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_mean: reduction over empty selection")
    out_data = _F32(a.data[mask].sum(dtype=np.float64) / n)

    def backward(g):
        a._accum_grad(mask.astype(_F32) * (np.float64(g) / n))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        g = np.asarray(g, dtype=_F32)
        if a.requires_grad:
            a._accum_grad(g @ b.data.T)
        if b.requires_grad:
            b._accum_grad(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def row_softmax(a):
    """Softmax along the last axis of a 2D tensor; rows sum to 1."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ValueError(f"row_softmax: expected a 2D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True, dtype=np.float64).astype(_F32)

    def backward(g):
        g = np.asarray(g, dtype=_F32)
        dot = np.sum(g * out_data, axis=1, keepdims=True, dtype=np.float64).astype(_F32)
        a._accum_grad(out_data * (g - dot))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# spatial ops

def conv2d(x, w, b=None, stride=1, padding=0):
    """2D convolution over (B,C,H,W) with zero padding; stride 1 or 2."""
    x, w = _coerce(x), _coerce(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4D input/weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    OC, CW, kh, kw = w.shape
    if C != CW:
        raise ValueError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    OH = (H + 2 * p - kh) // stride + 1
    OW = (W + 2 * p - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                     # (B,C,OH,OW,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * OH * OW, C * kh * kw)
    wf = w.data.reshape(OC, C * kh * kw)
    out = cols @ wf.T                                       # (B*OH*OW, OC)
    if b is not None:
        b = _coerce(b)
        if b.shape != (OC,):
            raise ValueError(f"conv2d: bias shape {b.shape} does not match ({OC},)")
        out = out + b.data
    out_data = out.reshape(B, OH, OW, OC).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g = np.asarray(g, dtype=_F32)
        gf = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, OC)
        if w.requires_grad:
            w._accum_grad((gf.T @ cols).reshape(OC, C, kh, kw))
        if b is not None and b.requires_grad:
            b._accum_grad(gf.sum(axis=0, dtype=np.float64))
        if x.requires_grad:
            dcols = gf @ wf                                  # (B*OH*OW, C*kh*kw)
            dcols = dcols.reshape(B, OH, OW, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=_F32)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u:u + OH * stride:stride, v:v + OW * stride:stride] += dcols[:, :, u, v]
            x._accum_grad(dxp[:, :, p:p + H, p:p + W] if p else dxp)

    return _make(out_data, parents, backward)


def _resize_matrix(n_src, n_dst, mode):
    """Row-stochastic (n_dst, n_src) interpolation matrix, half-pixel centers."""
    m = np.zeros((n_dst, n_src), dtype=_F32)
    scale = n_src / n_dst
    pos = (np.arange(n_dst) + 0.5) * scale - 0.5
    if mode == "nearest":
        idx = np.clip(np.floor((np.arange(n_dst) + 0.5) * scale), 0, n_src - 1).astype(int)
        m[np.arange(n_dst), idx] = 1.0
    else:
        pos = np.clip(pos, 0.0, n_src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        t = (pos - lo).astype(_F32)
        m[np.arange(n_dst), lo] += 1.0 - t
        m[np.arange(n_dst), hi] += t
    return m


_RESIZE_CACHE = {}


def _resize_mats(h, w, oh, ow, mode):
    key = (h, w, oh, ow, mode)
    if key not in _RESIZE_CACHE:
        _RESIZE_CACHE[key] = (_resize_matrix(h, oh, mode), _resize_matrix(w, ow, mode))
    return _RESIZE_CACHE[key]


def resize(x, out_h, out_w, mode="bilinear"):
    """Resize the trailing (H, W) axes; mode is 'bilinear' or 'nearest'."""
    x = _coerce(x)
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"resize: unknown mode {mode!r}")
    if x.data.ndim < 2:
        raise ValueError(f"resize: expected >=2 dims, got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    mh, mw = _resize_mats(h, w, out_h, out_w, mode)
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, h, w)
    out = np.einsum("oh,bhw,pw->bop", mh, flat, mw, optimize=True).astype(_F32)
    out_data = out.reshape(*lead, out_h, out_w)

    def backward(g):
        gflat = np.asarray(g, dtype=_F32).reshape(-1, out_h, out_w)
        dx = np.einsum("oh,bop,pw->bhw", mh, gflat, mw, optimize=True).astype(_F32)
        x._accum_grad(dx.reshape(*lead, h, w))

    return _make(out_data, (x,), backward)


def avg_pool2d(x, k):
    """Non-overlapping k x k mean pooling on the trailing two axes."""
    x = _coerce(x)
    h, w = x.shape[-2], x.shape[-1]
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // k, k, w // k, k)
    out_data = blocks.mean(axis=(-3, -1), dtype=np.float64).astype(_F32)

    def backward(g):
        g = np.asarray(g, dtype=_F32) / _F32(k * k)
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        x._accum_grad(g)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# normalization and classification losses

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Batch norm over (B,C,H,W); running stats are plain numpy buffers
    mutated only when training=True."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm: expected 4D input, got shape {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: affine shape {gamma.shape} does not match ({C},)")
    if training:
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(_F32)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64).astype(_F32)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(_F32)
        var = running_var.astype(_F32)
    ivstd = 1.0 / np.sqrt(var + eps, dtype=_F32)
    xhat = (x.data - mu[:, None, None]) * ivstd[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    m = B * H * W

    def backward(g):
        g = np.asarray(g, dtype=_F32)
        if beta.requires_grad:
            beta._accum_grad(g.sum(axis=(0, 2, 3), dtype=np.float64))
        if gamma.requires_grad:
            gamma._accum_grad((g * xhat).sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            gi = g * gamma.data[:, None, None]
            if training:
                s1 = gi.sum(axis=(0, 2, 3), dtype=np.float64).astype(_F32)
                s2 = (gi * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(_F32)
                dx = (ivstd[:, None, None] / m) * (m * gi - s1[:, None, None]
                                                   - xhat * s2[:, None, None])
            else:
                dx = gi * ivstd[:, None, None]
            x._accum_grad(dx)

    return _make(out_data, (x, gamma, beta), backward)


def cross_entropy(logits, labels, ignore_id=None):
    """Mean cross-entropy over the class axis (axis 1 for 4D, axis 0 for 3D).

    labels is an integer array matching the spatial layout; pixels equal to
    ignore_id are excluded from the mean.
    """
    logits = _coerce(logits)
    labels = np.asarray(labels)
    if logits.data.ndim == 3:          # (K,H,W) single image
        k = logits.shape[0]
        flat = logits.data.reshape(k, -1).T
        lab = labels.reshape(-1)
    elif logits.data.ndim == 4:        # (B,K,H,W)
        b, k = logits.shape[0], logits.shape[1]
        flat = logits.data.transpose(0, 2, 3, 1).reshape(-1, k)
        lab = labels.reshape(-1)
    elif logits.data.ndim == 2:        # (N,K)
        k = logits.shape[1]
        flat = logits.data
        lab = labels.reshape(-1)
    else:
        raise ValueError(f"cross_entropy: unsupported logits shape {logits.shape}")
    if lab.shape[0] != flat.shape[0]:
        raise ValueError(f"cross_entropy: shape mismatch {logits.shape} vs {labels.shape}")
    valid = np.ones(lab.shape[0], dtype=bool) if ignore_id is None else lab != ignore_id
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: reduction over empty selection")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, dtype=np.float64)).astype(_F32)
    rows = np.arange(flat.shape[0])
    lab_safe = np.where(valid, lab, 0).astype(int)
    nll = lse - shifted[rows, lab_safe]
    out_data = _F32(nll[valid].sum(dtype=np.float64) / n)

    def backward(g):
        soft = np.exp(shifted - lse[:, None].astype(_F32))
        soft[rows, lab_safe] -= 1.0
        soft *= (valid[:, None] * (np.float64(g) / n)).astype(_F32)
        if logits.data.ndim == 3:
            dl = soft.T.reshape(logits.shape)
        elif logits.data.ndim == 4:
            h, w = logits.shape[2], logits.shape[3]
            dl = soft.reshape(logits.shape[0], h, w, k).transpose(0, 3, 1, 2)
        else:
            dl = soft
        logits._accum_grad(dl)

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(fn, point, h=1e-3, tol=1e-4):
    """Compare reverse-mode gradients of a scalar function against central
    finite differences.

    Returns a dict with the max relative error (denominator
    max(|a|,|b|,1e-6)) and a pass flag. The numeric side re-evaluates fn on
    perturbed copies of the point and never touches the tape.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, copy=True),
               requires_grad=True)
    out = fn(x)
    if out.data.ndim != 0:
        raise ValueError(f"grad_check: fn must be scalar-valued, got shape {out.shape}")
    out.backward()
    rev = np.zeros(x.shape, dtype=np.float64) if x.grad is None \
        else np.asarray(x.grad, dtype=np.float64)

    num = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    num_flat = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x.data.copy())).data)
        flat[i] = orig - h
        fm = float(fn(Tensor(x.data.copy())).data)
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(rev), np.abs(num)), 1e-6)
    rel = np.abs(rev - num) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return {
        "max_rel_err": max_rel,
        "passed": max_rel < tol,
        "reverse": rev,
        "numeric": num,
    }
