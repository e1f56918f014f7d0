"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap 64-bit (default) or 32-bit numpy arrays. Every operation that
participates in training records its inputs and a gradient closure; calling
``backward`` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients additively into ``.grad`` of
every tensor that requires them.

Operators are pure functions of their inputs. Single-threaded execution is
the reference mode for determinism; BLAS-level parallelism is capped via
the DRAM_THREADS environment variable (see package __init__).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is always a float32 or float64 numpy array. ``grad`` is lazily
    allocated by ``backward`` and has the same shape as ``data``. Gradients
    accumulate across repeated backward calls until reset by the caller.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

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

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _neg_operand(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self):
        backward(self)


def _neg_operand(x):
    return neg(x) if isinstance(x, Tensor) else -np.asarray(x)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap array-likes as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _record(data, parents, grad_fn) -> Tensor:
    """Build the output tensor, recording the graph edge when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _coerce_pair(a, b):
    """Wrap scalar/array operands in the tensor operand's dtype.

    Keeps float32 graphs in float32: a bare python constant must not promote
    the whole expression to float64.
    """
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def grad_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    data = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    data = a.data ** p

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(data, (a,), grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _record(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes through wherever the input is kept."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def grad_fn(g):
        keep = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            keep &= a.data >= lo
        if hi is not None:
            keep &= a.data <= hi
        return (np.where(keep, g, 0.0),)

    return _record(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _record(data, (a,), lambda g: (g.reshape(a.shape),))


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing with gradient scatter."""
    a = as_tensor(a)
    data = a.data[index]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _record(data, (a,), grad_fn)


def concat(a, b, axis: int) -> Tensor:
    """Concatenate two tensors; every non-concat extent must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ValueError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    for i, (ea, eb) in enumerate(zip(a.shape, b.shape)):
        if i != ax and ea != eb:
            raise ValueError(f"concat extent mismatch on axis {i}: {a.shape} vs {b.shape}")
    data = np.concatenate([a.data, b.data], axis=ax)
    split = a.shape[ax]

    def grad_fn(g):
        sl_a = [slice(None)] * a.ndim
        sl_b = [slice(None)] * a.ndim
        sl_a[ax] = slice(0, split)
        sl_b[ax] = slice(split, None)
        ga = g[tuple(sl_a)] if a.requires_grad else None
        gb = g[tuple(sl_b)] if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=ax)

    def grad_fn(g):
        if ax is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = np.expand_dims(g, ax)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _record(data, (a,), grad_fn)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    data = a.data.mean(axis=ax)
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))

    def grad_fn(g):
        if ax is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gk = np.expand_dims(g / count, ax)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _record(data, (a,), grad_fn)


def global_avg_pool(a) -> Tensor:
    """Spatial mean per channel: (N, C, *spatial) -> (N, C)."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise ValueError("global_avg_pool expects (N, C, *spatial)")
    return tmean(a, axis=tuple(range(2, a.ndim)))


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _record(data, (a,), lambda g: (np.where(a.data > 0, g, 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    return _record(data, (a,), lambda g: (g * data * (1.0 - data),))


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _record(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution / pooling


def _pad_spatial(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * 3
    return np.pad(x, pad, constant_values=value)


def conv3d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation, bias-free: (N,C,D,H,W) * (F,C,k,k,k).

    Output extents follow floor((in + 2*padding - k) / stride) + 1 on every
    spatial axis. Differentiable with respect to both operands.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weights, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise ValueError(f"conv3d kernel must be cubic, got {w.shape[2:]}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[1]} channels, weights expect {w.shape[1]}"
        )
    if stride < 1:
        raise ValueError("conv3d stride must be >= 1")
    n, c = x.shape[:2]
    f = w.shape[0]
    spatial = x.shape[2:]
    out_sp = tuple((e + 2 * padding - k) // stride + 1 for e in spatial)
    if any(e < 1 for e in out_sp):
        raise ValueError(f"conv3d output extents {out_sp} are empty for input {spatial}")

    xp = _pad_spatial(x.data, padding)
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    data = np.tensordot(win, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    data = np.ascontiguousarray(np.moveaxis(data, -1, 1))

    do, ho, wo = out_sp

    def grad_fn(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            # one GEMM back to window space, then k^3 strided scatter-adds
            gq = np.tensordot(g, w.data, axes=([1], [0]))  # (N,Do,Ho,Wo,C,k,k,k)
            gxp = np.zeros_like(xp)
            s = stride
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[
                            :,
                            :,
                            i : i + s * (do - 1) + 1 : s,
                            j : j + s * (ho - 1) + 1 : s,
                            l : l + s * (wo - 1) + 1 : s,
                        ] += np.moveaxis(gq[..., i, j, l], -1, 1)
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
            else:
                gx = gxp
        return gx, gw

    return _record(data, (x, w), grad_fn)


def maxpool3d(x, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed maximum; gradient routes to the first argmax per window."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"maxpool3d expects (N,C,D,H,W), got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ValueError("maxpool3d kernel and stride must be >= 1")
    if 2 * padding >= kernel:
        raise ValueError("maxpool3d padding must satisfy 2*padding < kernel")
    spatial = x.shape[2:]
    padded = tuple(e + 2 * padding for e in spatial)
    if any(p < kernel for p in padded):
        raise ValueError(f"maxpool3d window {kernel} larger than padded input {padded}")
    out_sp = tuple((p - kernel) // stride + 1 for p in padded)

    xp = _pad_spatial(x.data, padding, value=-np.inf)
    win = sliding_window_view(xp, (kernel,) * 3, axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    flat = win.reshape(win.shape[:5] + (kernel ** 3,))
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    data = np.ascontiguousarray(data)

    def grad_fn(g):
        n, c = x.shape[:2]
        do, ho, wo = out_sp
        i, j, l = np.unravel_index(arg, (kernel,) * 3)
        dpos = np.arange(do)[None, None, :, None, None] * stride + i
        hpos = np.arange(ho)[None, None, None, :, None] * stride + j
        wpos = np.arange(wo)[None, None, None, None, :] * stride + l
        gxp = np.zeros_like(xp)
        nn = np.arange(n)[:, None, None, None, None]
        cc = np.arange(c)[None, :, None, None, None]
        flat_idx = (
            ((nn * c + cc) * padded[0] + dpos) * padded[1] + hpos
        ) * padded[2] + wpos
        np.add.at(gxp.reshape(-1), flat_idx.ravel(), g.ravel())
        if padding:
            return (gxp[:, :, padding:-padding, padding:-padding, padding:-padding],)
        return (gxp,)

    return _record(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization


class RunningStats:
    """Per-channel running mean/variance used by batchnorm at inference."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, batch_mean, batch_var, momentum: float):
        self.mean = (1.0 - momentum) * self.mean + momentum * batch_mean
        self.var = (1.0 - momentum) * self.var + momentum * batch_var


def batchnorm(
    x,
    gamma,
    beta,
    running: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise batch normalization over (N, C, *spatial).

    Training mode normalizes by batch statistics and updates the running
    statistics in place (unbiased variance, momentum blend). Inference mode
    normalizes by the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm parameter shape must be ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, c) + (1,) * (x.ndim - 2)
    count = int(np.prod([x.shape[i] for i in axes]))

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if count > 1:
            running.update(mu, var * count / (count - 1), momentum)
        else:
            running.update(mu, var, momentum)
    else:
        mu = running.mean
        var = running.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    data = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gs = gamma.data.reshape(shape) * inv_std.reshape(shape)
            if training:
                gm = g.mean(axis=axes).reshape(shape)
                gxm = (g * xhat).mean(axis=axes).reshape(shape)
                gx = gs * (g - gm - xhat * gxm)
            else:
                gx = gs * g
        return gx, ggamma, gbeta

    return _record(data, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# trilinear resampling


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation matrix of shape (n_out, n_in).

    Endpoints map to endpoints; resizing to the same length is the identity.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("resize extents must be positive")
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(pos.astype(np.int64), n_in - 2)
    t = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - t
    m[rows, i0 + 1] += t
    return m


def _apply_resize(arr: np.ndarray, mats) -> np.ndarray:
    out = arr
    for off, m in enumerate(mats):
        ax = out.ndim - 3 + off
        out = np.moveaxis(np.moveaxis(out, ax, -1) @ m.T.astype(out.dtype), -1, ax)
    return np.ascontiguousarray(out)


def resize_array(arr: np.ndarray, target) -> np.ndarray:
    """Trilinear (corner-aligned) resize of the last three axes of an array."""
    arr = np.asarray(arr)
    if arr.ndim < 3:
        raise ValueError("resize_array expects at least 3 dimensions")
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise ValueError("target must have three extents")
    mats = [resize_matrix(arr.shape[arr.ndim - 3 + i], target[i]) for i in range(3)]
    return _apply_resize(arr.astype(np.float64, copy=False), mats)


def trilinear_resize(x, target) -> Tensor:
    """Differentiable corner-aligned trilinear resize of the last three axes."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError("trilinear_resize expects at least 3 dimensions")
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < 1 for t in target):
        raise ValueError(f"invalid target extents {target}")
    mats = [resize_matrix(x.shape[x.ndim - 3 + i], target[i], dtype=x.dtype) for i in range(3)]
    data = _apply_resize(x.data, mats)

    def grad_fn(g):
        # the op is linear, so the adjoint is the same map with transposed matrices
        return (_apply_resize(g, [m.T for m in mats]),)

    return _record(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# masked pooling


def masked_mean_pool(field, mask) -> Tensor:
    """Mean of ``field`` over the nonzero voxels of a binary ``mask``.

    ``mask`` is treated as data (no gradient flows into it); an empty mask is
    rejected because it signals a missing lung.
    """
    field = as_tensor(field)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != field.shape:
        raise ValueError(f"mask shape {m.shape} does not match field shape {field.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    total = float(m.sum())
    if total == 0:
        raise ValueError("masked_mean_pool: mask is empty")
    m = m.astype(field.dtype)
    data = np.asarray((field.data * m).sum() / total)

    def grad_fn(g):
        return (g * m / total,)

    return _record(data, (field,), grad_fn)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits each recorded node exactly once; gradient contributions from
    fan-out add. Leaf ``.grad`` accumulates across repeated calls.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flowing = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, contrib in zip(node._parents, node._grad_fn(g)):
            if contrib is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + contrib
            else:
                flowing[key] = contrib
