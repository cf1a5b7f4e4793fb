"""Dense tensors with reverse-mode automatic differentiation.

Everything is numpy-backed and row-major (last axis fastest). A Tensor
remembers the primitive that produced it plus closures for the backward
rule; calling :func:`backward` on a scalar loss walks the recorded graph in
reverse topological order and accumulates gradients into every reachable
tensor, so intermediate activations (saliency taps) keep their gradients
without any extra bookkeeping.

Shapes follow the [batch, channel, depth, height, width] convention for
volumetric ops.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import config
from .errors import ConfigError, ShapeError


class Tensor:
    """A dense N-d array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=config.dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward: Callable[[], None] | None = backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=config.dtype()))


def _result(data, parents, backward, op, requires_grad=None) -> Tensor:
    if requires_grad is None:
        requires_grad = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires_grad, parents=tuple(parents), backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal

def topo_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss through the graph."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def zero_grads(root: Tensor) -> None:
    """Drop every gradient buffer reachable from ``root``."""
    for node in topo_order(root):
        node.grad = None


class Graph:
    """Named taps into a recorded computation, for saliency extraction."""

    def __init__(self):
        self.taps: dict[str, Tensor] = {}

    def tap(self, name: str, tensor: Tensor) -> Tensor:
        self.taps[name] = tensor
        return tensor

    def backward(self, loss: Tensor) -> None:
        backward(loss)


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))

    out = _result(out_data, (a, b), bwd, "add")
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(-out.grad, b.shape))

    out = _result(out_data, (a, b), bwd, "sub")
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd():
        a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = _result(out_data, (a, b), bwd, "mul")
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bwd():
        a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = _result(out_data, (a, b), bwd, "div")
    return out


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** p

    def bwd():
        a._accumulate(out.grad * p * a.data ** (p - 1))

    out = _result(out_data, (a,), bwd, "pow")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bwd():
        a._accumulate(out.grad / a.data)

    out = _result(out_data, (a,), bwd, "log")
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd():
        a._accumulate(out.grad * out_data)

    out = _result(out_data, (a,), bwd, "exp")
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd():
        a._accumulate(out.grad * 0.5 / out_data)

    out = _result(out_data, (a,), bwd, "sqrt")
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient flows only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    out_data = np.clip(a.data, lo, hi)

    def bwd():
        a._accumulate(out.grad * inside)

    out = _result(out_data, (a,), bwd, "clamp")
    return out


def relu(a) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at x == 0."""
    a = as_tensor(a)
    mask = a.data > 0
    out_data = a.data * mask

    def bwd():
        a._accumulate(out.grad * mask)

    out = _result(out_data, (a,), bwd, "relu")
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out = _result(out_data, (a,), bwd, "sum")
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape) / n)

    out = _result(out_data, (a,), bwd, "mean")
    return out


def reduce_max(a) -> Tensor:
    """Global maximum; gradient routes to the first argmax in row-major order."""
    a = as_tensor(a)
    flat_idx = int(np.argmax(a.data))
    out_data = a.data.reshape(-1)[flat_idx]

    def bwd():
        g = np.zeros_like(a.data).reshape(-1)
        g[flat_idx] = out.grad
        a._accumulate(g.reshape(a.shape))

    out = _result(np.asarray(out_data), (a,), bwd, "max")
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd():
        a._accumulate(out.grad.reshape(a.shape))

    out = _result(out_data, (a,), bwd, "reshape")
    return out


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def bwd():
        a._accumulate(out.grad.transpose(inv))

    out = _result(out_data, (a,), bwd, "transpose")
    return out


def split_axis(a, axis: int, parts: int) -> list[Tensor]:
    """Split into equal chunks along an axis; gradients route to slices."""
    a = as_tensor(a)
    axis = axis % a.data.ndim
    extent = a.shape[axis]
    if extent % parts != 0:
        raise ShapeError(f"axis {axis} extent {extent} not divisible into {parts} parts")
    step = extent // parts
    outs = []
    for i in range(parts):
        sl = tuple(slice(None) if d != axis else slice(i * step, (i + 1) * step) for d in range(a.data.ndim))

        def bwd(sl=sl, i=i):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[sl] += outs[i].grad

        outs.append(_result(a.data[sl].copy(), (a,), bwd, "split"))
    return outs


def concat_axis(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    axis = axis % parts[0].data.ndim
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd():
        for i, p in enumerate(parts):
            sl = tuple(
                slice(None) if d != axis else slice(int(offsets[i]), int(offsets[i + 1]))
                for d in range(out_data.ndim)
            )
            p._accumulate(out.grad[sl])

    out = _result(out_data, tuple(parts), bwd, "concat")
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul_batched(a, b) -> Tensor:
    """Per-batch matrix product [B,M,K] x [B,K,N] -> [B,M,N]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd():
        a._accumulate(_unbroadcast(np.matmul(out.grad, np.swapaxes(b.data, -1, -2)), a.shape))
        b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), out.grad), b.shape))

    out = _result(out_data, (a, b), bwd, "matmul")
    return out


def dense(x, weight, bias=None) -> Tensor:
    """Affine map [B,F] x [O,F]^T + [O] -> [B,O]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"dense feature mismatch: input {x.shape} vs weight {weight.shape}")
    out_data = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data
        parents.append(bias)

    def bwd():
        x._accumulate(out.grad @ weight.data)
        weight._accumulate(out.grad.T @ x.data)
        if bias is not None:
            bias._accumulate(out.grad.sum(axis=0))

    out = _result(out_data, tuple(parents), bwd, "dense")
    return out


def softmax_axis(x, axis: int) -> Tensor:
    """Max-shifted softmax along one axis; rows sum to 1."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd():
        g = out.grad
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    out = _result(out_data, (x,), bwd, "softmax")
    return out


# ---------------------------------------------------------------------------
# volumetric primitives

def conv3d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """3D cross-correlation.

    x: [B,Cin,D,H,W]; weight: [Cout,Cin,k,k,k]; bias: [Cout] or None.
    padding defaults to k//2 ("same" for stride 1). Implemented as im2col:
    a strided patch view is materialized one batch item at a time and fed
    to a single GEMM, which keeps peak memory modest and lets BLAS do the
    work. The input gradient is scattered back with one strided add per
    kernel offset (patch windows overlap, so a fused scatter is unsafe).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    B, cin, D, H, W = x.shape
    cout, cin_w, kd, kh, kw = weight.shape
    if kd != kh or kh != kw:
        raise ShapeError(f"conv3d expects cubic kernels, got {weight.shape}")
    k = kd
    if cin != cin_w:
        raise ShapeError(
            f"conv3d channel mismatch: input has {cin} channels (shape {x.shape}), "
            f"weight expects {cin_w} (shape {weight.shape})"
        )
    if padding is None:
        padding = k // 2
    s = stride
    Do = (D + 2 * padding - k) // s + 1
    Ho = (H + 2 * padding - k) // s + 1
    Wo = (W + 2 * padding - k) // s + 1
    if min(Do, Ho, Wo) < 1:
        raise ShapeError(f"conv3d output would be empty for input {x.shape} with k={k}, stride={s}, padding={padding}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    n_out = Do * Ho * Wo
    sB, sC, sD, sH, sW = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, cin, k, k, k, Do, Ho, Wo),
        strides=(sB, sC, sD, sH, sW, s * sD, s * sH, s * sW),
    )
    w2 = weight.data.reshape(cout, cin * k**3)
    out_m = np.empty((B, cout, n_out), dtype=x.data.dtype)
    for i in range(B):
        out_m[i] = w2 @ patches[i].reshape(cin * k**3, n_out)
    out_data = out_m.reshape(B, cout, Do, Ho, Wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[None, :, None, None, None]
        parents.append(bias)

    def bwd():
        g = out.grad
        g_m = g.reshape(B, cout, n_out)
        dxp = np.zeros_like(xp)
        dw2 = np.zeros((cout, cin * k**3), dtype=weight.data.dtype)
        offsets = list(itertools.product(range(k), repeat=3))
        for i in range(B):
            col = patches[i].reshape(cin * k**3, n_out)
            dw2 += g_m[i] @ col.T
            dcol = (w2.T @ g_m[i]).reshape(cin, k, k, k, Do, Ho, Wo)
            for a, b, c in offsets:
                dxp[i, :, a : a + s * Do : s, b : b + s * Ho : s, c : c + s * Wo : s] += dcol[
                    :, a, b, c
                ]
        dw = dw2.reshape(weight.shape)
        if padding:
            dx = dxp[:, :, padding:-padding, padding:-padding, padding:-padding]
        else:
            dx = dxp
        x._accumulate(dx)
        weight._accumulate(dw)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))

    out = _result(out_data, tuple(parents), bwd, "conv3d")
    return out


class BatchNormStats:
    """Running mean/var buffers for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=config.dtype())
        self.var = np.ones(channels, dtype=config.dtype())
        self.momentum = momentum
        self.eps = eps


def batchnorm3d(x, gamma, beta, stats: BatchNormStats, mode: str = "train") -> Tensor:
    """Per-channel batch normalization over (batch, depth, height, width).

    Train mode normalizes by batch statistics and updates the running
    buffers; eval mode uses the running buffers. Zero variance is handled
    by the epsilon in the denominator.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, C, D, H, W = x.shape
    axes = (0, 2, 3, 4)
    m = B * D * H * W
    eps = stats.eps
    if mode == "train":
        if m < 2:
            raise ShapeError(f"batchnorm train mode needs >= 2 values per channel, got {m}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean = (1 - stats.momentum) * stats.mean + stats.momentum * mu
        unbiased = var * m / max(m - 1, 1)
        stats.var = (1 - stats.momentum) * stats.var + stats.momentum * unbiased
    elif mode == "eval":
        mu = stats.mean
        var = stats.var
    else:
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None, None]) * istd[None, :, None, None, None]
    out_data = gamma.data[None, :, None, None, None] * xhat + beta.data[None, :, None, None, None]

    def bwd():
        g = out.grad
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None, None]
        if mode == "train":
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (dxhat - s1 / m - xhat * s2 / m) * istd[None, :, None, None, None]
        else:
            dx = dxhat * istd[None, :, None, None, None]
        x._accumulate(dx)
        gamma._accumulate(dgamma)
        beta._accumulate(dbeta)

    out = _result(out_data, (x, gamma, beta), bwd, "batchnorm3d")
    return out


def maxpool3d(x, kernel: int, stride: int | None = None) -> Tensor:
    """Windowed maximum; backward routes to the first argmax per window."""
    x = as_tensor(x)
    B, C, D, H, W = x.shape
    k = kernel
    s = stride if stride is not None else kernel
    if min(D, H, W) < k:
        raise ShapeError(f"maxpool kernel {k} exceeds spatial extents of {x.shape}")
    Do = (D - k) // s + 1
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::s, ::s, ::s]  # [B,C,Do,Ho,Wo,k,k,k]
    flat = win.reshape(B, C, Do, Ho, Wo, k * k * k)
    arg = flat.argmax(axis=-1)  # first occurrence on ties, window row-major
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd():
        od, oh, ow = np.unravel_index(arg, (k, k, k))
        bi, ci, di, hi, wi = np.meshgrid(
            np.arange(B), np.arange(C), np.arange(Do), np.arange(Ho), np.arange(Wo), indexing="ij"
        )
        src = np.ravel_multi_index(
            (bi, ci, di * s + od, hi * s + oh, wi * s + ow), (B, C, D, H, W)
        ).reshape(-1)
        dx = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(dx, src, out.grad.reshape(-1))
        x._accumulate(dx.reshape(x.shape))

    out = _result(out_data, (x,), bwd, "maxpool3d")
    return out


def global_avg_pool(x) -> Tensor:
    """Mean over all spatial positions: [B,C,D,H,W] -> [B,C]."""
    x = as_tensor(x)
    B, C, D, H, W = x.shape
    n = D * H * W
    out_data = x.data.mean(axis=(2, 3, 4))

    def bwd():
        x._accumulate(np.broadcast_to(out.grad[:, :, None, None, None], x.shape) / n)

    out = _result(out_data, (x,), bwd, "gap")
    return out


def dropout3d(x, rate: float, rng: np.random.Generator | None = None, mode: str = "train") -> Tensor:
    """Channel dropout: whole channels zeroed, survivors scaled by 1/(1-rate)."""
    x = as_tensor(x)
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        raise ConfigError("dropout3d in train mode requires an rng")
    B, C = x.shape[:2]
    keep = (rng.random((B, C)) >= rate).astype(x.data.dtype) / (1 - rate)
    mask = keep.reshape(B, C, *([1] * (x.data.ndim - 2)))
    out_data = x.data * mask

    def bwd():
        x._accumulate(out.grad * mask)

    out = _result(out_data, (x,), bwd, "dropout3d")
    return out


def _axis_lerp_indices(src: int, dst: int):
    """Align-corners sample positions for 1D linear interpolation."""
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    w = (pos - i0).astype(config.dtype())
    return i0, i1, w


def trilinear_upsample(x, target: tuple[int, int, int]) -> Tensor:
    """Align-corners trilinear resampling of [B,C,d,h,w] to target (D,H,W)."""
    x = as_tensor(x)
    if x.data.ndim != 5:
        raise ShapeError(f"trilinear_upsample expects 5 axes, got shape {x.shape}")
    if min(target) < 1:
        raise ShapeError(f"target extents must be >= 1, got {target}")
    plans = []
    data = x.data
    for axis, dst in zip((2, 3, 4), target):
        src = data.shape[axis]
        i0, i1, w = _axis_lerp_indices(src, dst)
        shape = [1] * data.ndim
        shape[axis] = dst
        wb = w.reshape(shape)
        data = data.take(i0, axis=axis) * (1 - wb) + data.take(i1, axis=axis) * wb
        plans.append((axis, src, i0, i1, wb))

    def bwd():
        g = out.grad
        for axis, src, i0, i1, wb in reversed(plans):
            shape = list(g.shape)
            shape[axis] = src
            gin = np.zeros(shape, dtype=g.dtype)
            gm = np.moveaxis(gin, axis, 0)
            w_flat = wb.reshape(-1)
            g0 = np.moveaxis(g * (1 - wb), axis, 0)
            g1 = np.moveaxis(g * wb, axis, 0)
            np.add.at(gm, i0, g0)
            np.add.at(gm, i1, g1)
            g = gin
        x._accumulate(g)

    out = _result(data, (x,), bwd, "trilinear")
    return out


# ---------------------------------------------------------------------------
# verification

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued. The error per coordinate is
    |analytic - fd| / max(1, |analytic|). Inputs should sit away from
    ReLU/maxpool kinks (offset by more than ~10*h).
    """
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x).data)
        flat[i] = orig - h
        lo = float(f(x).data)
        flat[i] = orig
        fd[i] = (hi - lo) / (2 * h)
    fd = fd.reshape(x.shape)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
