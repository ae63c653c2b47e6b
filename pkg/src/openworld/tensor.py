"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed. Each operation records its inputs and a backward closure;
``Tensor.backward()`` on a scalar walks the graph in reverse topological
order and accumulates gradients additively, so a value feeding two paths
receives the sum of both path gradients.

float32 is the training precision; build tensors from float64 arrays to
run the same graph at 64-bit (gradient checks do this).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "concat",
    "conv2d",
    "max_pool2d",
    "upsample2d",
    "dense",
    "relu",
    "sigmoid",
    "dropout",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


# When True, operations produce plain value tensors with no graph edges.
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense n-dimensional array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def item(self):
        return float(self.data.reshape(()))

    # -- graph plumbing ---------------------------------------------------

    def _in_graph(self):
        return self.requires_grad or bool(self._prev)

    def backward(self, free_graph=True):
        """Populate gradients of everything this scalar depends on.

        Gradients accumulate with ``+=`` into ``.grad``, so parameters reused
        along several paths (or across several ``backward`` calls before a
        ``zero_grad``) receive the sum.  ``free_graph`` drops graph edges and
        intermediate gradient buffers afterwards to break reference cycles.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        for node in topo:
            if node.grad is None:
                # np.zeros calloc's lazily, unlike zeros_like's explicit fill
                node.grad = np.zeros(node.data.shape, node.data.dtype)
        self.grad[...] = 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        if free_graph:
            for node in topo:
                node._prev = ()
                node._backward = None
                if not node.requires_grad:
                    node.grad = None

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = _make(np.add(self.data, other.data), (self, other))
            if out._prev:

                def bwd():
                    if self._in_graph():
                        self.grad += _unbroadcast(out.grad, self.data.shape)
                    if other._in_graph():
                        other.grad += _unbroadcast(out.grad, other.data.shape)

                out._backward = bwd
            return out
        out = _make(self.data + other, (self,))
        if out._prev:

            def bwd():
                self.grad += _unbroadcast(out.grad, self.data.shape)

            out._backward = bwd
        return out

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = _make(np.multiply(self.data, other.data), (self, other))
            if out._prev:

                def bwd():
                    if self._in_graph():
                        self.grad += _unbroadcast(out.grad * other.data, self.data.shape)
                    if other._in_graph():
                        other.grad += _unbroadcast(out.grad * self.data, other.data.shape)

                out._backward = bwd
            return out
        out = _make(self.data * other, (self,))
        if out._prev:

            def bwd():
                self.grad += _unbroadcast(out.grad * other, self.data.shape)

            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        # other is a plain scalar/array: other - self
        out = _make(other - self.data, (self,))
        if out._prev:

            def bwd():
                self.grad += _unbroadcast(-out.grad, self.data.shape)

            out._backward = bwd
        return out

    def __matmul__(self, other):
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul needs 2-d operands, got {self.data.shape} and {other.data.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {self.data.shape} @ {other.data.shape}"
            )
        out = _make(self.data @ other.data, (self, other))
        if out._prev:

            def bwd():
                if self._in_graph():
                    self.grad += out.grad @ other.data.T
                if other._in_graph():
                    other.grad += self.data.T @ out.grad

            out._backward = bwd
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, shape):
        out = _make(self.data.reshape(shape), (self,))
        if out._prev:

            def bwd():
                self.grad += out.grad.reshape(self.data.shape)

            out._backward = bwd
        return out

    def sum(self, axis=None, keepdims=False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._prev:

            def bwd():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.grad += np.broadcast_to(g, self.data.shape)

            out._backward = bwd
        return out

    # -- pointwise ----------------------------------------------------------

    def log(self):
        out = _make(np.log(self.data), (self,))
        if out._prev:

            def bwd():
                self.grad += out.grad / self.data

            out._backward = bwd
        return out

    def sqrt(self):
        out = _make(np.sqrt(self.data), (self,))
        if out._prev:

            def bwd():
                # derivative is unbounded at 0; route 0 there to keep
                # finite gradients when a summand vanishes exactly
                denom = 2.0 * out.data
                g = np.where(denom > 0, out.grad / np.where(denom > 0, denom, 1.0), 0.0)
                self.grad += g

            out._backward = bwd
        return out

    def clip(self, lo, hi):
        out = _make(np.clip(self.data, lo, hi), (self,))
        if out._prev:
            passthrough = (self.data >= lo) & (self.data <= hi)

            def bwd():
                self.grad += out.grad * passthrough

            out._backward = bwd
        return out


def clip_value(x, lo, hi):
    """Clip values but pass the gradient straight through.

    Used to guard log() domains: a saturated probability keeps its full
    corrective gradient instead of going silent, which would otherwise
    freeze any output the optimizer pushes past the clamp.
    """
    out = _make(np.clip(x.data, lo, hi), (x,))
    if out._prev:

        def bwd():
            x.grad += out.grad

        out._backward = bwd
    return out


def _make(data, parents):
    out = Tensor(data)
    if _grad_enabled and any(p._in_graph() for p in parents):
        out._prev = tuple(parents)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out._prev:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bwd():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t._in_graph():
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    t.grad += out.grad[tuple(idx)]

        out._backward = bwd
    return out


def relu(x):
    out = _make(np.maximum(x.data, 0), (x,))
    if out._prev:
        mask = x.data > 0

        def bwd():
            # out.grad is dead after this closure; reuse it in place
            np.multiply(out.grad, mask, out=out.grad)
            x.grad += out.grad

        out._backward = bwd
    return out


def sigmoid(x):
    """Numerically stable logistic; exp is only ever taken of a non-positive value."""
    z = x.data
    val = np.empty_like(z)
    pos = z >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    val[~pos] = ez / (1.0 + ez)
    out = _make(val, (x,))
    if out._prev:

        def bwd():
            np.multiply(out.grad, out.data * (1.0 - out.data), out=out.grad)
            x.grad += out.grad

        out._backward = bwd
    return out


def dense(x, weight, bias):
    """Affine map: x[N,D] @ weight[D,K] + bias[K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"dense expects x[N,D], weight[D,K], bias[K]; got "
            f"{x.data.shape}, {weight.data.shape}, {bias.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[0] or weight.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(
            f"dense dimensions disagree: x {x.data.shape}, weight "
            f"{weight.data.shape}, bias {bias.data.shape}"
        )
    out = _make(x.data @ weight.data + bias.data, (x, weight, bias))
    if out._prev:

        def bwd():
            if x._in_graph():
                x.grad += out.grad @ weight.data.T
            if weight._in_graph():
                weight.grad += x.data.T @ out.grad
            if bias._in_graph():
                bias.grad += out.grad.sum(axis=0)

        out._backward = bwd
    return out


# Batch sub-chunk for the convolution GEMMs; larger chunks fall out of
# cache and measurably lose throughput on one core.
_CONV_CHUNK = 32

# Below this fan-in (C*kh*kw) the per-offset GEMMs degenerate (tiny K) and
# writing the output nine times dominates; a single im2col GEMM wins.
_IM2COL_FAN_IN = 96


def _im2col(xp, N, H, W, C, kh, kw):
    col = np.empty((N, H, W, kh * kw * C), xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            col[:, :, :, (di * kw + dj) * C : (di * kw + dj + 1) * C] = \
                xp[:, di : di + H, dj : dj + W, :]
    return col.reshape(N * H * W, kh * kw * C)


def conv2d(x, kernel, bias=None, padding="same", channels_last=False):
    """Stride-1 cross-correlation of x[N,C,H,W] with kernel[F,C,kh,kw],
    plus an optional per-filter bias[F].

    "same" zero padding keeps the spatial size; kernel sides must be odd.
    Implemented as one GEMM per kernel offset in an NHWC layout, which is
    the fastest single-core arrangement for small images.  With
    ``channels_last`` the input and output are [N,H,W,C]/[N,H,W,F] and the
    layout conversions drop out entirely (the kernel stays [F,C,kh,kw]).
    """
    if padding != "same":
        raise ValueError(f"unsupported padding mode: {padding!r}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects a rank-4 input and kernel[F,C,kh,kw]; got "
            f"{x.data.shape} and {kernel.data.shape}"
        )
    if channels_last:
        N, H, W, C = x.data.shape
    else:
        N, C, H, W = x.data.shape
    F, Ck, kh, kw = kernel.data.shape
    if C != Ck:
        raise ShapeError(
            f"conv2d channel mismatch: input has {C} channels {x.data.shape}, "
            f"kernel expects {Ck} {kernel.data.shape}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d needs odd kernel sides, got {kernel.data.shape}")
    if bias is not None and bias.data.shape != (F,):
        raise ShapeError(f"conv2d bias must have shape ({F},), got {bias.data.shape}")
    ph, pw = kh // 2, kw // 2

    if channels_last:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        xp = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # [N,Hp,Wp,C]
    wk = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0))  # [kh,kw,C,F]
    small_fan_in = C * kh * kw <= _IM2COL_FAN_IN

    if small_fan_in:
        col = _im2col(xp, N, H, W, C, kh, kw)
        val = (col @ wk.reshape(kh * kw * C, F)).reshape(N, H, W, F)
        if bias is not None:
            val += bias.data
    else:
        val = np.zeros((N, H, W, F), dtype=x.data.dtype)
        if bias is not None:
            val += bias.data
        for n0 in range(0, N, _CONV_CHUNK):
            n1 = min(n0 + _CONV_CHUNK, N)
            for di in range(kh):
                for dj in range(kw):
                    val[n0:n1] += xp[n0:n1, di : di + H, dj : dj + W, :] @ wk[di, dj]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(val if channels_last else np.ascontiguousarray(val.transpose(0, 3, 1, 2)),
                parents)
    if out._prev:

        def bwd():
            if channels_last:
                g = out.grad  # already [N,H,W,F], contiguous
            else:
                g = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1))
            gflat = g.reshape(N * H * W, F)
            if bias is not None and bias._in_graph():
                bias.grad += gflat.sum(axis=0)
            if kernel._in_graph():
                if small_fan_in:
                    col = _im2col(xp, N, H, W, C, kh, kw)
                    gw2 = col.T @ gflat  # [kh*kw*C, F]
                    kernel.grad += gw2.reshape(kh, kw, C, F).transpose(3, 2, 0, 1)
                else:
                    gw = np.zeros_like(wk)
                    for n0 in range(0, N, _CONV_CHUNK):
                        n1 = min(n0 + _CONV_CHUNK, N)
                        gs = g[n0:n1].reshape(-1, F)
                        for di in range(kh):
                            for dj in range(kw):
                                xs = np.ascontiguousarray(
                                    xp[n0:n1, di : di + H, dj : dj + W, :]
                                ).reshape(-1, C)
                                gw[di, dj] += xs.T @ gs
                    kernel.grad += gw.transpose(3, 2, 0, 1)
            if x._in_graph():
                # the input gradient of a same-padding correlation is the
                # same-padding correlation of the output gradient with the
                # 180-degree-rotated, channel-transposed kernel; explicit
                # copies into reused buffers beat strided matmul here
                gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
                gx = np.zeros((N, H, W, C), xp.dtype)
                wkT = np.ascontiguousarray(wk.transpose(0, 1, 3, 2))
                chunk = min(_CONV_CHUNK, N)
                buf = np.empty((chunk, H, W, F), xp.dtype)
                tmp = np.empty((chunk, H, W, C), xp.dtype)
                for n0 in range(0, N, _CONV_CHUNK):
                    n1 = min(n0 + _CONV_CHUNK, N)
                    nb = n1 - n0
                    for di in range(kh):
                        for dj in range(kw):
                            np.copyto(buf[:nb], gp[n0:n1, di : di + H, dj : dj + W, :])
                            np.matmul(buf[:nb], wkT[kh - 1 - di, kw - 1 - dj], out=tmp[:nb])
                            gx[n0:n1] += tmp[:nb]
                x.grad += gx if channels_last else gx.transpose(0, 3, 1, 2)

        out._backward = bwd
    return out


def max_pool2d(x, window=2, channels_last=False):
    """2x2 max pooling, stride 2.  Odd spatial sizes are padded with -inf on
    the bottom/right, so padding cells never win a window and never receive
    gradient.  Within a window the gradient routes to the first maximum (in
    row-major window order)."""
    if window != 2:
        raise ValueError("only 2x2 pooling windows are supported")
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects a rank-4 input, got {x.data.shape}")
    ha, wa = (1, 2) if channels_last else (2, 3)
    H, W = x.data.shape[ha], x.data.shape[wa]
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xd = x.data
    padded = H % 2 or W % 2
    if padded:
        widths = [(0, 0)] * 4
        widths[ha] = (0, 2 * Ho - H)
        widths[wa] = (0, 2 * Wo - W)
        xd = np.pad(xd, widths, constant_values=-np.inf)

    def sub(arr, di, dj):
        idx = [slice(None)] * 4
        idx[ha] = slice(di, None, 2)
        idx[wa] = slice(dj, None, 2)
        return arr[tuple(idx)]

    val = np.maximum(np.maximum(sub(xd, 0, 0), sub(xd, 0, 1)),
                     np.maximum(sub(xd, 1, 0), sub(xd, 1, 1)))
    out = _make(val, (x,))
    if out._prev:

        def bwd():
            gx = np.zeros(xd.shape, xd.dtype)
            taken = np.zeros(val.shape, dtype=bool)
            for di in (0, 1):
                for dj in (0, 1):
                    hit = (sub(xd, di, dj) == val) & ~taken
                    sub(gx, di, dj)[hit] = out.grad[hit]
                    taken |= hit
            if padded:
                idx = [slice(None)] * 4
                idx[ha] = slice(0, H)
                idx[wa] = slice(0, W)
                x.grad += gx[tuple(idx)]
            else:
                x.grad += gx

        out._backward = bwd
    return out


def upsample2d(x, factor=2, channels_last=False):
    """Nearest-neighbour 2x upsampling; each input cell fans out to a 2x2
    block, and its gradient is the sum of the four block gradients."""
    if factor != 2:
        raise ValueError("only 2x upsampling is supported")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2d expects a rank-4 input, got {x.data.shape}")
    ha = 1 if channels_last else 2
    out = _make(x.data.repeat(2, axis=ha).repeat(2, axis=ha + 1), (x,))
    if out._prev:
        a, b, c, d = x.data.shape

        def bwd():
            if channels_last:
                g = out.grad.reshape(a, b, 2, c, 2, d).sum(axis=(2, 4))
            else:
                g = out.grad.reshape(a, b, c, 2, d, 2).sum(axis=(3, 5))
            x.grad += g

        out._backward = bwd
    return out


def dropout(x, rate, training, rng=None):
    """Zero each element with probability ``rate`` and rescale survivors by
    1/(1-rate); identity when not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded rng")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) * scale
    out = _make(x.data * mask, (x,))
    if out._prev:

        def bwd():
            x.grad += out.grad * mask

        out._backward = bwd
    return out
