"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap float64 arrays and record a backward closure per op; calling
``backward()`` on a scalar loss walks the graph in reverse topological
order. Graphs are single-use: build a fresh forward pass per step.

Convolutions follow the usual cross-correlation semantics with weight
layout (out_ch, in_ch, *kernel); transposed convolutions take weights as
(in_ch, out_ch, *kernel) and are exact adjoints of the matching strided
convolution, which is also how conv input gradients are computed.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..voxcore import VoxError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, expo):
        return pow_const(self, expo)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(out.grad, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward():
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-out.grad, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def pow_const(x, expo: float) -> Tensor:
    x = _as_tensor(x)
    e = float(expo)
    out_data = x.data**e

    def backward():
        x.accumulate(out.grad * e * x.data ** (e - 1.0))

    out = _make(out_data, (x,), backward)
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward():
        x.accumulate(out.grad.reshape(x.shape))

    out = _make(out_data, (x,), backward)
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def backward():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.asarray(g)
        x.accumulate(np.broadcast_to(g, x.shape) / count)

    out = _make(out_data, (x,), backward)
    return out


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def backward():
        x.accumulate(np.broadcast_to(out.grad, x.shape).copy())

    out = _make(x.data.sum(), (x,), backward)
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(out.grad[tuple(sl)])

    out = _make(out_data, tuple(tensors), backward)
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward():
        x.accumulate(out.grad * mask)

    out = _make(x.data * mask, (x,), backward)
    return out


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)

    def backward():
        x.accumulate(out.grad * factor)

    out = _make(x.data * factor, (x,), backward)
    return out


def silu(x) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def backward():
        x.accumulate(out.grad * sig * (1.0 + x.data * (1.0 - sig)))

    out = _make(out_data, (x,), backward)
    return out


def abs_val(x) -> Tensor:
    x = _as_tensor(x)

    def backward():
        x.accumulate(out.grad * np.sign(x.data))

    out = _make(np.abs(x.data), (x,), backward)
    return out


def linear(x, w, b=None) -> Tensor:
    """x (B, F_in) @ w (F_in, F_out) + b."""
    x, w = _as_tensor(x), _as_tensor(w)
    out_data = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data

    def backward():
        if x.requires_grad:
            x.accumulate(out.grad @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ out.grad)
        if b is not None and b.requires_grad:
            b.accumulate(out.grad.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_data, parents, backward)
    return out


# convolution machinery -----------------------------------------------


def _norm_tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise VoxError(f"expected {n} values, got {v}")
    return v


def _windows(x: np.ndarray, ksize, stride, pad):
    """Strided sliding windows of x: (B, C, *out, *k)."""
    nsp = x.ndim - 2
    if any(pad):
        x = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    win = sliding_window_view(x, ksize, axis=tuple(range(2, 2 + nsp)))
    sl = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    return win[sl]


def _conv_raw(x: np.ndarray, w: np.ndarray, stride, pad) -> np.ndarray:
    nsp = x.ndim - 2
    if x.shape[1] != w.shape[1]:
        raise VoxError(f"conv channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    for i in range(nsp):
        if x.shape[2 + i] + 2 * pad[i] < w.shape[2 + i]:
            raise VoxError(f"spatial dim {i} too small for kernel")
    win = _windows(x, w.shape[2:], stride, pad)
    axes_x = [1] + list(range(2 + nsp, 2 + 2 * nsp))
    axes_w = [1] + list(range(2, 2 + nsp))
    out = np.tensordot(win, w, axes=(axes_x, axes_w))  # (B, *out, F)
    return np.moveaxis(out, -1, 1)


def _conv_weight_grad(x: np.ndarray, dy: np.ndarray, ksize, stride, pad) -> np.ndarray:
    nsp = x.ndim - 2
    win = _windows(x, ksize, stride, pad)  # (B, C, *out, *k)
    axes_win = [0] + list(range(2, 2 + nsp))
    axes_dy = [0] + list(range(2, 2 + nsp))
    dw = np.tensordot(win, dy, axes=(axes_win, axes_dy))  # (C, *k, F)
    return np.moveaxis(dw, -1, 0)


def _dilate(x: np.ndarray, stride, opad) -> np.ndarray:
    nsp = x.ndim - 2
    if all(s == 1 for s in stride) and all(o == 0 for o in opad):
        return x
    out_shape = list(x.shape[:2])
    for i in range(nsp):
        out_shape.append((x.shape[2 + i] - 1) * stride[i] + 1 + opad[i])
    out = np.zeros(out_shape, dtype=x.dtype)
    sl = (slice(None), slice(None)) + tuple(
        slice(0, (x.shape[2 + i] - 1) * stride[i] + 1, stride[i]) for i in range(nsp))
    out[sl] = x
    return out


def _conv_transpose_raw(x: np.ndarray, w: np.ndarray, stride, pad, opad) -> np.ndarray:
    """Adjoint of _conv_raw; w layout (in_ch, out_ch, *k)."""
    nsp = x.ndim - 2
    for i in range(nsp):
        if pad[i] > w.shape[2 + i] - 1:
            raise VoxError("padding exceeds kernel-1 in transposed conv")
        if opad[i] >= stride[i] and opad[i] != 0:
            raise VoxError("output_padding must be < stride")
    xd = _dilate(x, stride, opad)
    wf = np.flip(w, axis=tuple(range(2, 2 + nsp))).swapaxes(0, 1)
    inner_pad = tuple(w.shape[2 + i] - 1 - pad[i] for i in range(nsp))
    return _conv_raw(xd, np.ascontiguousarray(wf), (1,) * nsp, inner_pad)


def _conv_nd(x, w, b, stride, pad, nsp: int) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    stride = _norm_tuple(stride, nsp)
    pad = _norm_tuple(pad, nsp)
    if x.data.ndim != nsp + 2 or w.data.ndim != nsp + 2:
        raise VoxError(f"conv{nsp}d expects rank-{nsp + 2} input and weight")
    out_data = _conv_raw(x.data, w.data, stride, pad)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise VoxError("bias shape must be (out_channels,)")
        out_data = out_data + b.data.reshape((1, -1) + (1,) * nsp)

    def backward():
        dy = out.grad
        if x.requires_grad:
            # conv weight (F, C, K) is already (in, out, K) for the adjoint
            opad = tuple(
                x.shape[2 + i] - ((dy.shape[2 + i] - 1) * stride[i] + w.shape[2 + i] - 2 * pad[i])
                for i in range(nsp))
            x.accumulate(_conv_transpose_raw(dy, w.data, stride, pad, opad))
        if w.requires_grad:
            w.accumulate(_conv_weight_grad(x.data, dy, w.shape[2:], stride, pad))
        if b is not None and b.requires_grad:
            b.accumulate(dy.sum(axis=(0,) + tuple(range(2, 2 + nsp))))

    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_data, parents, backward)
    return out


def conv2d(x, w, b=None, stride=1, pad=0) -> Tensor:
    return _conv_nd(x, w, b, stride, pad, 2)


def conv3d(x, w, b=None, stride=1, pad=0) -> Tensor:
    return _conv_nd(x, w, b, stride, pad, 3)


def _conv_transpose_nd(x, w, b, stride, pad, opad, nsp: int) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    stride = _norm_tuple(stride, nsp)
    pad = _norm_tuple(pad, nsp)
    opad = _norm_tuple(opad, nsp)
    if x.data.ndim != nsp + 2 or w.data.ndim != nsp + 2:
        raise VoxError(f"conv_transpose{nsp}d expects rank-{nsp + 2} input and weight")
    if x.shape[1] != w.shape[0]:
        raise VoxError(f"transposed conv channel mismatch: input {x.shape[1]}, weight {w.shape[0]}")
    out_data = _conv_transpose_raw(x.data, w.data, stride, pad, opad)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise VoxError("bias shape must be (out_channels,)")
        out_data = out_data + b.data.reshape((1, -1) + (1,) * nsp)

    def backward():
        dy = out.grad
        if x.requires_grad:
            # adjoint of the adjoint: the matching strided conv, same weight
            x.accumulate(_conv_raw(dy, w.data, stride, pad))
        if w.requires_grad:
            # <convT(x, w), dy> = <x, conv(dy, w)>: weight grad with the roles
            # of input and output-gradient exchanged
            w.accumulate(_conv_weight_grad(dy, x.data, w.shape[2:], stride, pad))
        if b is not None and b.requires_grad:
            b.accumulate(dy.sum(axis=(0,) + tuple(range(2, 2 + nsp))))

    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_data, parents, backward)
    return out


def conv_transpose2d(x, w, b=None, stride=1, pad=0, output_padding=0) -> Tensor:
    return _conv_transpose_nd(x, w, b, stride, pad, output_padding, 2)


def conv_transpose3d(x, w, b=None, stride=1, pad=0, output_padding=0) -> Tensor:
    return _conv_transpose_nd(x, w, b, stride, pad, output_padding, 3)


# normalization / losses / embeddings ---------------------------------


def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    B, C = x.shape[0], x.shape[1]
    if C % num_groups != 0:
        raise VoxError(f"channels {C} not divisible by groups {num_groups}")
    spatial = x.shape[2:]
    xg = reshape(x, (B, num_groups, -1))
    mu = mean(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = mean(mul(xc, xc), axis=2, keepdims=True)
    xhat = mul(xc, pow_const(add(var, eps), -0.5))
    xhat = reshape(xhat, x.shape)
    shape = (1, C) + (1,) * len(spatial)
    return add(mul(xhat, reshape(_as_tensor(gamma), shape)), reshape(_as_tensor(beta), shape))


def mse_loss(pred, target) -> Tensor:
    d = sub(_as_tensor(pred), _as_tensor(target))
    return mean(mul(d, d))


def l1_loss(pred, target) -> Tensor:
    return mean(abs_val(sub(_as_tensor(pred), _as_tensor(target))))


def time_embedding(t, dim: int) -> Tensor:
    """Sinusoidal embedding: interleaved [sin(t*w_i), cos(t*w_i)] with
    frequencies geometric from 1 down to 1/10000. Returns (B, dim)."""
    if dim < 2 or dim % 2 != 0:
        raise VoxError("embedding dim must be even and >= 2")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    m = dim // 2
    if m == 1:
        omega = np.array([1.0])
    else:
        omega = (1e-4) ** (np.arange(m) / (m - 1))
    ang = t[:, None] * omega[None, :]
    emb = np.empty((t.shape[0], dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return Tensor(emb)
