"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery to train the networks in this package and to express
the losses with exact analytic gradients: elementwise arithmetic with
broadcasting, reductions, (batched) matmul, convolution, padding, nearest
upsampling, concatenation and stop-gradient. dtype follows the input data,
so the same graph code runs in float32 for training and float64 for
gradient checks.
"""

from __future__ import annotations

import numpy as np

from . import backend


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accum(self, g, fresh: bool = False):
        """Accumulate gradient; fresh=True marks g as a newly allocated array
        this node may take ownership of (skips a defensive copy)."""
        if self.grad is None:
            if fresh and isinstance(g, np.ndarray) and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()

        def visit(t: "Tensor"):
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    topo.append(node)
                    continue
                if id(node) in seen or not node.requires_grad:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    stack.append((p, False))

        visit(self)
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape), fresh=True)

    return Tensor._make(out_data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1.0), fresh=True)

    return Tensor._make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data, fresh=True)

    return Tensor._make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data, fresh=True)

    return Tensor._make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out_data, fresh=True)

    return Tensor._make(out_data, (a,), backward)


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        a._accum(g * np.sign(a.data), fresh=True)

    return Tensor._make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = a.data * mask

    def backward(g):
        a._accum(g * mask, fresh=True)

    return Tensor._make(out_data, (a,), backward)


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    out_data = np.maximum(a.data, lo)

    def backward(g):
        a._accum(g * mask)

    return Tensor._make(out_data, (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

    return Tensor._make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape), fresh=True)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape), fresh=True)

    return Tensor._make(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return Tensor._make(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        a._accum(g.transpose(inv))

    return Tensor._make(out_data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum(p)

    return Tensor._make(out_data, tuple(tensors), backward)


def pad2d(a, p: int, mode: str = "zeros") -> Tensor:
    """Pad the last two axes by p on each side. Modes: zeros, circular."""
    a = as_tensor(a)
    if p == 0:
        return a
    npmode = {"zeros": "constant", "circular": "wrap"}[mode]
    out_data = np.pad(a.data, [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)], mode=npmode)

    def backward(g):
        if mode == "circular":
            g = g.copy()
            # fold wrapped borders back before cropping
            g[..., p : 2 * p, :] += g[..., -p:, :]
            g[..., -2 * p : -p, :] += g[..., :p, :]
            core = g[..., p:-p, :]
            core[..., :, p : 2 * p] += core[..., :, -p:]
            core[..., :, -2 * p : -p] += core[..., :, :p]
            a._accum(core[..., :, p:-p])
        else:
            a._accum(g[..., p:-p, p:-p])

    return Tensor._make(out_data, (a,), backward)


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Valid NCHW convolution; pad explicitly with pad2d first."""
    x, w = as_tensor(x), as_tensor(w)
    out_data = backend.conv2d(x.data, w.data, stride)
    kh, kw = w.shape[2], w.shape[3]
    h, wd = x.shape[2], x.shape[3]

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accum(backend.conv2d_grad_x(g, w.data, h, wd, stride), fresh=True)
        if w.requires_grad:
            w._accum(backend.conv2d_grad_w(x.data, g, kh, kw, stride), fresh=True)

    return Tensor._make(out_data, (x, w), backward)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Fused batch normalization over (N, H, W) per feature channel of an
    NCHW tensor, with the standard closed-form backward. gamma/beta are (C,)
    Tensors. Returns (y, batch_mean, batch_var) with the stats detached."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = np.square(x.data - mu).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gc = gamma.data.reshape(1, -1, 1, 1)
    out_data = xhat * gc + beta.data.reshape(1, -1, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes), fresh=True)
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes), fresh=True)
        if x.requires_grad:
            gsum = g.sum(axis=axes, keepdims=True)
            gx = (g * xhat).sum(axis=axes, keepdims=True)
            dx = (gc * inv / m) * (m * g - gsum - xhat * gx)
            x._accum(dx, fresh=True)

    out = Tensor._make(out_data, (x, gamma, beta), backward)
    return out, mu.reshape(-1), var.reshape(-1)


def upsample2x(a) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes."""
    a = as_tensor(a)
    out_data = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        gg = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        a._accum(gg.sum(axis=(-3, -1)), fresh=True)

    return Tensor._make(out_data, (a,), backward)
