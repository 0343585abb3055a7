"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is stored as 64-bit floats in row-major numpy buffers.  The graph is
built eagerly: every op records its parents and a closure that routes the
incoming gradient to them.  `backward` walks the graph once in reverse
topological order from a scalar root.  Tensors with ``requires_grad=False``
never receive a gradient buffer.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid structural configuration (head counts, factors, ...)."""


class GradientError(RuntimeError):
    """Raised when backward is called on an invalid root."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise GradientError(
                f"backward requires a scalar root, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

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

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the axes that broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b, a.requires_grad, (a,))
        out._backward = lambda g: a._accumulate(_unbroadcast(g, a.shape))
        return out
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        bval = np.asarray(b, dtype=np.float64)
        out = Tensor(a.data * bval, a.requires_grad, (a,))
        out._backward = lambda g: a._accumulate(_unbroadcast(g * bval, a.shape))
        return out
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _bw
    return out


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**p, a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * p * a.data ** (p - 1))
    return out


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val, a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * val)
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g / a.data)
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * mask)
    return out


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    val = np.tanh(a.data)
    out = Tensor(val, a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * (1.0 - val * val))
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    val = np.where(
        a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
        np.exp(np.minimum(a.data, 0.0)) / (1.0 + np.exp(np.minimum(a.data, 0.0))),
    )
    out = Tensor(val, a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * val * (1.0 - val))
    return out


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes), a.requires_grad, (a,))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    out._backward = lambda g: a._accumulate(g.transpose(inv))
    return out


def take(a: Tensor, key) -> Tensor:
    """Slice / integer-array indexing with scatter-add backward."""
    a = as_tensor(a)
    out = Tensor(a.data[key], a.requires_grad, (a,))

    def _bw(g):
        gi = np.zeros_like(a.data)
        np.add.at(gi, key, g)
        a._accumulate(gi)

    out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
        tuple(tensors),
    )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out._backward = _bw
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad, (a,))

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = _bw
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul expects >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        a._accumulate(g @ b.data.swapaxes(-1, -2))
        b._accumulate(a.data.swapaxes(-1, -2) @ g)

    out._backward = _bw
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val, a.requires_grad, (a,))

    def _bw(g):
        dot = (g * val).sum(axis=axis, keepdims=True)
        a._accumulate(val * (g - dot))

    out._backward = _bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(
        gamma.data * xhat + beta.data,
        x.requires_grad or gamma.requires_grad or beta.requires_grad,
        (x, gamma, beta),
    )

    def _bw(g):
        bcast = tuple(range(g.ndim - 1))
        gamma._accumulate((g * xhat).sum(axis=bcast) if bcast else g * xhat)
        beta._accumulate(g.sum(axis=bcast) if bcast else g.copy())
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        x._accumulate(dx)

    out._backward = _bw
    return out


# -- image ops ---------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Cross-correlate ``x[c_in,h,w]`` with ``kernel[c_out,c_in,kh,kw]``, zero padded."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, kernel {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # cols: [c_in*kh*kw, oh*ow]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, oh * ow)
    kmat = kernel.data.reshape(c_out, c_in * kh * kw)
    val = (kmat @ cols).reshape(c_out, oh, ow)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        val = val + bias.data.reshape(c_out, 1, 1)
        parents.append(bias)
    out = Tensor(val, any(p.requires_grad for p in parents), tuple(parents))

    def _bw(g):
        g2 = g.reshape(c_out, oh * ow)
        kernel._accumulate((g2 @ cols.T).reshape(kernel.shape))
        dcols = kmat.T @ g2  # [c_in*kh*kw, oh*ow]
        dxp = np.zeros_like(xp)
        dwin = dcols.reshape(c_in, kh, kw, oh, ow)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + oh, j : j + ow] += dwin[:, i, j]
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding]
        x._accumulate(dxp)
        if bias is not None:
            bias._accumulate(g.sum(axis=(1, 2)))

    out._backward = _bw
    return out


def _bilinear_axis(n_in: int, factor: int):
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upscale ``x[c,h,w]`` by an integer factor (align-corners=false)."""
    x = as_tensor(x)
    if not isinstance(factor, int) or factor < 1:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
    c, h, w = x.shape
    r0, r1, rf = _bilinear_axis(h, factor)
    c0, c1, cf = _bilinear_axis(w, factor)
    rf = rf[:, None]
    cf = cf[None, :]
    d = x.data
    val = (
        d[:, r0][:, :, c0] * (1 - rf) * (1 - cf)
        + d[:, r0][:, :, c1] * (1 - rf) * cf
        + d[:, r1][:, :, c0] * rf * (1 - cf)
        + d[:, r1][:, :, c1] * rf * cf
    )
    out = Tensor(val, x.requires_grad, (x,))

    def _bw(g):
        gx = np.zeros_like(d)
        rows = [(r0, 1 - rf), (r1, rf)]
        colsw = [(c0, 1 - cf), (c1, cf)]
        for ri, rw in rows:
            for ci, cw in colsw:
                contrib = g * rw * cw
                np.add.at(gx, (slice(None), ri[:, None], ci[None, :]), contrib)
        x._accumulate(gx)

    out._backward = _bw
    return out


# -- fused losses ------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy from raw logits, log-sum-exp stable."""
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce shape mismatch: {logits.shape} vs {t.shape}")
    z = logits.data
    # softplus(z) - z*t computed stably
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(loss.mean(), logits.requires_grad, (logits,))
    n = z.size

    def _bw(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        logits._accumulate(g * (p - t) / n)

    out._backward = _bw
    return out
