"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations needed by the proposal network are implemented. Tensors
wrap a numpy array; ops record a backward closure and the graph is walked in
reverse topological order. Constants (requires_grad=False with no grad
parents) carry no closure, so e.g. a teacher forward pass builds no graph.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None:
                node._backward()

    # operator sugar; scalars and ndarrays are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bwd():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bwd():
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def square(a):
    return mul(a, a)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,))

    def bwd():
        _accum(a, out.grad * (a.data > 0.0))

    out._backward = bwd if out.requires_grad else None
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, _parents=(a,))

    def bwd():
        _accum(a, out.grad * s * (1.0 - s))

    out._backward = bwd if out.requires_grad else None
    return out


def log(a, eps=0.0):
    """Natural log; with eps > 0 the argument is clamped below at eps
    (pass-through gradient inside the clamp, zero outside)."""
    a = as_tensor(a)
    x = np.maximum(a.data, eps) if eps else a.data
    out = Tensor(np.log(x), _parents=(a,))

    def bwd():
        g = out.grad / x
        if eps:
            g = g * (a.data >= eps)
        _accum(a, g)

    out._backward = bwd if out.requires_grad else None
    return out


def tsum(a, axis=None):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis), _parents=(a,))

    def bwd():
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    out._backward = bwd if out.requires_grad else None
    return out


def tmean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def bwd():
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    out._backward = bwd if out.requires_grad else None
    return out


def dot_vm(x, w):
    """(H,) vector times (H, M) matrix -> (M,)."""
    x, w = as_tensor(x), as_tensor(w)
    out = Tensor(x.data @ w.data, _parents=(x, w))

    def bwd():
        _accum(x, w.data @ out.grad)
        _accum(w, np.outer(x.data, out.grad))

    out._backward = bwd if out.requires_grad else None
    return out


def transpose(a, axes):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes), _parents=(a,))
    inv = np.argsort(axes)

    def bwd():
        _accum(a, np.transpose(out.grad, inv))

    out._backward = bwd if out.requires_grad else None
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), _parents=(a,))

    def bwd():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def take_column(a, col):
    """Select one column of a 2-D tensor."""
    a = as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data[:, col]), _parents=(a,))

    def bwd():
        g = np.zeros_like(a.data)
        g[:, col] = out.grad
        _accum(a, g)

    out._backward = bwd if out.requires_grad else None
    return out


def dropout(a, mask):
    """Apply a frozen inverted-dropout mask (already scaled by 1/keep)."""
    return mul(a, mask)


def conv1d(x, w, b, pad):
    """1-D convolution over a (T, Cin) sequence.

    w has shape (k, Cin, Cout), b shape (Cout,). Stride 1; output length
    T + 2*pad - k + 1.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    T, cin = x.data.shape
    k, _, cout = w.data.shape
    xp = np.zeros((T + 2 * pad, cin), dtype=x.data.dtype)
    xp[pad:pad + T] = x.data
    t_out = T + 2 * pad - k + 1
    y = np.zeros((t_out, cout), dtype=x.data.dtype)
    for j in range(k):
        y += xp[j:j + t_out] @ w.data[j]
    y += b.data
    out = Tensor(y, _parents=(x, w, b))

    def bwd():
        gy = out.grad
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gw[j] = xp[j:j + t_out].T @ gy
            gxp[j:j + t_out] += gy @ w.data[j].T
        _accum(x, gxp[pad:pad + T])
        _accum(w, gw)
        _accum(b, gy.sum(axis=0))

    out._backward = bwd if out.requires_grad else None
    return out


def conv2d(x, w, b, pad):
    """2-D convolution over a (D, T, Cin) grid with a (k, k, Cin, Cout) kernel."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    D, T, cin = x.data.shape
    k = w.data.shape[0]
    cout = w.data.shape[3]
    xp = np.zeros((D + 2 * pad, T + 2 * pad, cin), dtype=x.data.dtype)
    xp[pad:pad + D, pad:pad + T] = x.data
    d_out = D + 2 * pad - k + 1
    t_out = T + 2 * pad - k + 1
    y = np.zeros((d_out, t_out, cout), dtype=x.data.dtype)
    for a in range(k):
        for c in range(k):
            y += xp[a:a + d_out, c:c + t_out] @ w.data[a, c]
    y += b.data
    out = Tensor(y, _parents=(x, w, b))

    def bwd():
        gy = out.grad
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for a in range(k):
            for c in range(k):
                patch = xp[a:a + d_out, c:c + t_out]
                gw[a, c] = np.tensordot(patch, gy, axes=([0, 1], [0, 1]))
                gxp[a:a + d_out, c:c + t_out] += gy @ w.data[a, c].T
        _accum(x, gxp[pad:pad + D, pad:pad + T])
        _accum(w, gw)
        _accum(b, gy.sum(axis=(0, 1)))

    out._backward = bwd if out.requires_grad else None
    return out


def sparse_sample(x, W):
    """Sample a (T, C) sequence through a scipy CSR matrix W of shape (T, M),
    giving a (C, M) tensor of interpolated features."""
    x = as_tensor(x)
    y = np.asarray((x.data.T @ W))
    out = Tensor(y, _parents=(x,))

    def bwd():
        _accum(x, np.asarray(W @ out.grad.T))

    out._backward = bwd if out.requires_grad else None
    return out


def reduce_axis1(x, w, b):
    """Weighted reduction y[c, j] = sum_n w[n] * x[c, n, j] + b[c]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    y = np.tensordot(x.data, w.data, axes=([1], [0])) + b.data[:, None]
    out = Tensor(y, _parents=(x, w, b))

    def bwd():
        gy = out.grad
        _accum(x, gy[:, None, :] * w.data[None, :, None])
        _accum(w, np.tensordot(x.data, gy, axes=([0, 2], [0, 1])))
        _accum(b, gy.sum(axis=1))

    out._backward = bwd if out.requires_grad else None
    return out


def scatter_grid(x, d_idx, i_idx, grid_shape):
    """Scatter per-candidate features (C, J) into a dense (C, D, T) grid,
    zero outside the candidate index lists."""
    x = as_tensor(x)
    C = x.data.shape[0]
    D, T = grid_shape
    y = np.zeros((C, D, T), dtype=x.data.dtype)
    y[:, d_idx, i_idx] = x.data
    out = Tensor(y, _parents=(x,))

    def bwd():
        _accum(x, out.grad[:, d_idx, i_idx])

    out._backward = bwd if out.requires_grad else None
    return out


def cross_entropy_logits(logits, label):
    """Cross entropy -log softmax(logits)[label], numerically stable."""
    logits = as_tensor(logits)
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    out = Tensor(np.asarray(lse - z[label], dtype=z.dtype), _parents=(logits,))

    def bwd():
        p = np.exp(z - lse)
        p[label] -= 1.0
        _accum(logits, out.grad * p)

    out._backward = bwd if out.requires_grad else None
    return out
