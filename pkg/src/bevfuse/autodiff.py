"""Reverse-mode autodiff over a fixed vocabulary of dense float64 ops.

A ``Tensor`` wraps a float64 ndarray. Ops build a tape of backward
closures; ``Tensor.backward()`` walks it in reverse topological order.
Tensors are treated as immutable once created, so backward closures may
keep references to forward arrays without copying. Gradient accumulation
never mutates arrays in place (``grad = grad + g``), which makes it safe
for backward functions to hand out views.

The vocabulary is exactly what the fusion model needs: linear maps over
the trailing axis, layer norm, softmax, sigmoid/relu, 3x3 convolution,
bilinear grid sampling, dropout, elementwise arithmetic with numpy
broadcasting, reductions, concat/slice/reshape, and detach. There is no
graph compiler; every op eagerly computes its value.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand extents do not match the op's contract."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar root, accumulating into ``.grad``."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        order = _toposort(self)
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, unbroadcast on the way back)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    sign = np.sign(x.data)

    def backward(g):
        _acc(x, g * sign)

    return _result(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(x.data)

    def backward(g):
        _acc(x, g / x.data)

    return _result(data, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through the unclipped region only."""
    data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _acc(x, g * inside)

    return _result(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward(g):
        _acc(x, g * mask)

    return _result(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        _acc(x, g * data * (1.0 - data))

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra over the trailing axis


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W (+ b) over the last axis; x is [..., Cin], W is [Cin, Cout]."""
    cin, cout = weight.data.shape
    if x.data.shape[-1] != cin:
        raise ShapeError(f"linear: input has {x.data.shape[-1]} channels, weight expects {cin}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"linear: bias shape {bias.data.shape} != ({cout},)")
    x2 = x.data.reshape(-1, cin)
    y2 = x2 @ weight.data
    if bias is not None:
        y2 = y2 + bias.data
    data = y2.reshape(x.data.shape[:-1] + (cout,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        _acc(x, (g2 @ weight.data.T).reshape(x.data.shape))
        _acc(weight, x2.T @ g2)
        if bias is not None:
            _acc(bias, g2.sum(axis=0))

    return _result(data, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("layer_norm: gamma/beta must match the trailing extent")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        ghat = g * gamma.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (ghat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=red))
        _acc(beta, g.sum(axis=red))

    return _result(data, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with the mandatory max shift."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _acc(x, data * (g - dot))

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def backward(g):
        _acc(x, np.broadcast_to(g, x.data.shape))

    return _result(data, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean())

    def backward(g):
        _acc(x, np.broadcast_to(g / n, x.data.shape))

    return _result(data, (x,), backward)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(gg, x.data.shape))

    return _result(data, (x,), backward)


def mean_axes(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Mean over the given axes, dropping them."""
    n = 1
    for a in axes:
        n *= x.data.shape[a]
    data = x.data.mean(axis=axes)

    def backward(g):
        gg = np.expand_dims(g, axes)
        _acc(x, np.broadcast_to(gg / n, x.data.shape))

    return _result(data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _acc(x, g.reshape(x.data.shape))

    return _result(data, (x,), backward)


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.data.shape[-1] for p in parts]

    def backward(g):
        start = 0
        for p, s in zip(parts, sizes):
            _acc(p, g[..., start : start + s])
            start += s

    return _result(data, parts, backward)


def narrow_last(x: Tensor, start: int, size: int) -> Tensor:
    """Slice [start, start+size) of the last axis."""
    data = x.data[..., start : start + size]

    def backward(g):
        gg = np.zeros_like(x.data)
        gg[..., start : start + size] = g
        _acc(x, gg)

    return _result(data, (x,), backward)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity when ``train`` is off or rate is zero."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    data = x.data * mask

    def backward(g):
        _acc(x, g * mask)

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# spatial ops


def bilinear_sample_many(grid: Tensor, points: Tensor) -> Tensor:
    """Sample grid [H,W,C] at points [N,2] (row, col) -> [N,C].

    Out-of-bounds corners read as zero; differentiable w.r.t. both the
    grid and the points (piecewise w.r.t. points, with the one-sided
    derivative at integer coordinates).
    """
    if grid.data.ndim != 3:
        raise ShapeError("bilinear_sample_many: grid must be [H,W,C]")
    if points.data.ndim != 2 or points.data.shape[1] != 2:
        raise ShapeError("bilinear_sample_many: points must be [N,2]")
    h, w, _ = grid.data.shape
    ys = np.ascontiguousarray(points.data[:, 0])
    xs = np.ascontiguousarray(points.data[:, 1])
    data = kernels.sample_forward(grid.data, ys, xs)

    def backward(g):
        g = np.ascontiguousarray(g)
        if grid.requires_grad:
            _acc(grid, kernels.sample_backward_grid(g, ys, xs, h, w))
        if points.requires_grad:
            gys, gxs = kernels.sample_backward_points(grid.data, g, ys, xs)
            _acc(points, np.stack([gys, gxs], axis=1))

    return _result(data, (grid, points), backward)


def bilinear_sample(grid: Tensor, point) -> Tensor:
    """Single-point convenience wrapper; returns a [C] tensor."""
    pt = point if isinstance(point, Tensor) else Tensor(np.asarray(point, dtype=np.float64))
    return reshape(bilinear_sample_many(grid, reshape(pt, (1, 2))), (grid.data.shape[-1],))


def conv3x3(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding; x [H,W,Cin], kernel [3,3,Cin,Cout]."""
    if x.data.ndim != 3:
        raise ShapeError("conv3x3: input must be [H,W,Cin]")
    if kernel.data.ndim != 4 or kernel.data.shape[:2] != (3, 3):
        raise ShapeError("conv3x3: kernel must be [3,3,Cin,Cout]")
    h, w, cin = x.data.shape
    if kernel.data.shape[2] != cin:
        raise ShapeError(f"conv3x3: kernel expects {kernel.data.shape[2]} input channels, got {cin}")
    cout = kernel.data.shape[3]
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError("conv3x3: bias shape mismatch")
    xp = np.zeros((h + 2, w + 2, cin))
    xp[1 : h + 1, 1 : w + 1] = x.data
    out = np.zeros((h, w, cout))
    for di in range(3):
        for dj in range(3):
            win = xp[di : di + h, dj : dj + w].reshape(-1, cin)
            out += (win @ kernel.data[di, dj]).reshape(h, w, cout)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for di in range(3):
            for dj in range(3):
                win = xp[di : di + h, dj : dj + w].reshape(-1, cin)
                gk[di, dj] = win.T @ g2
                gxp[di : di + h, dj : dj + w] += (g2 @ kernel.data[di, dj].T).reshape(h, w, cin)
        _acc(x, gxp[1 : h + 1, 1 : w + 1])
        _acc(kernel, gk)
        if bias is not None:
            _acc(bias, g2.sum(axis=0))

    return _result(out, parents, backward)


def assert_finite(x: Tensor | np.ndarray, what: str = "value") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite {what}")
