"""Reverse-mode automatic differentiation on 64-bit numpy arrays.

A ``Tensor`` wraps an ``np.float64`` array together with an optional record of
the operation that produced it (parent tensors plus a backward rule).  Calling
:func:`backward` on a scalar result traces the reachable graph into a
:class:`Tape` (parents strictly before children), then replays it in reverse,
accumulating gradients additively so fan-out is handled correctly and every
node is visited exactly once.

All arithmetic is float64 end to end; there is no implicit down-casting.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

Array = np.ndarray

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap inference/eval path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Value node of the computation graph.

    ``_parents`` and ``_backward`` are populated only for tensors produced by
    a differentiable operation while at least one input requires gradients.
    ``_backward`` maps the upstream gradient to one gradient array per parent
    (``None`` for parents that do not need one).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: tuple[int, ...] | None = None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def param(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _node(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    """Create a graph node, recording the backward rule only when tracking."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tape:
    """Ordered record of the operations reachable from a root tensor.

    ``nodes`` lists every tensor in the root's history exactly once, with
    parents strictly before children, so a reverse sweep propagates gradients
    in one pass.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # Iterative post-order DFS; the second stack entry flags "children done".
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(root: Tensor, seed: Array | None = None) -> None:
    """Accumulate gradients of ``root`` into ``.grad`` of every ancestor."""
    if not root.requires_grad:
        raise StateError("backward() called on a tensor with no recorded graph")
    if seed is None:
        if root.size != 1:
            raise DimensionError(
                f"backward() on non-scalar output of shape {root.shape} needs an explicit seed"
            )
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.data.shape:
        raise DimensionError(f"seed shape {seed.shape} does not match output shape {root.shape}")

    tape = Tape.trace(root)
    _accumulate(root, seed)
    for node in reversed(tape.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            _accumulate(parent, g)


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _node(-a.data, (a,), bwd)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), bwd)


# -- unary functions --------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _node(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), bwd)


def sin(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * np.cos(a.data),)

    return _node(np.sin(a.data), (a,), bwd)


def cos(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g * np.sin(a.data),)

    return _node(np.cos(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _node(out, (a,), bwd)


def relu6(a: Tensor) -> Tensor:
    out = np.clip(a.data, 0.0, 6.0)

    def bwd(g):
        return (g * ((a.data > 0.0) & (a.data < 6.0)),)

    return _node(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        s = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(a.data))),
            np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
        )
        return (g * s,)

    return _node(out, (a,), bwd)


ARCCOS_EPS = 1e-7


def arccos_clamped(a: Tensor) -> Tensor:
    """arccos with the argument clamped into [-1+eps, 1-eps].

    The clamp keeps the derivative finite at the endpoints; outside the open
    interval the function is constant, so the gradient there is zero.
    """
    if not np.all(np.isfinite(a.data)):
        raise NumericError("arccos_clamped: non-finite input")
    lo, hi = -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS
    clipped = np.clip(a.data, lo, hi)
    out = np.arccos(clipped)

    def bwd(g):
        inside = (a.data > lo) & (a.data < hi)
        return (np.where(inside, -g / np.sqrt(1.0 - clipped * clipped), 0.0),)

    return _node(out, (a,), bwd)


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bwd)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        # Basic indexing never aliases the same element twice, so += is safe.
        full[key] += g
        return (full,)

    return _node(out, (a,), bwd)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _node(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // out.size

    def bwd(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _node(out, (a,), bwd)


def cumsum(a: Tensor, axis: int) -> Tensor:
    out = np.cumsum(a.data, axis=axis)

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(out, (a,), bwd)


def norm_l2(a: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor (scalar output).

    The gradient at exactly zero is taken to be zero (a valid subgradient);
    reachable training states never sit at the exact singular point.
    """
    n = float(np.sqrt((a.data * a.data).sum()))
    out = np.asarray(n)

    def bwd(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _node(out, (a,), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by max subtraction."""
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows: non-finite input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return ((g - (g * s).sum(axis=1, keepdims=True)) * s,)

    return _node(s, (a,), bwd)


def cross_entropy_rows(logits: Tensor, labels: Array) -> Tensor:
    """Mean negative log-softmax of the true class over rows.

    ``logits`` is (N, C); ``labels`` an integer array of shape (N,).
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_rows expects 2-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits rows {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        bad = int(np.argmax((labels < 0) | (labels >= c)))
        raise NumericError(f"cross_entropy_rows: label {labels[bad]} at row {bad} outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = np.asarray(-(picked - lse).mean())

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _node(out, (logits,), bwd)


# -- image-shaped operations -------------------------------------------------


def _resize_coeffs(n_in: int, n_out: int):
    """Source indices and fractions for align-corners-false linear resize."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of a (C, H, W) tensor with align_corners=False."""
    if a.ndim != 3:
        raise DimensionError(f"bilinear_resize expects (C, H, W), got shape {a.shape}")
    c, h, w = a.shape
    y0, y1, fy = _resize_coeffs(h, out_h)
    x0, x1, fx = _resize_coeffs(w, out_w)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    WY, WX = fy[:, None], fx[None, :]
    w00 = (1 - WY) * (1 - WX)
    w01 = (1 - WY) * WX
    w10 = WY * (1 - WX)
    w11 = WY * WX
    d = a.data
    out = (
        w00 * d[:, Y0, X0]
        + w01 * d[:, Y0, X1]
        + w10 * d[:, Y1, X0]
        + w11 * d[:, Y1, X1]
    )

    def bwd(g):
        da = np.zeros_like(d)
        np.add.at(da, (slice(None), Y0, X0), w00 * g)
        np.add.at(da, (slice(None), Y0, X1), w01 * g)
        np.add.at(da, (slice(None), Y1, X0), w10 * g)
        np.add.at(da, (slice(None), Y1, X1), w11 * g)
        return (da,)

    return _node(out, (a,), bwd)


def bilinear_upsample2x(a: Tensor) -> Tensor:
    if a.ndim != 3:
        raise DimensionError(f"bilinear_upsample2x expects (C, H, W), got shape {a.shape}")
    return bilinear_resize(a, 2 * a.shape[1], 2 * a.shape[2])


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution: (C_in, H, W) x (C_out, C_in) -> (C_out, H, W)."""
    if x.ndim != 3 or w.ndim != 2:
        raise DimensionError(f"conv1x1 expects (C,H,W) input and (Cout,Cin) weight, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    if w.shape[1] != cin:
        raise DimensionError(f"conv1x1: weight expects {w.shape[1]} input channels, input has {cin}")
    flat = x.reshape((cin, h * wd))
    out = matmul(w, flat).reshape((w.shape[0], h, wd))
    if b is not None:
        out = out + b.reshape((w.shape[0], 1, 1))
    return out


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with padding 1 and stride 1 or 2.

    ``x`` is (C_in, H, W), ``w`` is (C_out, C_in, 3, 3).  Implemented as an
    im2col patch matrix times the flattened kernel; the backward pass scatters
    column gradients back through the same patch layout.
    """
    if stride not in (1, 2):
        raise DimensionError(f"conv3x3 supports stride 1 or 2, got {stride}")
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3 expects (C,H,W) input and (Cout,Cin,3,3) weight, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise DimensionError(f"conv3x3: weight expects {w.shape[1]} input channels, input has {cin}")
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1

    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 3, 3, ho, wo), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, ki : ki + (ho - 1) * stride + 1 : stride, kj : kj + (wo - 1) * stride + 1 : stride]
    cols2 = cols.reshape(cin * 9, ho * wo)
    w2 = w.data.reshape(cout, cin * 9)
    out = (w2 @ cols2).reshape(cout, ho, wo)
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv3x3: bias shape {b.shape} does not match {cout} output channels")
    if b is not None:
        out = out + b.data[:, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols2.T).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(cin, 3, 3, ho, wo)
        gxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                gxp[:, ki : ki + (ho - 1) * stride + 1 : stride, kj : kj + (wo - 1) * stride + 1 : stride] += gcols[
                    :, ki, kj
                ]
        gx = gxp[:, 1 : 1 + h, 1 : 1 + wd]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _node(out, parents, bwd)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array | None,
    running_var: Array | None,
    training: bool,
    eps: float = 1e-5,
) -> tuple[Tensor, Array, Array]:
    """Per-channel batch normalisation over the spatial axes of (C, H, W).

    In training mode the statistics come from the input itself and the updated
    running statistics are returned (momentum handled by the caller).  In eval
    mode the stored statistics are required.
    """
    if x.ndim != 3:
        raise DimensionError(f"batchnorm expects (C, H, W), got shape {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if training:
        mean = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        # Composing primitives gives the exact gradient through the batch
        # statistics without a hand-derived fused rule.
        mu = x.mean(axis=(1, 2), keepdims=True)
        centred = x - mu
        v = (centred * centred).mean(axis=(1, 2), keepdims=True)
        xhat = centred / sqrt(v + eps)
    else:
        if running_mean is None or running_var is None:
            raise StateError("batchnorm: eval mode requested before any statistics were accumulated")
        mean, var = running_mean, running_var
        xhat = (x - constant(mean[:, None, None])) / constant(np.sqrt(var[:, None, None] + eps))
    out = xhat * gamma.reshape((c, 1, 1)) + beta.reshape((c, 1, 1))
    return out, np.asarray(mean), np.asarray(var)
