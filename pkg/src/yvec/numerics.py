"""Dense-array numerics with reverse-mode differentiation.

Everything the embedding pipeline computes is expressed through the
operations in this module. Values live in plain numpy arrays wrapped in
:class:`Tensor`; each operation records a backward closure so that
``backward(loss)`` can fill in gradients by walking the recorded graph in
reverse topological order. No external autodiff or tensor framework is
used; numpy provides the dense-array arithmetic only.

Single precision is the training default, double precision is used for
gradient checks; ``set_default_dtype`` flips the build-wide default.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "InputTooShortError",
    "NonFiniteError",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "tsum",
    "tmean",
    "sqrt",
    "exp",
    "log",
    "logsumexp",
    "relu",
    "leaky_relu",
    "sigmoid",
    "conv1d_valid",
    "maxpool1d",
    "avgpool_time",
    "layer_norm_channels",
    "linear_affine",
    "dropout",
    "backward",
    "sgd_momentum_step",
]

_DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class InputTooShortError(ValueError):
    """A windowed operation received fewer samples than its window needs."""


class NonFiniteError(ValueError):
    """A tensor holds NaN or Inf where only finite values are allowed."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-dimensional real array with an optional gradient buffer.

    Tensors built directly from user data are graph leaves and are
    validated to be finite. Tensors produced by operations carry the
    parent references and backward closure used by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                arr = data
            else:
                arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"{context} contains NaN or Inf")
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # never mutate an existing grad buffer in place: closures may alias it
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list:
    """Topological order of the subgraph reaching ``root``; each node once."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar. Repeated calls without ``zero_grad``
    accumulate into existing gradient buffers.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")
    order = _topo_order(loss)
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return Tensor._from_op(out_data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def back(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g)

    return Tensor._from_op(-a.data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.shape}")

    def back(g):
        _accumulate(a, g.T)

    return Tensor._from_op(np.ascontiguousarray(a.data.T), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def back(g):
        _accumulate(a, g.reshape(orig))

    return Tensor._from_op(a.data.reshape(shape), (a,), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    extent = a.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis of extent {extent}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def back(g):
        gx = np.zeros_like(a.data)
        gx[index] = g
        _accumulate(a, gx)

    return Tensor._from_op(a.data[index], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return Tensor._from_op(out_data, tuple(tensors), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return Tensor._from_op(out_data, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return Tensor._from_op(out_data, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g * (0.5 / out_data))

    return Tensor._from_op(out_data, (a,), back)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return Tensor._from_op(out_data, (a,), back)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def back(g):
        _accumulate(a, g / a.data)

    return Tensor._from_op(out_data, (a,), back)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along ``axis``, stabilized by max subtraction."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(total), axis=axis)
    softmax = shifted / total

    def back(g):
        _accumulate(a, np.expand_dims(g, axis) * softmax)

    return Tensor._from_op(out_data, (a,), back)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def back(g):
        _accumulate(a, g * (a.data > 0))

    return Tensor._from_op(out_data, (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    out_data = np.where(a.data >= 0, a.data, a.data * slope)

    def back(g):
        _accumulate(a, g * np.where(a.data >= 0, 1.0, slope).astype(g.dtype))

    return Tensor._from_op(out_data, (a,), back)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # piecewise-stable form; clamp keeps the open interval (0,1) even where
    # exp underflows for extreme finite inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    tiny = np.finfo(x.dtype).tiny
    upper = np.nextafter(x.dtype.type(1.0), x.dtype.type(0.0))
    return np.clip(out, tiny, upper)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_data(a.data)

    def back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), back)


# ---------------------------------------------------------------------------
# structured operations


def _window_view(x: np.ndarray, window: int, stride: int, dilation: int = 1) -> np.ndarray:
    """Read-only view (..., C, window, Lout) of sliding windows over the last axis."""
    length = x.shape[-1]
    eff = (window - 1) * dilation + 1
    lout = (length - eff) // stride + 1
    shape = x.shape[:-1] + (window, lout)
    strides = x.strides[:-1] + (x.strides[-1] * dilation, x.strides[-1] * stride)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides, writeable=False)


def conv1d_valid(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
                 stride: int = 1, dilation: int = 1, layer: str = "conv1d") -> Tensor:
    """Valid (no padding) 1-d convolution.

    ``x`` is (Cin, L) or (B, Cin, L); ``kernels`` is (Cout, Cin, K). Output
    length is floor((L - (K-1)*dilation - 1) / stride) + 1. Implemented as a
    strided im2col view followed by one matmul per batch entry; the column
    matrix is kept for the backward pass.
    """
    if stride < 1 or dilation < 1:
        raise ValueError(f"{layer}: stride and dilation must be >= 1")
    if kernels.ndim != 3:
        raise ShapeError(f"{layer}: kernels must be (Cout, Cin, K), got {kernels.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"{layer}: input must be (Cin, L) or (B, Cin, L), got {x.shape}")
    batch, cin, length = xd.shape
    cout, kcin, ksize = kernels.shape
    if kcin != cin:
        raise ShapeError(f"{layer}: input has {cin} channels, kernels expect {kcin}")
    eff = (ksize - 1) * dilation + 1
    if length < eff:
        raise InputTooShortError(
            f"{layer}: input length {length} is shorter than the effective kernel {eff}")
    lout = (length - eff) // stride + 1
    cols = _window_view(xd, ksize, stride, dilation)          # (B, Cin, K, Lout)
    colm = cols.reshape(batch, cin * ksize, lout)             # materializes the copy
    wmat = kernels.data.reshape(cout, cin * ksize)
    out_data = np.matmul(wmat, colm)                          # (B, Cout, Lout)
    if bias is not None:
        out_data += bias.data[:, None]

    def back(g):
        if g.ndim == 2:
            g = g[None]
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)))
        if kernels.requires_grad:
            gw = np.einsum("bot,bpt->op", g, colm, optimize=True)
            _accumulate(kernels, gw.reshape(cout, cin, ksize))
        if x.requires_grad:
            gcol = np.matmul(wmat.T, g).reshape(batch, cin, ksize, lout)
            gx = np.zeros_like(xd)
            for k in range(ksize):
                start = k * dilation
                gx[:, :, start:start + stride * lout:stride] += gcol[:, :, k, :]
            _accumulate(x, gx[0] if squeeze else gx)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._from_op(out_data[0] if squeeze else out_data, parents, back)


def maxpool1d(x: Tensor, window: int, stride: int, layer: str = "maxpool1d") -> Tensor:
    """Per-channel windowed maximum; gradient routes to the first argmax."""
    if window < 1 or stride < 1:
        raise ValueError(f"{layer}: window and stride must be >= 1")
    length = x.shape[-1]
    if length < window:
        raise InputTooShortError(
            f"{layer}: input length {length} is shorter than the window {window}")
    cols = _window_view(x.data, window, stride)               # (..., window, Lout)
    out_data = cols.max(axis=-2)
    argmax = cols.argmax(axis=-2)                             # first occurrence on ties
    lout = out_data.shape[-1]

    def back(g):
        gx = np.zeros_like(x.data)
        positions = argmax + np.arange(lout) * stride         # input index per output
        lead = np.indices(out_data.shape[:-1])
        index = tuple(d[..., None] for d in lead) + (positions,)
        np.add.at(gx, index, g)
        _accumulate(x, gx)

    return Tensor._from_op(out_data, (x,), back)


def avgpool_time(x: Tensor) -> Tensor:
    """Mean over all frames: (..., F, T) -> (..., F, 1)."""
    if x.shape[-1] < 1:
        raise ShapeError("avgpool_time over an empty time axis")
    frames = x.shape[-1]
    out_data = x.data.mean(axis=-1, keepdims=True)

    def back(g):
        _accumulate(x, np.broadcast_to(g / frames, x.shape))

    return Tensor._from_op(out_data, (x,), back)


def layer_norm_channels(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each frame (column) over the channel axis, then affine.

    ``x`` is (..., F, T); ``gain`` and ``bias`` are (F,). Mean and variance
    are taken across F independently per frame; ``eps`` sits inside the
    square root so zero-variance frames collapse to the bias.
    """
    channels = x.shape[-2]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({channels},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-2, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data[:, None] + bias.data[:, None]

    def back(g):
        reduce_axes = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=reduce_axes))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=reduce_axes))
        if x.requires_grad:
            gxhat = g * gain.data[:, None]
            mean_g = gxhat.mean(axis=-2, keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=-2, keepdims=True)
            _accumulate(x, inv * (gxhat - mean_g - xhat * mean_gx))

    return Tensor._from_op(out_data, (x, gain, bias), back)


def linear_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a vector, or row-wise for a (B, Din) batch."""
    dout, din = weight.shape
    if bias.shape != (dout,):
        raise ShapeError(f"bias must be ({dout},), got {bias.shape}")
    if x.ndim == 1:
        if x.shape[0] != din:
            raise ShapeError(f"input has {x.shape[0]} features, weight expects {din}")
        out_data = weight.data @ x.data + bias.data

        def back(g):
            if weight.requires_grad:
                _accumulate(weight, np.outer(g, x.data))
            if bias.requires_grad:
                _accumulate(bias, g.copy())
            if x.requires_grad:
                _accumulate(x, weight.data.T @ g)

    elif x.ndim == 2:
        if x.shape[1] != din:
            raise ShapeError(f"input has {x.shape[1]} features, weight expects {din}")
        out_data = x.data @ weight.data.T + bias.data

        def back(g):
            if weight.requires_grad:
                _accumulate(weight, g.T @ x.data)
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=0))
            if x.requires_grad:
                _accumulate(x, g @ weight.data)

    else:
        raise ShapeError(f"linear_affine expects a vector or (B, Din) batch, got {x.shape}")
    return Tensor._from_op(out_data, (x, weight, bias), back)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: scales survivors at train time, identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires an explicit rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(keep)
    out_data = x.data * mask

    def back(g):
        _accumulate(x, g * mask)

    return Tensor._from_op(out_data, (x,), back)


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(params: Iterable[Tensor], velocities: Iterable[np.ndarray],
                      lr: float, momentum: float) -> None:
    """In-place heavy-ball update: v <- momentum*v + grad; p <- p - lr*v.

    Parameters with no accumulated gradient are left untouched. Velocity
    buffers must match parameter shapes.
    """
    for p, v in zip(params, velocities):
        if p.grad is None:
            continue
        if v.shape != p.data.shape:
            raise ShapeError(f"velocity shape {v.shape} does not match parameter {p.data.shape}")
        v *= momentum
        v += p.grad.astype(v.dtype, copy=False)
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
