"""Reverse-mode autodiff over dense NCHW numpy arrays.

Every operation records a graph edge whose vector-Jacobian product is
expressed through the same public primitives, so the output of
``backward(..., create_graph=True)`` is itself a differentiable tensor.
That is what makes gradient-norm penalties (which need d/dtheta of a
gradient) work without any special casing.

Precision is fixed per tensor at construction (float32 for training,
float64 for numerical test oracles); mixing the two in one expression is
rejected rather than silently promoted.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_const",
    "sqrt",
    "tensor_sum",
    "mean",
    "absolute",
    "reshape",
    "broadcast_to",
    "concat",
    "narrow",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "apply_activation",
    "dropout",
    "lerp",
    "conv2d",
    "conv_transpose2d",
    "batch_norm",
    "RunningStats",
    "backward",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suppresses graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _grad_mode:
    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = self._enabled
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense array plus an optional edge into the computation graph."""

    __slots__ = ("data", "requires_grad", "_op", "_parents", "_vjp")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype not in _FLOAT_DTYPES:
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self._op: Optional[str] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array (do not mutate)."""
        return self.data

    def detach(self) -> "Tensor":
        """Same data, cut loose from the graph."""
        return Tensor(self.data, requires_grad=False)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if flag and self._vjp is not None:
            raise ShapeError("requires_grad_ is only valid on leaf tensors")
        self.requires_grad = flag
        return self

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad}{op})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)


def tensor(data, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Leaf tensor from array-like data."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise ShapeError(
                f"mixed precision: {x.dtype} with {like.dtype}; cast explicitly"
            )
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _first_tensor(*xs) -> Tensor:
    for x in xs:
        if isinstance(x, Tensor):
            return x
    raise TypeError("at least one operand must be a Tensor")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    record = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=record)
    if record:
        out._op = op
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = tensor_sum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (have, want) in enumerate(zip(g.shape, shape)) if want == 1 and have != 1
    )
    if axes:
        g = tensor_sum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Tensor:
    ref = _first_tensor(a, b)
    a, b = _coerce(a, ref), _coerce(b, ref)
    out = a.data + b.data

    def vjp(g):
        ga = _sum_to(g, a.shape) if a.requires_grad else None
        gb = _sum_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    ref = _first_tensor(a, b)
    a, b = _coerce(a, ref), _coerce(b, ref)
    out = a.data - b.data

    def vjp(g):
        ga = _sum_to(g, a.shape) if a.requires_grad else None
        gb = _sum_to(neg(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    ref = _first_tensor(a, b)
    a, b = _coerce(a, ref), _coerce(b, ref)
    out = a.data * b.data

    def vjp(g):
        ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    ref = _first_tensor(a, b)
    a, b = _coerce(a, ref), _coerce(b, ref)
    out = a.data / b.data

    def vjp(g):
        ga = _sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = (
            _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _make("div", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (neg(g),)

    return _make("neg", -a.data, (a,), vjp)


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def vjp(g):
        return (mul(g, mul(pow_const(a, p - 1.0), p)),)

    return _make("pow", out, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    return pow_const(a, 0.5)


def absolute(a: Tensor) -> Tensor:
    sign = Tensor(np.sign(a.data))

    def vjp(g):
        return (mul(g, sign),)

    return _make("abs", np.abs(a.data), (a,), vjp)


# ---------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axis_t = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axis_t = (axis % a.ndim,)
    else:
        axis_t = tuple(ax % a.ndim for ax in axis)
    out = a.data.sum(axis=axis_t, keepdims=keepdims)
    kept_shape = tuple(
        1 if i in axis_t else n for i, n in enumerate(a.shape)
    )

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept_shape)
        return (broadcast_to(g, a.shape),)

    return _make("sum", out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = 1
        for ax in axis:
            count *= a.shape[ax]
    return div(tensor_sum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g):
        return (reshape(g, a.shape),)

    return _make("reshape", a.data.reshape(shape), (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def vjp(g):
        return (_sum_to(g, a.shape),)

    return _make("broadcast", out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    axis = axis % parts[0].ndim
    for p in parts[1:]:
        if p.dtype != parts[0].dtype:
            raise ShapeError("concat: mixed dtypes")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def vjp(g):
        grads = []
        start = 0
        for p, n in zip(parts, sizes):
            grads.append(narrow(g, axis, start, n) if p.requires_grad else None)
            start += n
        return tuple(grads)

    return _make("concat", out, tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.ndim
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.ndim)
    )
    before, after = start, a.shape[axis] - start - length

    def vjp(g):
        return (_pad_axis(g, axis, before, after),)

    return _make("narrow", np.ascontiguousarray(a.data[idx]), (a,), vjp)


def _pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    pad = [(0, 0)] * a.ndim
    pad[axis] = (before, after)
    out = np.pad(a.data, pad)
    length = a.shape[axis]

    def vjp(g):
        return (narrow(g, axis, before, length),)

    return _make("pad_axis", out, (a,), vjp)


# ---------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(a.dtype))

    def vjp(g):
        return (mul(g, mask),)

    return _make("relu", np.maximum(a.data, 0), (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = Tensor(np.where(a.data > 0, 1.0, slope).astype(a.dtype))

    def vjp(g):
        return (mul(g, mask),)

    return _make("leaky_relu", np.where(a.data > 0, a.data, a.data * slope), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _make("tanh", y, (a,), None)

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _make("sigmoid", y, (a,), None)

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def apply_activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    """Dispatch by name: relu | leaky_relu | tanh | sigmoid."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ShapeError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    rescales survivors; eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ShapeError(f"dropout mode must be train|eval, got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ShapeError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    mask = Tensor(keep / (1.0 - rate))
    return mul(x, mask)


def lerp(a: Tensor, b: Tensor, eps) -> Tensor:
    """eps * a + (1 - eps) * b; eps may be a scalar or a broadcastable tensor."""
    if a.shape != b.shape:
        raise ShapeError(f"lerp: shape mismatch {a.shape} vs {b.shape}")
    return add(mul(a, eps), mul(b, sub(1.0, _coerce(eps, a))))


# ---------------------------------------------------------------------
# convolution family
#
# Three mutually adjoint bilinear primitives close the system: conv2d,
# conv_transpose2d and the kernel-gradient correlation. Each one's VJP is
# written with the other two, which is what lets backward() differentiate
# its own output.
# ---------------------------------------------------------------------

def _check4d(name: str, t: Tensor):
    if t.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-d NCHW tensor, got shape {t.shape}")


def _conv_out(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:-pad, pad:-pad] = x
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Contiguous [N*Ho*Wo, C*kh*kw] window matrix of a padded NCHW array."""
    n, c = x.shape[:2]
    xp = _pad_hw(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv2d_raw(x: np.ndarray, k: np.ndarray, stride: int, pad: int, cols: np.ndarray = None):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho = _conv_out(h, kh, stride, pad)
    wo = _conv_out(w, kw, stride, pad)
    if cols is None:
        cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    out = cols @ k.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)), cols


def _deconv_raw(
    x: np.ndarray, k: np.ndarray, stride: int, pad: int, eh: int, ew: int
) -> np.ndarray:
    """Transposed conv as col2im: one GEMM, then one strided add per tap."""
    n, c, h, w = x.shape
    _, f, kh, kw = k.shape
    hf = (h - 1) * stride + kh + eh
    wf = (w - 1) * stride + kw + ew
    prod = x.transpose(0, 2, 3, 1).reshape(n * h * w, c) @ k.reshape(c, f * kh * kw)
    prod = prod.reshape(n, h, w, f, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    full = np.zeros((n, f, hf, wf), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + h * stride : stride, j : j + w * stride : stride] += prod[
                :, :, :, :, i, j
            ]
    if pad:
        full = np.ascontiguousarray(full[:, :, pad : hf - pad, pad : wf - pad])
    return full


def _kgrad_raw(
    x: np.ndarray, g: np.ndarray, stride: int, pad: int, kh: int, kw: int,
    cols: np.ndarray = None,
) -> np.ndarray:
    n, c, h, w = x.shape
    _, f, ho, wo = g.shape
    if cols is None:
        cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    return np.ascontiguousarray((gm.T @ cols).reshape(f, c, kh, kw))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkk kernel."""
    _check4d("conv2d input", x)
    _check4d("conv2d kernel", kernel)
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(
            f"conv2d: input channels {c} != kernel channels {ck} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}"
        )
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv2d: mixed precision {x.dtype} vs {kernel.dtype}")
    out, cols = _conv2d_raw(x.data, kernel.data, stride, pad)
    if not (_grad_enabled and kernel.requires_grad):
        cols = None  # retain the window matrix only if the kernel grad will need it
    extra = ((h + 2 * pad - kh) % stride, (w + 2 * pad - kw) % stride)

    def vjp(g):
        gx = (
            conv_transpose2d(g, kernel, stride, pad, _extra=extra)
            if x.requires_grad
            else None
        )
        gk = (
            _conv2d_kgrad(x, g, stride, pad, (kh, kw), _cols=cols)
            if kernel.requires_grad
            else None
        )
        return gx, gk

    return _make("conv2d", out, (x, kernel), vjp)


def conv_transpose2d(
    x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, _extra=(0, 0)
) -> Tensor:
    """Adjoint of conv2d: NCHW input, CFkk kernel, output [N,F,H',W'] with
    H' = (H-1)*stride - 2*pad + kh."""
    _check4d("conv_transpose2d input", x)
    _check4d("conv_transpose2d kernel", kernel)
    if stride < 1 or pad < 0:
        raise ShapeError(
            f"conv_transpose2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}"
        )
    n, c, h, w = x.shape
    ck, f, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(
            f"conv_transpose2d: input channels {c} != kernel channels {ck} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    eh, ew = _extra
    if not (0 <= eh < stride and 0 <= ew < stride):
        raise ShapeError(f"conv_transpose2d: output padding {_extra} must be < stride")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv_transpose2d: mixed precision {x.dtype} vs {kernel.dtype}")

    if (h - 1) * stride - 2 * pad + kh + eh < 1 or (w - 1) * stride - 2 * pad + kw + ew < 1:
        raise ShapeError(
            f"conv_transpose2d: output would be empty for input {x.shape}, "
            f"kernel {kernel.shape}, stride {stride}, pad {pad}"
        )
    out = _deconv_raw(x.data, kernel.data, stride, pad, eh, ew)

    def vjp(g):
        gx = conv2d(g, kernel, stride, pad) if x.requires_grad else None
        gk = (
            _conv2d_kgrad(g, x, stride, pad, (kh, kw)) if kernel.requires_grad else None
        )
        return gx, gk

    return _make("conv_transpose2d", out, (x, kernel), vjp)


def _conv2d_kgrad(x: Tensor, g: Tensor, stride: int, pad: int, ksize, _cols=None) -> Tensor:
    """Kernel-gradient correlation: contracts batch and output positions of
    ``g`` against stride-aligned windows of ``x``; output [F,C,kh,kw]."""
    kh, kw = ksize
    out = _kgrad_raw(x.data, g.data, stride, pad, kh, kw, cols=_cols)

    def vjp(u):
        gx = None
        if x.requires_grad:
            h, w = x.shape[2], x.shape[3]
            ho, wo = g.shape[2], g.shape[3]
            extra = (
                h + 2 * pad - ((ho - 1) * stride + kh),
                w + 2 * pad - ((wo - 1) * stride + kw),
            )
            gx = conv_transpose2d(g, u, stride, pad, _extra=extra)
        gg = conv2d(x, u, stride, pad) if g.requires_grad else None
        return gx, gg

    return _make("conv2d_kgrad", out, (x, g), vjp)


# ---------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------

BN_MOMENTUM = 0.1


class RunningStats:
    """Per-channel running mean/variance for batch norm's eval mode."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray):
        m = BN_MOMENTUM
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(self.var.dtype)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    running_stats: Optional[RunningStats] = None,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    Train mode normalizes by batch statistics (differentiable through
    them, since the whole thing is composed from primitive ops) and
    updates ``running_stats``; eval mode normalizes by the running
    statistics as constants.
    """
    _check4d("batch_norm input", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}"
        )
    if mode not in ("train", "eval"):
        raise ShapeError(f"batch_norm mode must be train|eval, got {mode!r}")
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise ShapeError(
                f"batch_norm: train mode needs N*H*W >= 2 per channel, got {count}"
            )
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        xc = sub(x, mu)
        var = mean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        xhat = div(xc, sqrt(add(var, float(eps))))
        if running_stats is not None:
            bm = mu.data.reshape(c)
            bv = var.data.reshape(c) * (count / (count - 1))
            running_stats.update(bm, bv)
    else:
        if running_stats is None:
            raise ShapeError("batch_norm: eval mode needs running_stats")
        rm = Tensor(running_stats.mean.astype(x.dtype).reshape(1, c, 1, 1))
        rv = Tensor(running_stats.var.astype(x.dtype).reshape(1, c, 1, 1))
        xhat = div(sub(x, rm), Tensor(np.sqrt(rv.data + eps)))
    return add(mul(g4, xhat), b4)


# ---------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------

def _topo_from(root: Tensor) -> list:
    """Iterative post-order over the grad-requiring subgraph."""
    topo: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return topo


def backward(loss: Tensor, wrt, create_graph: bool = False):
    """Gradient of a scalar ``loss`` with respect to ``wrt``.

    ``wrt`` may be a Tensor, a sequence of Tensors (returns a list in the
    same order), or any object with a ``tensors()`` method returning a
    name->Tensor mapping (returns a name->gradient dict). Unreachable
    entries get zero gradients. With ``create_graph=True`` the returned
    gradients are themselves differentiable.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    names = None
    if isinstance(wrt, Tensor):
        targets = [wrt]
        single = True
    elif hasattr(wrt, "tensors"):
        mapping = wrt.tensors()
        names = list(mapping.keys())
        targets = list(mapping.values())
        single = False
    else:
        targets = list(wrt)
        single = False

    grads: dict = {}
    if loss.requires_grad:
        topo = _topo_from(loss)
        with _grad_mode(create_graph):
            grads[id(loss)] = Tensor(np.ones_like(loss.data))
            for node in reversed(topo):
                g = grads.get(id(node))
                if g is None or node._vjp is None:
                    continue
                contribs = node._vjp(g)
                for p, contrib in zip(node._parents, contribs):
                    if contrib is None or not p.requires_grad:
                        continue
                    if contrib.shape != p.shape:
                        raise ShapeError(
                            f"vjp of {node._op} produced shape {contrib.shape} "
                            f"for parent of shape {p.shape}"
                        )
                    prev = grads.get(id(p))
                    grads[id(p)] = contrib if prev is None else add(prev, contrib)

    results = [
        grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in targets
    ]
    if single:
        return results[0]
    if names is not None:
        return dict(zip(names, results))
    return results
