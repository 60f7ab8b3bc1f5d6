"""Differentiable primitives over :class:`~algnet.tensor.Tensor`.

All image-shaped data is NCHW, row-major.  Each primitive computes its
forward value with numpy and registers a closure returning the gradient for
every input (``None`` where an input is non-differentiable).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from algnet.tensor import Tensor, make_result

LN_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return make_result("div", out, (a, b), grad_fn)


def neg(x: Tensor) -> Tensor:
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    return make_result("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def grad_fn(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return make_result("silu", x.data * s, (x,), grad_fn)


def softplus(x: Tensor) -> Tensor:
    # logaddexp(0, v) = v + log1p(exp(-v)) for large v, no overflow
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return make_result("softplus", out, (x,), lambda g: (g * _sigmoid(x.data),))


_UNARY = {"silu": silu, "relu": relu, "softplus": softplus, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, x, y=None) -> Tensor:
    """Dispatch by name: add, mul, silu, relu, softplus, sigmoid."""
    if kind in _BINARY:
        if y is None:
            raise ValueError(f"elementwise {kind!r} needs two operands")
        return _BINARY[kind](x, y)
    if kind in _UNARY:
        return _UNARY[kind](_lift(x))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean over empty axes {axes} of shape {x.shape}")
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_result("mean", np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result("permute", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_result("getitem", out, (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result("concat", out, tensors, grad_fn)


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_result("take", out, (x,), grad_fn)


def pad2d(x: Tensor, pad: int | tuple[int, int, int, int], mode: str = "zeros") -> Tensor:
    """Pad the last two axes; ``pad`` is ``p`` or ``(top, bottom, left, right)``."""
    top, bottom, left, right = (pad,) * 4 if isinstance(pad, int) else pad
    if min(top, bottom, left, right) < 0:
        raise ShapeError(f"pad2d: negative padding {pad}")
    H, W = x.shape[-2:]
    if mode == "reflect":
        if max(top, bottom) >= H or max(left, right) >= W:
            raise ShapeError(f"pad2d: reflect padding {pad} too large for {H}x{W}")
        rows = np.pad(np.arange(H), (top, bottom), mode="reflect")
        cols = np.pad(np.arange(W), (left, right), mode="reflect")
        return take(take(x, rows, axis=-2), cols, axis=-1)
    if mode != "zeros":
        raise ValueError(f"pad2d: unknown mode {mode!r}")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, widths)

    def grad_fn(g):
        return (np.ascontiguousarray(g[..., top:top + H, left:left + W]),)

    return make_result("pad2d", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIkk ``w`` (zero padding)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if kh < 1 or kw < 1:
        raise ShapeError(f"conv2d: non-positive kernel size {kh}x{kw}")
    if Ci != C:
        raise ShapeError(f"conv2d: weight {w.shape} expects {Ci} input channels, input {x.shape} has {C}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo].transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_result("conv2d", out, inputs, grad_fn)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel k x k filtering; ``w`` has shape (C, 1, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: expected NCHW input and (C,1,k,k) weight, got {x.shape}, {w.shape}")
    N, C, H, W = x.shape
    if w.shape[0] != C:
        raise ShapeError(f"depthwise_conv2d: {w.shape[0]} kernels for {C} channels")
    kh, kw = w.shape[2:]
    if kh < 1 or kw < 1:
        raise ShapeError(f"depthwise_conv2d: non-positive kernel size {kh}x{kw}")
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    k = w.data[:, 0]
    out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + Ho, j:j + Wo] * k[:, i, j][None, :, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def grad_fn(g):
        gk = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + Ho, j:j + Wo])
                gxp[:, :, i:i + Ho, j:j + Wo] += g * k[:, i, j][None, :, None, None]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gk, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_result("depthwise_conv2d", out, inputs, grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: ``x @ w.T + b`` with ``w`` of shape (D_out, D_in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input last axis {x.shape[-1:]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[1])
    out = x2 @ w.data.T
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[0],))

    def grad_fn(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_result("linear", out, inputs, grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int | None = None) -> Tensor:
    """Normalize over one axis (channel axis for 4-D input, last axis otherwise)."""
    if axis is None:
        axis = 1 if x.ndim == 4 else -1
    axis = axis % x.ndim
    D = x.shape[axis]
    if D == 0:
        raise ShapeError("layer_norm: zero-length normalized axis")
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} != ({D},)")
    bshape = [1] * x.ndim
    bshape[axis] = D
    gam = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = xhat * gam + beta.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def grad_fn(g):
        gxhat = g * gam
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return make_result("layer_norm", out.astype(x.dtype), (x, gamma, beta), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW, got {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("global_avg_pool: empty spatial extent")
    return mean(x, axis=(2, 3), keepdims=True)


def fft2d(x: Tensor) -> Tensor:
    """Unnormalized 2-D DFT over the last two axes.

    Returns a real tensor of shape ``x.shape + (2,)`` holding (real, imag).
    """
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"fft2d: need non-empty spatial axes, got {x.shape}")
    H, W = x.shape[-2:]
    spec = np.fft.fft2(x.data, axes=(-2, -1))
    out = np.stack([spec.real, spec.imag], axis=-1).astype(x.dtype)

    def grad_fn(g):
        # adjoint of the DFT applied to a real input
        gc = g[..., 0] + 1j * g[..., 1]
        return ((np.fft.ifft2(gc, axes=(-2, -1)).real * (H * W)).astype(x.dtype),)

    return make_result("fft2d", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def flatten_hw(x: Tensor) -> Tensor:
    """NCHW -> N,(H*W),C in raster order (row by row, left to right)."""
    if x.ndim != 4:
        raise ShapeError(f"flatten_hw: expected NCHW, got {x.shape}")
    N, C, H, W = x.shape
    return permute(reshape(x, (N, C, H * W)), (0, 2, 1))


def unflatten_hw(x: Tensor, height: int, width: int) -> Tensor:
    if x.ndim != 3 or x.shape[1] != height * width:
        raise ShapeError(f"unflatten_hw: {x.shape} does not hold a {height}x{width} raster")
    N, _, C = x.shape
    return reshape(permute(x, (0, 2, 1)), (N, C, height, width))


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    if not 0 <= at <= x.shape[1]:
        raise ShapeError(f"split_channels: split point {at} outside 0..{x.shape[1]}")
    return getitem(x, (slice(None), slice(0, at))), getitem(x, (slice(None), slice(at, None)))


def concat_channels(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=1)


def reshape_ops(kind: str, x: Tensor, *args):
    """Name-dispatched view of the reshape family."""
    table = {
        "flatten_hw": flatten_hw,
        "unflatten_hw": unflatten_hw,
        "split_channels": split_channels,
        "permute": permute,
    }
    if kind == "concat_channels":
        return concat_channels(x, *args)
    if kind not in table:
        raise ValueError(f"unknown reshape kind {kind!r}")
    return table[kind](x, *args)


def pixel_shuffle(x: Tensor, factor: int = 2) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r), channel index c*r*r + i*r + j -> offset (i, j)."""
    N, Cr, H, W = x.shape
    r = factor
    if Cr % (r * r):
        raise ShapeError(f"pixel_shuffle: {Cr} channels not divisible by {r * r}")
    C = Cr // (r * r)
    y = reshape(x, (N, C, r, r, H, W))
    y = permute(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (N, C, H * r, W * r))


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping box average over ``factor x factor`` blocks."""
    N, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {factor}")
    y = reshape(x, (N, C, H // factor, factor, W // factor, factor))
    return mean(y, axis=(3, 5))
