"""Diagonal state-space layers: discretization, scans and the selective SSM.

Conventions
-----------
Selective mode works on lanes laid out as ``(batch, length, channels, state)``:

* ``a_bar``, ``bx_bar``: ``(B, L, D, N)`` per-token multiplier and drive,
* ``C``: ``(B, L, N)`` per-token readout shared across channels,
* ``x``: ``(B, L, D)`` input, ``D_skip``: ``(D,)`` feedthrough.

The recurrence is ``h_t = a_bar_t * h_{t-1} + bx_bar_t`` with ``h_0 = 0`` and
``y_t = <C_t, h_t> + D_skip * x_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from algnet import ops
from algnet.module import Module, Parameter, uniform_param
from algnet.tensor import Tensor, get_default_dtype, make_result

SERIES_THRESHOLD = 1e-6


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def zoh_coefficient(z):
    """``expm1(z) / z`` with its removable singularity at 0 filled in."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    exact = np.expm1(safe) / safe
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, exact)


def discretize(a, b, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal SSM.

    ``a_bar = exp(delta * a)`` and ``b_bar = (exp(delta * a) - 1) / a * b``,
    evaluated as ``delta * expm1(z) / z * b`` with ``z = delta * a`` so that
    ``a -> 0`` is a smooth limit rather than a division by zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretize: delta must be strictly positive")
    z = delta * a
    return np.exp(z), delta * zoh_coefficient(z) * b


@dataclass
class DiscreteStep:
    a_bar: np.ndarray
    bx_bar: np.ndarray

    def __post_init__(self):
        if self.a_bar.shape != self.bx_bar.shape:
            raise ValueError(f"DiscreteStep: {self.a_bar.shape} vs {self.bx_bar.shape}")

    @property
    def length(self) -> int:
        return self.a_bar.shape[1]


def combine(first: tuple, second: tuple) -> tuple:
    """Associative composition: apply ``first`` then ``second``."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


# ---------------------------------------------------------------------------
# scan kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _recurrence_kernel(a, b, h):
    P, L, M = a.shape
    for p in range(P):
        for m in range(M):
            acc = 0.0
            for t in range(L):
                acc = a[p, t, m] * acc + b[p, t, m]
                h[p, t, m] = acc


def _to_lanes(arr: np.ndarray, axis: int) -> tuple[np.ndarray, tuple]:
    moved = np.moveaxis(arr, axis, 1) if arr.ndim > 1 else arr[None]
    shape = moved.shape
    return np.ascontiguousarray(moved.reshape(shape[0], shape[1], -1)), shape


def linear_scan(a: np.ndarray, b: np.ndarray, axis: int = 1, mode: str = "sequential",
                chunk: int | None = None) -> np.ndarray:
    """All prefix states of ``h_t = a_t h_{t-1} + b_t`` (``h_0 = 0``) along ``axis``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"linear_scan: a {a.shape} and b {b.shape} differ")
    if a.ndim == 0:
        raise ValueError("linear_scan: needs a time axis")
    axis = axis % a.ndim if a.ndim > 1 else 0
    if a.shape[axis] == 0:
        return np.zeros_like(b)
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    a3, shape = _to_lanes(a.astype(dtype, copy=False), axis)
    b3, _ = _to_lanes(b.astype(dtype, copy=False), axis)
    if mode == "sequential":
        h3 = np.empty_like(b3)
        _recurrence_kernel(a3, b3, h3)
    elif mode == "parallel":
        h3 = _blelloch_lanes(a3, b3, chunk)
    else:
        raise ValueError(f"linear_scan: unknown mode {mode!r}")
    h = h3.reshape(shape)
    return np.moveaxis(h, 1, axis) if a.ndim > 1 else h[0]


def _blelloch_exclusive(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Work-efficient exclusive scan along axis -2 (length a power of two), in place."""
    n = A.shape[-2]
    levels = n.bit_length() - 1
    # up-sweep: each right node absorbs its left sibling's subtree
    for d in range(levels):
        step = 2 << d
        left = slice((1 << d) - 1, n, step)
        right = slice(step - 1, n, step)
        Al, Bl = A[..., left, :], B[..., left, :]
        Ar, Br = A[..., right, :], B[..., right, :]
        B[..., right, :] = Ar * Bl + Br
        A[..., right, :] = Ar * Al
    A[..., n - 1, :] = 1.0
    B[..., n - 1, :] = 0.0
    # down-sweep: left child takes the parent prefix, right child parent∘left-subtree
    for d in reversed(range(levels)):
        step = 2 << d
        left = slice((1 << d) - 1, n, step)
        right = slice(step - 1, n, step)
        Al, Bl = A[..., left, :].copy(), B[..., left, :].copy()
        Ap, Bp = A[..., right, :].copy(), B[..., right, :].copy()
        A[..., left, :], B[..., left, :] = Ap, Bp
        A[..., right, :] = Al * Ap
        B[..., right, :] = Al * Bp + Bl
    return A, B


def _blelloch_lanes(a3: np.ndarray, b3: np.ndarray, chunk: int | None) -> np.ndarray:
    P, L, M = a3.shape
    size = L if chunk is None else max(1, min(int(chunk), L))
    n_chunks = -(-L // size)
    width = 1 << (size - 1).bit_length()
    A = np.ones((P, n_chunks, width, M), dtype=a3.dtype)
    B = np.zeros((P, n_chunks, width, M), dtype=b3.dtype)
    pad = n_chunks * size - L
    a_pad = np.concatenate([a3, np.ones((P, pad, M), a3.dtype)], axis=1) if pad else a3
    b_pad = np.concatenate([b3, np.zeros((P, pad, M), b3.dtype)], axis=1) if pad else b3
    A[:, :, :size] = a_pad.reshape(P, n_chunks, size, M)
    B[:, :, :size] = b_pad.reshape(P, n_chunks, size, M)
    _, excl_b = _blelloch_exclusive(A.copy(), B.copy())
    local_h = A * excl_b + B  # inclusive prefix applied to a zero state
    h = local_h[:, :, :size]
    if n_chunks > 1:
        # carry the state across chunk boundaries; prefix products restart per chunk
        a_chunks = a_pad.reshape(P, n_chunks, size, M)
        decay = np.cumprod(a_chunks, axis=2)
        carry = np.zeros((P, M), dtype=b3.dtype)
        for c in range(n_chunks):
            h[:, c] = h[:, c] + decay[:, c] * carry[:, None, :]
            carry = h[:, c, -1]
    return np.ascontiguousarray(h.reshape(P, n_chunks * size, M)[:, :L])


def sequential_scan(step: DiscreteStep, C: np.ndarray, D_skip=0.0, x: np.ndarray | None = None) -> np.ndarray:
    """Exact left-to-right recurrence with per-token readout ``y_t = <C_t, h_t> + D x_t``."""
    _check_lanes(step, C, x)
    h = linear_scan(step.a_bar, step.bx_bar, axis=1, mode="sequential")
    return _readout(h, C, D_skip, x)


def parallel_scan(step: DiscreteStep, chunk: int | None = None) -> np.ndarray:
    """All hidden states via the up-sweep/down-sweep associative scan."""
    if step.length == 0:
        return np.zeros_like(step.bx_bar)
    return linear_scan(step.a_bar, step.bx_bar, axis=1, mode="parallel", chunk=chunk)


def parallel_scan_output(step: DiscreteStep, C: np.ndarray, D_skip=0.0, x=None, chunk=None) -> np.ndarray:
    _check_lanes(step, C, x)
    return _readout(parallel_scan(step, chunk), C, D_skip, x)


def _check_lanes(step: DiscreteStep, C: np.ndarray, x) -> None:
    Bt, L, D, N = step.a_bar.shape
    if C.shape != (Bt, L, N):
        raise ValueError(f"scan: C shape {C.shape} != {(Bt, L, N)}")
    if x is not None and np.shape(x) != (Bt, L, D):
        raise ValueError(f"scan: x shape {np.shape(x)} != {(Bt, L, D)}")


def _readout(h: np.ndarray, C: np.ndarray, D_skip, x) -> np.ndarray:
    y = np.einsum("bldn,bln->bld", h, C)
    if x is not None:
        y = y + np.asarray(D_skip) * x
    return y


# ---------------------------------------------------------------------------
# time-invariant convolution form
# ---------------------------------------------------------------------------

def ssm_conv_kernel(a_bar: np.ndarray, b_bar: np.ndarray, C: np.ndarray, length: int) -> np.ndarray:
    """Materialize ``K[j] = sum_n C[n] a_bar[n]**j b_bar[n]`` for ``j < length``.

    Accepts per-channel parameters of shape ``(..., N)``; token-varying inputs
    (an extra time axis of size > 1 relative to ``C``) are rejected because the
    selective SSM has no convolution form.
    """
    a_bar, b_bar, C = (np.asarray(v, dtype=np.float64) for v in (a_bar, b_bar, C))
    if a_bar.shape != b_bar.shape or a_bar.shape[-1] != C.shape[-1]:
        raise ValueError(
            f"ssm_conv_kernel: needs time-invariant (..., N) parameters, got "
            f"{a_bar.shape}, {b_bar.shape}, {C.shape}"
        )
    if C.ndim > a_bar.ndim:
        raise ValueError("ssm_conv_kernel: token-varying readout has no convolution form")
    if length < 1:
        raise ValueError("ssm_conv_kernel: length must be >= 1")
    powers = a_bar[..., None, :] ** np.arange(length)[:, None]
    return np.sum(C[..., None, :] * powers * b_bar[..., None, :], axis=-1)


def causal_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``y_t = sum_{j<=t} K[j] x_{t-j}`` along the last axis, FFT-based."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    L = x.shape[-1]
    n = 1 << (2 * L - 1).bit_length()
    y = np.fft.irfft(np.fft.rfft(x, n) * np.fft.rfft(kernel[..., :L], n), n)
    return y[..., :L]


def timeinvariant_step(a_bar: np.ndarray, b_bar: np.ndarray, x: np.ndarray) -> DiscreteStep:
    """Broadcast per-channel (D, N) parameters over an input of shape (B, L, D)."""
    Bt, L, D = x.shape
    a = np.broadcast_to(a_bar, (Bt, L) + a_bar.shape)
    bx = b_bar[None, None] * x[..., None]
    return DiscreteStep(np.ascontiguousarray(a), np.ascontiguousarray(bx))


# ---------------------------------------------------------------------------
# fused differentiable selective scan
# ---------------------------------------------------------------------------

def _zoh_terms(delta: np.ndarray, A: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (B, L, D, N) decay ``exp(z)`` and drive coefficient ``delta * phi(z)``.

    Evaluated in ``dtype``; entries near ``z = 0`` are patched with the series.
    """
    z = delta.astype(dtype, copy=False)[..., None] * A.astype(dtype, copy=False)
    decay = np.exp(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.expm1(z) / z
    small = np.abs(z) < SERIES_THRESHOLD
    if small.any():
        zs = z[small]
        phi[small] = 1.0 + zs / 2.0 + zs * zs / 6.0
    phi *= delta[..., None]
    return decay, phi


@numba.njit(cache=True, fastmath=True)
def _selective_fwd(u, Bm, Cm, decay, coef, y, H):
    Bt, L, D = u.shape
    N = Bm.shape[2]
    hs = np.zeros(N, dtype=np.float64)
    for b in range(Bt):
        for d in range(D):
            hs[:] = 0.0
            for t in range(L):
                x = u[b, t, d]
                acc = 0.0
                for n in range(N):
                    hs[n] = decay[b, t, d, n] * hs[n] + coef[b, t, d, n] * Bm[b, t, n] * x
                    H[b, d, t, n] = hs[n]
                    acc += Cm[b, t, n] * hs[n]
                y[b, t, d] = acc


@numba.njit(cache=True, fastmath=True)
def _selective_bwd(u, delta, A, Bm, Cm, decay, coef, H, gy, series_below,
                   gu, gdelta, gA, gB, gC):
    Bt, L, D = u.shape
    N = Bm.shape[2]
    gh = np.zeros(N, dtype=np.float64)
    for b in range(Bt):
        for d in range(D):
            gh[:] = 0.0
            for t in range(L - 1, -1, -1):
                dt = np.float64(delta[b, t, d])
                x = u[b, t, d]
                g = gy[b, t, d]
                g_dt = 0.0
                g_x = 0.0
                for n in range(N):
                    a = A[d, n]
                    z = dt * a
                    ab = decay[b, t, d, n]
                    cf = coef[b, t, d, n]
                    ph = cf / dt
                    # d/dz [expm1(z)/z]; the closed form cancels near 0
                    if abs(z) < series_below:
                        z2 = z * z
                        dph = 0.5 + z / 3.0 + z2 / 8.0 + z2 * z / 30.0 + z2 * z2 / 144.0 + z2 * z2 * z / 840.0
                    else:
                        dph = (ph * (z - 1.0) + 1.0) / z
                    h_prev = H[b, d, t - 1, n] if t > 0 else 0.0
                    gh[n] += Cm[b, t, n] * g
                    gC[b, t, n] += g * H[b, d, t, n]
                    gn = gh[n]
                    bu = Bm[b, t, n] * x
                    # h_t = exp(z) h_{t-1} + dt * phi(z) * B_t x_t,  z = dt * a
                    g_z = gn * (ab * h_prev + dt * dph * bu)
                    g_dt += g_z * a + gn * ph * bu
                    gA[d, n] += g_z * dt
                    gB[b, t, n] += gn * cf * x
                    g_x += gn * cf * Bm[b, t, n]
                    gh[n] = ab * gn
                gdelta[b, t, d] += g_dt
                gu[b, t, d] += g_x


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor,
                   mode: str = "sequential", chunk: int | None = None) -> Tensor:
    """Discretize per token and scan, returning ``y_t = <C_t, h_t>`` of shape (B, L, D).

    Forward runs sequentially or through the associative scan; the backward pass
    always replays the recurrence in reverse sequentially.
    """
    Bt, L, D = u.shape
    N = A.shape[1]
    if delta.shape != u.shape or A.shape != (D, N) or Bm.shape != (Bt, L, N) or Cm.shape != (Bt, L, N):
        raise ops.ShapeError(
            f"selective_scan: u {u.shape}, delta {delta.shape}, A {A.shape}, B {Bm.shape}, C {Cm.shape}"
        )
    dtype = u.dtype
    args = [np.ascontiguousarray(t.data, dtype=dtype) for t in (u, delta, A, Bm, Cm)]
    u_, delta_, A_, B_, C_ = args
    decay, coef = _zoh_terms(delta_, A_, dtype)
    if mode == "sequential":
        y = np.empty((Bt, L, D), dtype=dtype)
        H = np.empty((Bt, D, L, N), dtype=dtype)
        _selective_fwd(u_, B_, C_, decay, coef, y, H)
    elif mode == "parallel":
        bx = coef * B_[:, :, None, :] * u_[..., None]
        h = linear_scan(decay, bx, axis=1, mode="parallel", chunk=chunk)
        y = np.einsum("bldn,bln->bld", h, C_).astype(dtype)
        H = np.ascontiguousarray(h.transpose(0, 2, 1, 3))
    else:
        raise ValueError(f"selective_scan: unknown mode {mode!r}")
    series_below = 1e-2 if dtype == np.float64 else 1e-1

    def grad_fn(g):
        grads = [np.zeros_like(a) for a in args]
        _selective_bwd(u_, delta_, A_, B_, C_, decay, coef, H, np.ascontiguousarray(g, dtype=dtype),
                       series_below, *grads)
        return tuple(grads)

    return make_result("selective_scan", y, (u, delta, A, Bm, Cm), grad_fn)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """Per-channel SISO selective SSMs sharing B/C projections across channels.

    Maps a sequence ``(B, L, D)`` to ``(B, L, D)``.
    """

    def __init__(self, channels: int, state_size: int = 16, rng: np.random.Generator | None = None,
                 skip: bool = True, dt_min: float = 1e-3, dt_max: float = 1e-1):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = get_default_dtype()
        self.channels = channels
        self.state_size = state_size
        self.skip = skip
        bound = 1.0 / np.sqrt(channels)
        self.A_log = Parameter(np.tile(np.log(np.arange(1, state_size + 1)), (channels, 1)).astype(dtype))
        self.delta_w = uniform_param(rng, (channels, channels), bound)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
        self.delta_b = Parameter(inverse_softplus(dt).astype(dtype))
        self.B_w = uniform_param(rng, (state_size, channels), bound)
        self.C_w = uniform_param(rng, (state_size, channels), bound)
        self.D_skip = Parameter(np.ones(channels, dtype=dtype))
        self._mode = "sequential"
        self._chunk: int | None = None

    def set_scan_mode(self, mode: str, chunk: int | None = None) -> None:
        if mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown scan mode {mode!r}")
        self._mode, self._chunk = mode, chunk

    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.A_log))

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-dependent (delta, B, C) per token."""
        if x.ndim != 3 or x.shape[-1] != self.channels:
            raise ops.ShapeError(f"SelectiveSSM: expected (B, L, {self.channels}), got {x.shape}")
        delta = ops.softplus(ops.linear(x, self.delta_w, self.delta_b))
        return delta, ops.linear(x, self.B_w), ops.linear(x, self.C_w)

    def __call__(self, x: Tensor) -> Tensor:
        delta, Bm, Cm = self.project(x)
        y = selective_scan(x, delta, self.A(), Bm, Cm, mode=self._mode, chunk=self._chunk)
        if self.skip:
            y = ops.add(y, ops.mul(x, self.D_skip))
        return y


def selective_project(ssm: SelectiveSSM, x: Tensor):
    return ssm.project(x)


def selective_ssm(ssm: SelectiveSSM, x: Tensor) -> Tensor:
    return ssm(x)
