"""The ALGBlock: spatial features, global SSM branch, local attention branch,
learnable aggregation and refinement."""

from __future__ import annotations

import numpy as np

from algnet import ops
from algnet.module import Module, conv_bias, conv_weight, ones_param, uniform_param, zeros_param
from algnet.ssm import SelectiveSSM
from algnet.tensor import Parameter, Tensor, get_default_dtype

VARIANTS = ("full", "global", "local")


def simple_gate(x: Tensor) -> Tensor:
    """Split channels in half and multiply the halves."""
    C2 = x.shape[1]
    if C2 % 2:
        raise ops.ShapeError(f"simple_gate: odd channel count {C2}")
    first, second = ops.split_channels(x, C2 // 2)
    return ops.mul(first, second)


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))

    def __call__(self, x: Tensor, axis: int | None = None) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, axis=axis)


class Conv(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1):
        self.weight = conv_weight(rng, out_ch, in_ch, k)
        self.bias = conv_bias(rng, out_ch, in_ch * k * k)
        self._stride = stride
        self._padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class DepthwiseConv(Module):
    def __init__(self, channels: int, k: int, rng: np.random.Generator):
        self.weight = uniform_param(rng, (channels, 1, k, k), 1.0 / k)
        self.bias = conv_bias(rng, channels, k * k)
        self._padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias, padding=self._padding)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = uniform_param(rng, (d_out, d_in), bound)
        self.bias = uniform_param(rng, (d_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class GlobalBranch(Module):
    """Long-range path: LN, two expanded projections, selective SSM on the bottom one.

    ``top = SiLU(Linear(seq))``, ``bottom = SSM(SiLU(conv1x1(Linear(seq))))``,
    output ``Linear(top * bottom)`` reshaped back to NCHW.
    """

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2,
                 state_size: int = 16, ssm_skip: bool = True):
        inner = expansion * channels
        self.norm = LayerNorm(channels)
        self.expand_top = Linear(channels, inner, rng)
        self.expand_bottom = Linear(channels, inner, rng)
        self.conv_bottom = Conv(inner, inner, 1, rng)
        self.ssm = SelectiveSSM(inner, state_size, rng, skip=ssm_skip)
        self.out = Linear(inner, channels, rng)

    def __call__(self, xs: Tensor) -> Tensor:
        N, C, H, W = xs.shape
        seq = ops.flatten_hw(xs)                     # N, HW, C
        seq = self.norm(seq, axis=-1)
        top = ops.silu(self.expand_top(seq))
        bottom = self.expand_bottom(seq)             # N, HW, lC
        lanes = ops.reshape(ops.permute(bottom, (0, 2, 1)), (N, -1, H * W, 1))
        lanes = self.conv_bottom(lanes)              # 1x1 conv over N, lC, HW, 1
        bottom = ops.permute(ops.reshape(lanes, (N, -1, H * W)), (0, 2, 1))
        bottom = self.ssm(ops.silu(bottom))
        mixed = self.out(ops.mul(top, bottom))       # N, HW, C
        return ops.unflatten_hw(mixed, H, W)


class LocalBranch(Module):
    """Simplified channel attention: ``proj(xs * conv1x1(GAP(xs)))``."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.attn = Conv(channels, channels, 1, rng)
        self.proj = Conv(channels, channels, 1, rng)

    def attention(self, xs: Tensor) -> Tensor:
        return self.attn(ops.global_avg_pool(xs))

    def __call__(self, xs: Tensor) -> Tensor:
        return self.proj(ops.mul(xs, self.attention(xs)))


def fa_aggregate(F_G: Tensor, F_L: Tensor, weight: Tensor) -> Tensor:
    """``F_G + weight * F_L`` with a single learnable scalar weight."""
    if F_G.shape != F_L.shape:
        raise ops.ShapeError(f"fa_aggregate: {F_G.shape} vs {F_L.shape}")
    return ops.add(F_G, ops.mul(F_L, weight))


class ALGBlock(Module):
    """One block; ``variant`` drops a branch for ablations ('global' or 'local' only)."""

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2,
                 state_size: int = 16, ssm_skip: bool = True, variant: str = "full"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown block variant {variant!r}; choose from {VARIANTS}")
        self.channels = channels
        self.variant = variant
        self.norm1 = LayerNorm(channels)
        self.conv_in = Conv(channels, 2 * channels, 1, rng)
        self.dwconv = DepthwiseConv(2 * channels, 3, rng)
        self.global_branch = GlobalBranch(channels, rng, expansion, state_size, ssm_skip)
        self.local_branch = LocalBranch(channels, rng)
        self.fa_weight = Parameter(np.ones((), dtype=get_default_dtype()))
        self.norm2 = LayerNorm(channels)
        self.refine_a = Conv(channels, 2 * channels, 1, rng)
        self.refine_b = Conv(channels, channels, 1, rng)

    def spatial_features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ops.ShapeError(f"ALGBlock({self.channels}): got input {x.shape}")
        return simple_gate(self.dwconv(self.conv_in(self.norm1(x))))

    def aggregate(self, xs: Tensor) -> Tensor:
        if self.variant == "global":
            return self.global_branch(xs)
        if self.variant == "local":
            return ops.mul(self.local_branch(xs), self.fa_weight)
        return fa_aggregate(self.global_branch(xs), self.local_branch(xs), self.fa_weight)

    def refine(self, x_prev: Tensor, F_A: Tensor) -> Tensor:
        if x_prev.shape != F_A.shape:
            raise ops.ShapeError(f"refine: {x_prev.shape} vs {F_A.shape}")
        r = self.refine_b(simple_gate(self.refine_a(self.norm2(ops.add(x_prev, F_A)))))
        return ops.add(F_A, r)

    def __call__(self, x: Tensor) -> Tensor:
        return self.refine(x, self.aggregate(self.spatial_features(x)))

    def parts(self, x: Tensor) -> dict[str, Tensor]:
        """Intermediate features of one forward pass, for diagnostics."""
        xs = self.spatial_features(x)
        F_G = self.global_branch(xs)
        F_L = self.local_branch(xs)
        F_A = fa_aggregate(F_G, F_L, self.fa_weight)
        return {"spatial": xs, "global": F_G, "local": F_L, "aggregate": F_A, "output": self.refine(x, F_A)}

    def set_scan_mode(self, mode: str, chunk: int | None = None) -> None:
        self.global_branch.ssm.set_scan_mode(mode, chunk)
