"""Four-scale U-shaped deblurring network with multi-input / multi-output heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from algnet import ops
from algnet.blocks import VARIANTS, ALGBlock, Conv
from algnet.module import Module
from algnet.tensor import Tensor, no_grad

SCALES = 4


@dataclass
class NetworkConfig:
    base_channels: int = 8
    enc_blocks: tuple[int, ...] = (1, 1, 1, 2)
    middle_blocks: int = 2
    dec_blocks: tuple[int, ...] = (1, 1, 1, 1)
    state_size: int = 16
    expansion: int = 2
    ssm_skip: bool = True
    block_variant: str = "full"
    scan_mode: str = "sequential"
    head_init: str = "zero"
    seed: int = 0
    scales: int = field(default=SCALES)

    def __post_init__(self):
        self.enc_blocks = tuple(int(v) for v in self.enc_blocks)
        self.dec_blocks = tuple(int(v) for v in self.dec_blocks)
        if self.scales != SCALES:
            raise ValueError(f"scales is fixed at {SCALES}")
        if len(self.enc_blocks) != SCALES or len(self.dec_blocks) != SCALES:
            raise ValueError("enc_blocks and dec_blocks need one count per scale")
        if self.base_channels < 1 or self.state_size < 1 or self.expansion < 1:
            raise ValueError("base_channels, state_size and expansion must be positive")
        if self.block_variant not in VARIANTS:
            raise ValueError(f"block_variant must be one of {VARIANTS}")
        if self.scan_mode not in ("sequential", "parallel"):
            raise ValueError("scan_mode must be 'sequential' or 'parallel'")
        if self.head_init not in ("zero", "random"):
            raise ValueError("head_init must be 'zero' or 'random'")

    def channels(self, scale: int) -> int:
        return self.base_channels * 2 ** scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def downscale_image(image: Tensor, factor: int) -> Tensor:
    """Box-average downsampling by 1, 2, 4 or 8."""
    if factor == 1:
        return image
    if factor not in (2, 4, 8):
        raise ValueError(f"downscale factor must be 2, 4 or 8, got {factor}")
    H, W = image.shape[-2:]
    if H % factor or W % factor:
        raise ops.ShapeError(f"downscale_image: {H}x{W} not divisible by {factor}")
    return ops.avg_pool(image, factor)


def image_pyramid(image: Tensor) -> list[Tensor]:
    return [downscale_image(image, 2 ** s) for s in range(SCALES)]


class Downsample(Module):
    """Stride-2 3x3 conv: (C, H, W) -> (2C, H/2, W/2)."""

    def __init__(self, channels: int, rng):
        self.conv = Conv(channels, 2 * channels, 3, rng, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ops.ShapeError(f"downsample: odd spatial size {x.shape[2:]}")
        return self.conv(x)


class Upsample(Module):
    """1x1 conv to 2C then pixel shuffle: (C, H, W) -> (C/2, 2H, 2W)."""

    def __init__(self, channels: int, rng):
        if channels % 2:
            raise ops.ShapeError(f"upsample: odd channel count {channels}")
        self.conv = Conv(channels, 2 * channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.conv(x), 2)


class InputInjection(Module):
    """Encode a downscaled degraded image and merge it into the feature path."""

    def __init__(self, channels: int, rng):
        self.conv1 = Conv(3, channels, 3, rng)
        self.conv2 = Conv(channels, channels, 3, rng)
        self.merge = Conv(2 * channels, channels, 1, rng)

    def __call__(self, image: Tensor, feat: Tensor) -> Tensor:
        if image.shape[2:] != feat.shape[2:] or image.shape[0] != feat.shape[0]:
            raise ops.ShapeError(f"inject: image {image.shape} vs features {feat.shape}")
        encoded = ops.relu(self.conv2(ops.relu(self.conv1(image))))
        return self.merge(ops.concat_channels(feat, encoded))


class OutputHead(Module):
    """3x3 conv to a residual image, added to the degraded input at that scale."""

    def __init__(self, channels: int, rng):
        self.conv = Conv(channels, 3, 3, rng)

    def __call__(self, feat: Tensor, image: Tensor) -> Tensor:
        if image.shape[2:] != feat.shape[2:] or image.shape[1] != 3:
            raise ops.ShapeError(f"head: features {feat.shape} vs image {image.shape}")
        return ops.add(self.conv(feat), image)


class ALGNet(Module):
    def __init__(self, config: NetworkConfig | None = None):
        config = config if config is not None else NetworkConfig()
        self._config = config
        rng = np.random.default_rng(config.seed)
        c = config.channels

        def blocks(ch: int, count: int) -> list[ALGBlock]:
            return [
                ALGBlock(ch, rng, config.expansion, config.state_size, config.ssm_skip, config.block_variant)
                for _ in range(count)
            ]

        self.embed = Conv(3, c(0), 3, rng)
        self.encoders = [blocks(c(s), config.enc_blocks[s]) for s in range(SCALES)]
        self.downs = [Downsample(c(s), rng) for s in range(SCALES - 1)]
        self.injections = [InputInjection(c(s), rng) for s in range(1, SCALES)]
        self.middle = blocks(c(SCALES - 1), config.middle_blocks)
        self.fuses = [Conv(2 * c(s), c(s), 1, rng) for s in range(SCALES)]
        self.decoders = [blocks(c(s), config.dec_blocks[s]) for s in range(SCALES)]
        self.ups = [Upsample(c(s), rng) for s in range(1, SCALES)]
        self.heads = [OutputHead(c(s), rng) for s in range(SCALES)]
        if config.head_init == "zero":
            # each output starts as its input image; training learns the residual
            for head in self.heads:
                head.zero_weights()
        self.name_parameters()
        self.set_scan_mode(config.scan_mode)

    @property
    def config(self) -> NetworkConfig:
        return self._config

    def named_parameters(self, prefix: str = ""):
        # nested lists of blocks need their own naming
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, list) and value and isinstance(value[0], list):
                for i, group in enumerate(value):
                    for j, block in enumerate(group):
                        yield from block.named_parameters(f"{prefix}{key}.{i}.{j}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield from item.named_parameters(f"{prefix}{key}.{i}.")
            else:
                yield from value.named_parameters(f"{prefix}{key}.")

    def all_blocks(self) -> list[ALGBlock]:
        groups = self.encoders + [self.middle] + self.decoders
        return [b for g in groups for b in g]

    def set_scan_mode(self, mode: str, chunk: int | None = None) -> None:
        for block in self.all_blocks():
            block.set_scan_mode(mode, chunk)

    def shallow_embed(self, image: Tensor) -> Tensor:
        H, W = image.shape[2:]
        if H % 8 or W % 8:
            raise ops.ShapeError(
                f"input {H}x{W} must be divisible by 8; pad by ({-H % 8}, {-W % 8}) first"
            )
        return self.embed(image)

    def __call__(self, image: Tensor, return_features: bool = False):
        if image.ndim != 4 or image.shape[1] != 3:
            raise ops.ShapeError(f"ALGNet expects N x 3 x H x W, got {image.shape}")
        x = self.shallow_embed(image)
        inputs = image_pyramid(image)
        skips = []
        features = {}
        for s in range(SCALES):
            if s > 0:
                x = self.injections[s - 1](inputs[s], self.downs[s - 1](x))
            for block in self.encoders[s]:
                x = block(x)
            skips.append(x)
            features[f"enc{s}"] = x
        for block in self.middle:
            x = block(x)
        features["middle"] = x
        outputs: list[Tensor] = [None] * SCALES  # type: ignore[list-item]
        for s in reversed(range(SCALES)):
            if s < SCALES - 1:
                x = self.ups[s](x)
            x = self.fuses[s](ops.concat_channels(x, skips[s]))
            for block in self.decoders[s]:
                x = block(x)
            features[f"dec{s}"] = x
            outputs[s] = self.heads[s](x, inputs[s])
        if return_features:
            return outputs, features
        return outputs


def restore(net: ALGNet, image: np.ndarray) -> np.ndarray:
    """Full-resolution inference on one (3, H, W) image of any size.

    Pads reflectively to a multiple of 8, runs the network, crops and clamps.
    """
    _, H, W = image.shape
    pad_h, pad_w = -H % 8, -W % 8
    x = Tensor(np.asarray(image, dtype=net.embed.weight.dtype)[None])
    with no_grad():
        if pad_h or pad_w:
            x = ops.pad2d(x, (0, pad_h, 0, pad_w), mode="reflect")
        out = net(x)[0].data[0, :, :H, :W]
    return np.clip(out, 0.0, 1.0)
