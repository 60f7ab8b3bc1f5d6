"""Training configuration and its line-oriented ``key = value`` text form."""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from algnet.losses import LossWeights
from algnet.network import NetworkConfig

PRECISIONS = ("float32", "float64")


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    lr_min: float = 1e-7
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    iterations: int = 500
    patch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 100
    precision: str = "float32"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0 < self.lr_min < self.lr_init:
            raise ValueError(f"need 0 < lr_min < lr_init, got {self.lr_min}, {self.lr_init}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch_size % 8 or self.patch_size < 8:
            raise ValueError(f"patch_size must be a positive multiple of 8, got {self.patch_size}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """Batch 32 and 256x256 patches; far too slow for a CPU, kept for reference."""
        return cls(batch_size=32, patch_size=256)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "network":
                lines += [f"network.{k} = {v!r}" for k, v in asdict(value).items()]
            elif f.name == "loss":
                lines += [f"loss.{k} = {v!r}" for k, v in asdict(value).items()]
            else:
                lines.append(f"{f.name} = {value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        top: dict = {}
        net: dict = {}
        loss: dict = {}
        valid_top = {f.name for f in fields(cls)} - {"network", "loss"}
        valid_net = {f.name for f in fields(NetworkConfig)}
        valid_loss = {f.name for f in fields(LossWeights)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key = key.strip()
            try:
                parsed = ast.literal_eval(value.strip())
            except (ValueError, SyntaxError):
                parsed = value.strip()
            section, _, name = key.rpartition(".")
            target, valid = {"": (top, valid_top), "network": (net, valid_net), "loss": (loss, valid_loss)}.get(
                section, (None, None))
            if target is None or name not in valid:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            target[name] = parsed
        return cls(network=NetworkConfig(**net), loss=LossWeights(**loss), **top)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def dtype(self):
        import numpy as np

        return np.dtype(self.precision)
