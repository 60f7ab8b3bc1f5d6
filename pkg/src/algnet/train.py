"""Training loop: batch sampling, multi-scale loss, Adam and cosine schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from algnet import checkpoint as ckpt_io
from algnet.config import TrainConfig
from algnet.data import augment_flips, sample_patch
from algnet.losses import total_loss
from algnet.network import ALGNet, image_pyramid
from algnet.optim import AdamState, NonFiniteGradient, adam_step, cosine_lr
from algnet.tensor import Tensor, backward, get_tape, no_grad, precision

logger = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]


class TrainingHalted(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""


def build_network(config: TrainConfig) -> ALGNet:
    with precision(config.dtype()):
        return ALGNet(config.network)


def sample_batch(pairs: Sequence[Pair], config: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch for ``step``; depends only on (seed, step) so resumed runs see the same data."""
    rng = np.random.default_rng([config.seed, step])
    replace = len(pairs) < config.batch_size
    idx = rng.choice(len(pairs), size=config.batch_size, replace=replace)
    sharp, blurred = [], []
    for i in idx:
        s, b = augment_flips(sample_patch(pairs[int(i)], config.patch_size, rng), rng)
        sharp.append(s)
        blurred.append(b)
    dtype = config.dtype()
    return np.stack(sharp).astype(dtype), np.stack(blurred).astype(dtype)


def batch_loss(net: ALGNet, sharp: np.ndarray, blurred: np.ndarray, config: TrainConfig):
    target = image_pyramid(Tensor(sharp))
    return total_loss(net(Tensor(blurred)), target, config.loss)


def dataset_loss(net: ALGNet, pairs: Sequence[Pair], config: TrainConfig) -> float:
    """Mean total loss over whole images, no augmentation: a noise-free progress measure."""
    dtype = config.dtype()
    values = []
    with precision(dtype), no_grad():
        for s, b in pairs:
            values.append(batch_loss(net, s[None].astype(dtype), b[None].astype(dtype), config).item())
    return float(np.mean(values))


@dataclass
class LossLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def add(self, step: int, loss: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def to_text(self) -> str:
        return "".join(f"{s}\t{l:.9g}\t{r:.9g}\n" for s, l, r in zip(self.steps, self.losses, self.lrs))

    @classmethod
    def from_text(cls, text: str) -> "LossLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                s, l, r = line.split("\t")
                log.add(int(s), float(l), float(r))
        return log


class Trainer:
    def __init__(self, config: TrainConfig, pairs: Sequence[Pair], net: ALGNet | None = None):
        if not pairs:
            raise ValueError("training needs at least one pair")
        self.config = config
        self.pairs = list(pairs)
        self.net = net if net is not None else build_network(config)
        self.params = self.net.parameters()
        self.names = [n for n, _ in self.net.named_parameters()]
        self.adam = AdamState.zeros_like(self.params)
        self.step = 0
        self.log = LossLog()

    # -- persistence ---------------------------------------------------------
    def checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(
            config=self.config,
            params={n: p.data for n, p in zip(self.names, self.params)},
            moments_m=dict(zip(self.names, self.adam.m)),
            moments_v=dict(zip(self.names, self.adam.v)),
            step=self.step,
        )

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, pairs: Sequence[Pair]) -> "Trainer":
        trainer = cls(ck.config, pairs)
        load_params(trainer.net, ck)
        if ck.moments_m:
            trainer.adam.m = [ck.moments_m[n].astype(p.data.dtype) for n, p in zip(trainer.names, trainer.params)]
            trainer.adam.v = [ck.moments_v[n].astype(p.data.dtype) for n, p in zip(trainer.names, trainer.params)]
        trainer.adam.step = ck.step
        trainer.step = ck.step
        return trainer

    # -- optimisation ----------------------------------------------------------
    def train_step(self) -> float:
        cfg = self.config
        lr = cosine_lr(self.step, cfg.iterations, cfg.lr_init, cfg.lr_min)
        sharp, blurred = sample_batch(self.pairs, cfg, self.step)
        self.net.zero_grad()
        try:
            with precision(cfg.dtype()):
                loss = batch_loss(self.net, sharp, blurred, cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(f"loss is {value}")
                backward(loss)
            adam_step(self.params, self.adam, lr, cfg.betas, names=self.names)
        except (FloatingPointError, NonFiniteGradient) as exc:
            get_tape().reset()
            raise TrainingHalted(f"step {self.step}: {exc}") from exc
        self.log.add(self.step, value, lr)
        self.step += 1
        return value

    def run(self, out: str | Path | None = None, until: int | None = None) -> LossLog:
        """Train up to ``until`` (default: all configured iterations).

        With ``out`` set, checkpoints are written every ``checkpoint_every``
        steps and at the end; on a halt the last good state is written and the
        exception propagates. A non-finite state is never written, so the
        previous checkpoint survives.
        """
        cfg = self.config
        until = cfg.iterations if until is None else min(until, cfg.iterations)
        while self.step < until:
            try:
                loss = self.train_step()
            except TrainingHalted:
                if out is not None and self.state_is_finite():
                    self.save(out)
                raise
            if self.step % 50 == 0 or self.step == until:
                logger.info("step %d loss %.6f", self.step, loss)
            if out is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self.save(out)
        if out is not None:
            self.save(out)
        return self.log

    def state_is_finite(self) -> bool:
        arrays = [p.data for p in self.params] + self.adam.m + self.adam.v
        return all(np.all(np.isfinite(a)) for a in arrays)

    def save(self, out: str | Path) -> None:
        out = Path(out)
        ckpt_io.save(out, self.checkpoint())
        log_path = loss_log_path(out)
        previous = LossLog.from_text(log_path.read_text()) if log_path.exists() else LossLog()
        merged = LossLog()
        for s, l, r in zip(previous.steps, previous.losses, previous.lrs):
            if s < (self.log.steps[0] if self.log.steps else self.step):
                merged.add(s, l, r)
        for s, l, r in zip(self.log.steps, self.log.losses, self.log.lrs):
            merged.add(s, l, r)
        log_path.write_text(merged.to_text())
        if merged.steps:
            from algnet import plotting

            plotting.loss_curve(merged.steps, merged.losses, merged.lrs, log_path.with_suffix(".png"))


def loss_log_path(ckpt_path: str | Path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".loss.tsv")


def load_params(net: ALGNet, ck: ckpt_io.Checkpoint) -> None:
    expected = net.state_dict()
    diff = ckpt_io.state_diff(expected, ck.params)
    if diff:
        raise ckpt_io.CheckpointError("incompatible checkpoint: " + "; ".join(diff[:6])
                                      + (f"; ... {len(diff) - 6} more" if len(diff) > 6 else ""))
    net.load_state_dict({k: v.astype(expected[k].dtype) for k, v in ck.params.items()})


def network_from_checkpoint(ck: ckpt_io.Checkpoint) -> ALGNet:
    net = build_network(ck.config)
    load_params(net, ck)
    return net
