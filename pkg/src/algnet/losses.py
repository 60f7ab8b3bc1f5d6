"""Multi-scale training objective: Charbonnier, Laplacian edge and Fourier L1 terms."""

from __future__ import annotations

from dataclasses import InitVar, dataclass
from typing import Sequence

import numpy as np

from algnet import ops
from algnet.tensor import Tensor

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class LossWeights:
    edge: float = 0.05    # weight on the edge term
    freq: float = 0.1     # weight on the frequency term
    eps: float = 1e-3     # Charbonnier constant
    strict: InitVar[bool] = True  # False allows zero term weights (ablations)

    def __post_init__(self, strict: bool):
        if self.eps <= 0:
            raise ValueError("eps must be strictly positive")
        low = min(self.edge, self.freq)
        if low < 0 or (strict and low == 0):
            raise ValueError("loss weights must be strictly positive (pass strict=False to allow zeros)")


def _check(name: str, pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ops.ShapeError(f"{name}: prediction {pred.shape} vs target {target.shape}")


def charbonnier(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """Mean of ``sqrt(diff**2 + eps**2)`` over all elements."""
    _check("charbonnier", pred, target)
    diff = ops.sub(pred, target)
    return ops.mean(ops.sqrt(ops.add(ops.square(diff), eps * eps)))


def laplacian(x: Tensor) -> Tensor:
    """4-neighbour Laplacian per channel with reflect padding."""
    C = x.shape[1]
    kernel = Tensor(np.broadcast_to(LAPLACIAN, (C, 1, 3, 3)).astype(x.dtype))
    return ops.depthwise_conv2d(ops.pad2d(x, 1, mode="reflect"), kernel)


def edge_loss(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    _check("edge_loss", pred, target)
    return charbonnier(laplacian(pred), laplacian(target), eps)


def freq_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Per-element mean of ``|Re| + |Im|`` of the spectrum difference."""
    _check("freq_loss", pred, target)
    spectrum = ops.fft2d(ops.sub(pred, target))
    return ops.div(ops.sum(ops.abs(spectrum)), pred.size)


def scale_loss(pred: Tensor, target: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    terms = charbonnier(pred, target, weights.eps)
    terms = ops.add(terms, ops.mul(edge_loss(pred, target, weights.eps), weights.edge))
    return ops.add(terms, ops.mul(freq_loss(pred, target), weights.freq))


def total_loss(preds: Sequence[Tensor], targets: Sequence[Tensor],
               weights: LossWeights = LossWeights()) -> Tensor:
    """Unweighted sum over the four output scales."""
    if len(preds) != 4 or len(targets) != 4:
        raise ValueError(f"total_loss: need 4 levels, got {len(preds)} predictions and {len(targets)} targets")
    loss = None
    for p, t in zip(preds, targets):
        term = scale_loss(p, t, weights)
        loss = term if loss is None else ops.add(loss, term)
    return loss
