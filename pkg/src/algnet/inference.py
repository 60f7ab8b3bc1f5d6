"""Restoring image files, scoring a manifest and the channel-activation diagnostic."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from algnet import checkpoint as ckpt_io
from algnet.data import DatasetManifest, load_image, save_image
from algnet.metrics import MetricReport, activation_table, channel_activation, psnr, ssim
from algnet.network import ALGNet, NetworkConfig, restore
from algnet.tensor import Tensor, no_grad
from algnet.train import network_from_checkpoint

IMAGE_SUFFIXES = (".ppm", ".png")


def config_diff(expected: NetworkConfig, found: NetworkConfig) -> list[str]:
    a, b = asdict(expected), asdict(found)
    return [f"{k}: expected {a[k]!r}, checkpoint has {b[k]!r}" for k in a if a[k] != b[k]]


def load_for_inference(path: str | Path, expect: NetworkConfig | None = None) -> ALGNet:
    ck = ckpt_io.load(path)
    if expect is not None:
        diff = config_diff(expect, ck.config.network)
        if diff:
            raise ckpt_io.CheckpointError("incompatible checkpoint config: " + "; ".join(diff))
    return network_from_checkpoint(ck)


def infer_paths(net: ALGNet, src: str | Path, dst: str | Path) -> list[Path]:
    """Restore one image or every image in a directory; returns the written paths."""
    src, dst = Path(src), Path(dst)
    if src.is_dir():
        inputs = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not inputs:
            raise FileNotFoundError(f"no .ppm/.png images in {src}")
        dst.mkdir(parents=True, exist_ok=True)
        targets = [dst / p.name for p in inputs]
    else:
        if not src.exists():
            raise FileNotFoundError(f"input {src} does not exist")
        inputs, targets = [src], [dst]
    for i, o in zip(inputs, targets):
        save_image(o, restore(net, load_image(i)))
    return targets


def evaluate(net: ALGNet, manifest: DatasetManifest, baseline: bool = False) -> MetricReport:
    """PSNR/SSIM of restored vs sharp; with ``baseline`` the degraded input is scored instead."""
    report = MetricReport()
    for image_id, (sharp, blurred) in zip(manifest.ids(), manifest.load_pairs()):
        out = blurred if baseline else restore(net, blurred)
        report.add(image_id, psnr(out, sharp), ssim(out, sharp))
    return report


def activations(net: ALGNet, image: np.ndarray, layer: str = "dec0") -> np.ndarray:
    """Per-channel ReLU + global-average activation of a named feature map."""
    _, H, W = image.shape
    if H % 8 or W % 8:
        raise ValueError(f"activation diagnostic needs sizes divisible by 8, got {H}x{W}")
    with no_grad():
        _, feats = net(Tensor(np.asarray(image, dtype=net.embed.weight.dtype)[None]), return_features=True)
    if layer not in feats:
        raise KeyError(f"unknown layer {layer!r}; choose from {sorted(feats)}")
    return channel_activation(feats[layer].data)


__all__ = ["activation_table", "activations", "config_diff", "evaluate", "infer_paths", "load_for_inference"]
