"""Synthetic blurred/sharp pairs, image I/O, patch sampling and flips.

Images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# blur kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlurSpec:
    kind: str = "gaussian"          # gaussian | linear_motion
    sigma: float = 1.5
    length: int = 9
    angle: float = 0.0              # degrees, counter-clockwise from +x
    noise_sigma: float = 0.01
    seed: int = 0


def make_blur_kernel(spec: BlurSpec) -> np.ndarray:
    if spec.kind == "gaussian":
        if not spec.sigma > 0:
            raise ValueError(f"gaussian blur needs sigma > 0, got {spec.sigma}")
        radius = max(1, int(math.ceil(3 * spec.sigma)))
        r = np.arange(-radius, radius + 1, dtype=np.float64)
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * spec.sigma ** 2))
        return g / g.sum()
    if spec.kind in ("linear_motion", "motion"):
        if spec.length < 1:
            raise ValueError(f"motion blur needs length >= 1, got {spec.length}")
        return _motion_kernel(int(spec.length), spec.angle)
    raise ValueError(f"unknown blur kind {spec.kind!r}")


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    # the segment spans (-length/2, length/2) about the centre of an odd square
    # support; equally spaced midpoint samples are binned to their nearest pixel
    size = length if length % 2 else length + 1
    c = size // 2
    theta = math.radians(angle)
    samples = 16 * length
    s = (np.arange(samples) + 0.5) / samples * length - length / 2.0
    cols = np.clip(np.rint(c + s * math.cos(theta)).astype(int), 0, size - 1)
    rows = np.clip(np.rint(c - s * math.sin(theta)).astype(int), 0, size - 1)
    k = np.zeros((size, size))
    np.add.at(k, (rows, cols), 1.0)
    return k / k.sum()


def convolve_image(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D convolution with reflect (mirror, edge not repeated) padding."""
    image = np.asarray(image, dtype=np.float64)
    return np.stack([ndimage.convolve(ch, kernel, mode="mirror") for ch in image])


def apply_blur(sharp: np.ndarray, spec: BlurSpec, index: int = 0) -> np.ndarray:
    """Blur, add seeded Gaussian noise, clamp to [0, 1].

    Noise is drawn from a generator keyed on ``(spec.seed, index)`` so pairs
    can be generated in any order.
    """
    blurred = convolve_image(sharp, make_blur_kernel(spec))
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, index])
        blurred = blurred + rng.normal(0.0, spec.noise_sigma, size=blurred.shape)
    return np.clip(blurred, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic sharp content
# ---------------------------------------------------------------------------

def synthetic_scene(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth RGB scene: a colour gradient overlaid with rectangles,
    discs and a stripe patch, giving edges at many orientations."""
    yy, xx = np.mgrid[0:height, 0:width] / np.array([max(height - 1, 1), max(width - 1, 1)])[:, None, None]
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, off = rng.uniform(-0.4, 0.4, size=3)
        img[c] = 0.5 + off * 0.5 + a * (yy - 0.5) + b * (xx - 0.5)
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 1, size=3)
        if rng.random() < 0.5:
            h, w = rng.integers(height // 8, height // 2 + 1), rng.integers(width // 8, width // 2 + 1)
            r0, c0 = rng.integers(0, height - h + 1), rng.integers(0, width - w + 1)
            img[:, r0:r0 + h, c0:c0 + w] = color[:, None, None]
        else:
            radius = rng.uniform(0.08, 0.25) * min(height, width)
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            mask = (np.arange(height)[:, None] - cy) ** 2 + (np.arange(width)[None, :] - cx) ** 2 < radius ** 2
            img[:, mask] = color[:, None]
    period = rng.integers(4, 10)
    h, w = height // 3, width // 3
    r0, c0 = rng.integers(0, height - h + 1), rng.integers(0, width - w + 1)
    stripes = (np.arange(w)[None, :] // (period // 2)) % 2 * np.ones((h, 1))
    img[:, r0:r0 + h, c0:c0 + w] = 0.2 + 0.6 * stripes
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# patches and augmentation
# ---------------------------------------------------------------------------

def sample_patch(pair: tuple[np.ndarray, np.ndarray], size: int, rng: np.random.Generator):
    """Crop the same ``size x size`` window from both images of a pair."""
    sharp, blurred = pair
    if sharp.shape != blurred.shape:
        raise ValueError(f"pair shapes differ: {sharp.shape} vs {blurred.shape}")
    if size % 8:
        raise ValueError(f"patch size {size} must be divisible by 8")
    _, H, W = sharp.shape
    if H < size or W < size:
        raise ValueError(f"image {H}x{W} smaller than patch {size}")
    r = int(rng.integers(0, H - size + 1))
    c = int(rng.integers(0, W - size + 1))
    window = (slice(None), slice(r, r + size), slice(c, c + size))
    return sharp[window], blurred[window]


def augment_flips(pair: tuple[np.ndarray, np.ndarray], rng: np.random.Generator):
    """Horizontal then vertical flip, each with probability 1/2, applied to both images."""
    sharp, blurred = pair
    if rng.random() < 0.5:
        sharp, blurred = sharp[:, :, ::-1], blurred[:, :, ::-1]
    if rng.random() < 0.5:
        sharp, blurred = sharp[:, ::-1, :], blurred[:, ::-1, :]
    return np.ascontiguousarray(sharp), np.ascontiguousarray(blurred)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def encode_ppm(image: np.ndarray) -> bytes:
    data = to_uint8(image)
    _, H, W = data.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + data.transpose(1, 2, 0).tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    """Parse a binary P6 pixmap (maxval <= 255) to a (3, H, W) float32 image."""
    pos = 0
    fields: list[int] = []

    def skip_space(p: int) -> int:
        while p < len(raw):
            if raw[p] in b" \t\r\n":
                p += 1
            elif raw[p:p + 1] == b"#":
                while p < len(raw) and raw[p] not in b"\r\n":
                    p += 1
            else:
                break
        return p

    if raw[:2] != b"P6":
        raise DecodeError("not a binary P6 pixmap", 0)
    pos = 2
    for name in ("width", "height", "maxval"):
        start = pos
        pos = skip_space(pos)
        if pos == start:
            raise DecodeError(f"expected whitespace before {name}", pos)
        begin = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if pos == begin:
            raise DecodeError(f"missing {name}", begin)
        fields.append(int(raw[begin:pos]))
    if pos >= len(raw) or raw[pos] not in b" \t\r\n":
        raise DecodeError("expected a single whitespace after maxval", pos)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError(f"invalid dimensions {width}x{height}", pos)
    if not 0 < maxval < 256:
        raise DecodeError(f"unsupported maxval {maxval}", pos)
    need = width * height * 3
    if len(raw) - pos < need:
        raise DecodeError(f"truncated pixel data: need {need} bytes, have {len(raw) - pos}", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval)).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        return decode_ppm(raw)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    raise DecodeError(f"{path}: unsupported image format", 0)


def save_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(to_uint8(image).transpose(1, 2, 0)).save(path)
    else:
        path.write_bytes(encode_ppm(image))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    pairs: list[tuple[Path, Path]] = field(default_factory=list)
    split: str = "train"
    patch_size: int = 64
    seed: int = 0

    def write(self, path: str | Path) -> None:
        path = Path(path)
        lines = [f"# split = {self.split}", f"# patch_size = {self.patch_size}", f"# seed = {self.seed}"]
        lines += [f"{_rel(s, path.parent)}\t{_rel(b, path.parent)}" for s, b in self.pairs]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        manifest = cls()
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                key, value = key.strip(), value.strip()
                if key == "split":
                    manifest.split = value
                elif key in ("patch_size", "seed"):
                    setattr(manifest, key, int(value))
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'sharp<TAB>blurred'")
            manifest.pairs.append(tuple(_resolve(p, path.parent) for p in parts))  # type: ignore[arg-type]
        return manifest

    def load_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [validated_pair(s, b) for s, b in self.pairs]

    def ids(self) -> list[str]:
        return [Path(s).stem for s, _ in self.pairs]


def validated_pair(sharp_path: Path, blurred_path: Path) -> tuple[np.ndarray, np.ndarray]:
    sharp, blurred = load_image(sharp_path), load_image(blurred_path)
    if sharp.shape != blurred.shape:
        raise ValueError(f"{sharp_path} {sharp.shape} and {blurred_path} {blurred.shape} differ in size")
    return sharp, blurred


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(p).resolve())


def _resolve(p: str, base: Path) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def generate_dataset(out_dir: str | Path, count: int, blur: str = "gaussian", seed: int = 0,
                     size: int = 64, noise_sigma: float = 0.01, sigma: float = 1.5,
                     length: int = 9, fmt: str = "ppm") -> DatasetManifest:
    """Write ``count`` sharp/blurred pairs plus ``manifest.tsv`` into ``out_dir``.

    Each pair draws from generators keyed on ``(seed, index)``; the motion angle
    (motion blur) is drawn per pair.
    """
    out = Path(out_dir)
    (out / "sharp").mkdir(parents=True, exist_ok=True)
    (out / "blurred").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(split="train", patch_size=size, seed=seed)
    kind = "linear_motion" if blur in ("motion", "linear_motion") else blur
    for i in range(count):
        rng = np.random.default_rng([seed, i, 1])
        sharp = synthetic_scene(size, size, rng)
        angle = float(rng.uniform(0, 180)) if kind == "linear_motion" else 0.0
        spec = BlurSpec(kind=kind, sigma=sigma, length=length, angle=angle, noise_sigma=noise_sigma, seed=seed)
        blurred = apply_blur(sharp, spec, index=i)
        sp = out / "sharp" / f"{i:04d}.{fmt}"
        bp = out / "blurred" / f"{i:04d}.{fmt}"
        save_image(sp, sharp)
        save_image(bp, blurred)
        manifest.pairs.append((sp, bp))
    manifest.write(out / "manifest.tsv")
    logger.info("wrote %d pairs to %s", count, out)
    return manifest
