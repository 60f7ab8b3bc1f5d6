"""Binary checkpoints: a text header (config echo, tensor manifest, step) and a
little-endian tensor body.

Layout::

    b"ALGNETCK" | u32 version | u64 header length | header (UTF-8) | body

Header lines are ``[config]`` followed by the training config text,
``[state]`` with ``step = N`` and ``[tensors]`` with one
``name<TAB>dtype<TAB>shape<TAB>offset<TAB>nbytes`` line per tensor. Offsets are
relative to the body start. Nothing time-dependent is written, so saving a
loaded checkpoint reproduces the original bytes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from algnet.config import TrainConfig

MAGIC = b"ALGNETCK"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param.{k}", v) for k, v in self.params.items()]
        out += [(f"adam.m.{k}", v) for k, v in self.moments_m.items()]
        out += [(f"adam.v.{k}", v) for k, v in self.moments_v.items()]
        return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    lines = ["[config]", ckpt.config.to_text().rstrip("\n"), "[state]", f"step = {ckpt.step}", "[tensors]"]
    body = []
    offset = 0
    for name, arr in ckpt.tensors():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name}\t{code}\t{shape}\t{offset}\t{len(raw)}")
        body.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(body)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not an algnet checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = raw[20:20 + hlen].decode("utf-8")
    body = memoryview(raw)[20 + hlen:]
    sections: dict[str, list[str]] = {}
    current = None
    for line in header.splitlines():
        if line in ("[config]", "[state]", "[tensors]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    if set(sections) != {"config", "state", "tensors"}:
        raise CheckpointError("checkpoint header is missing a section")
    config = TrainConfig.from_text("\n".join(sections["config"]))
    step = 0
    for line in sections["state"]:
        key, _, value = line.partition("=")
        if key.strip() == "step":
            step = int(value)
    ckpt = Checkpoint(config=config, params={}, step=step)
    for line in sections["tensors"]:
        name, code, shape_s, off_s, n_s = line.split("\t")
        off, n = int(off_s), int(n_s)
        if off + n > len(body):
            raise CheckpointError(f"tensor {name} runs past the end of the file")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        arr = np.frombuffer(body[off:off + n], dtype=_DTYPES[code]).reshape(shape)
        arr = arr.astype(arr.dtype.newbyteorder("="))  # native, writable copy
        kind, _, rest = name.partition(".")
        if kind == "param":
            ckpt.params[rest] = arr
        elif rest.startswith("m."):
            ckpt.moments_m[rest[2:]] = arr
        elif rest.startswith("v."):
            ckpt.moments_v[rest[2:]] = arr
        else:
            raise CheckpointError(f"unknown tensor entry {name!r}")
    return ckpt


def save(path: str | Path, ckpt: Checkpoint) -> None:
    """Atomic write: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes())


def state_diff(expected: dict[str, np.ndarray], found: dict[str, np.ndarray]) -> list[str]:
    """Human-readable mismatches between a model's parameters and a checkpoint's."""
    diff = [f"missing {k}" for k in expected if k not in found]
    diff += [f"unexpected {k}" for k in found if k not in expected]
    diff += [
        f"{k}: shape {found[k].shape} != {expected[k].shape}"
        for k in expected if k in found and found[k].shape != expected[k].shape
    ]
    return diff
