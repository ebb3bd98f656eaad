"""Binary formats: VVOL volumes, network checkpoints, phantom dataset folders.

VVOL layout (little-endian)::

    b"VVOL" | version u32 | dtype u8 (0 = f32, 1 = u8) | D, H, W u32
            | spacing f32 x 3 (mm) | payload, W fastest

Checkpoint layout (little-endian)::

    b"I2I3DCKPT" | version u32 | spec digest (32 bytes) | entry count u32
    entries: name_len u16 | name utf-8 | rank u8 | dims u32 x rank | f32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
CKPT_MAGIC = b"I2I3DCKPT"
CKPT_VERSION = 1

_VVOL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class SpecMismatchError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.what}: truncated file (needed {n} bytes at offset {self.pos}, size {len(self.buf)})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# -- VVOL --------------------------------------------------------------------


@dataclass
class Volume:
    data: np.ndarray  # (D, H, W) float32 or uint8
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def write_vvol(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"VVOL stores 3D volumes, got shape {data.shape}")
    if data.dtype == np.uint8 or data.dtype == bool:
        code, payload = 1, data.astype("u1")
    else:
        code, payload = 0, data.astype("<f4")
    header = VVOL_MAGIC + struct.pack("<IB3I3f", VVOL_VERSION, code, *data.shape, *spacing)
    Path(path).write_bytes(header + np.ascontiguousarray(payload).tobytes())


def read_vvol(path) -> Volume:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != VVOL_MAGIC:
        raise BadMagicError(f"{path}: bad magic (not a VVOL file)")
    (version,) = r.unpack("<I")
    if version != VVOL_VERSION:
        raise VersionMismatchError(f"{path}: VVOL version {version}, expected {VVOL_VERSION}")
    (code,) = r.unpack("<B")
    if code not in _VVOL_DTYPES:
        raise FormatError(f"{path}: unknown VVOL dtype code {code}")
    dims = r.unpack("<3I")
    spacing = r.unpack("<3f")
    dtype = _VVOL_DTYPES[code]
    raw = r.take(int(np.prod(dims)) * dtype.itemsize)
    data = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return Volume(data.astype(np.float32 if code == 0 else np.uint8), tuple(spacing))


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(params, path, spec) -> None:
    """Write ``params`` (a NetworkParams) tagged with the digest of ``spec``."""
    arrays = params.arrays()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), spec.digest(), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Raw (digest, name -> float32 array) contents of a checkpoint file."""
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic (not an I2I3DCKPT checkpoint)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    digest = r.take(32)
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        raw = r.take(int(np.prod(dims)) * 4)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes after last entry")
    return digest, arrays


def load_checkpoint(path, spec, rng=0):
    """Build a network for ``spec`` and fill it from the checkpoint at ``path``."""
    from .nets import build_network

    digest, arrays = read_checkpoint(path)
    net = build_network(spec, rng)
    expected = net.params.tensors()
    for name, t in expected.items():
        if name not in arrays:
            raise ShapeMismatchError(f"{path}: shape mismatch at layer {name}: missing from checkpoint")
        if arrays[name].shape != t.shape:
            raise ShapeMismatchError(
                f"{path}: shape mismatch at layer {name}: checkpoint {arrays[name].shape}, spec expects {t.shape}"
            )
    extra = [n for n in arrays if n not in expected]
    if extra:
        raise ShapeMismatchError(f"{path}: shape mismatch at layer {extra[0]}: not present in spec")
    if digest != spec.digest():
        raise SpecMismatchError(f"{path}: checkpoint was written for a different network spec")
    net.params.assign(arrays)
    return net


# -- phantom dataset folders ---------------------------------------------------


def write_case(folder, sample, meta: dict, spacing=(1.0, 1.0, 1.0)) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    write_vvol(folder / "image.vvol", sample.volume, spacing)
    write_vvol(folder / "wall.vvol", sample.wall_labels.astype(np.uint8), spacing)
    write_vvol(folder / "vessel.vvol", sample.vessel_labels.astype(np.uint8), spacing)
    (folder / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_case(folder) -> dict:
    folder = Path(folder)
    return {
        "name": folder.name,
        "image": read_vvol(folder / "image.vvol").data,
        "wall": read_vvol(folder / "wall.vvol").data.astype(bool),
        "vessel": read_vvol(folder / "vessel.vvol").data.astype(bool),
        "meta": json.loads((folder / "meta.json").read_text()),
    }


def list_cases(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "image.vvol").exists())
