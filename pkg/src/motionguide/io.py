"""On-disk formats: the MCLT tensor container, key=value manifests, PGM images.

MCLT record layout (all little-endian)::

    b"MCLT" | u8 version=1 | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | f32 payload

A file may hold several records back to back.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"MCLT"
VERSION = 1
DTYPE_F32 = 0


class ContainerError(ValueError):
    """Raised for corrupt, truncated, or mismatched persisted files."""


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ContainerError("too many dims for MCLT")
    head = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensors(buf: bytes) -> list[np.ndarray]:
    out = []
    pos = 0
    while pos < len(buf):
        if buf[pos:pos + 4] != MAGIC:
            raise ContainerError(f"bad magic at byte {pos}")
        if pos + 7 > len(buf):
            raise ContainerError("truncated header")
        version, dtype, ndim = struct.unpack_from("<BBB", buf, pos + 4)
        if version != VERSION:
            raise ContainerError(f"unsupported MCLT version {version}")
        if dtype != DTYPE_F32:
            raise ContainerError(f"unsupported dtype code {dtype}")
        pos += 7
        if pos + 4 * ndim > len(buf):
            raise ContainerError("truncated dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise ContainerError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float32)
        out.append(arr.reshape(dims))
        pos += nbytes
    return out


def save_tensors(path: str | os.PathLike, arrays: Iterable[np.ndarray]) -> None:
    data = b"".join(encode_tensor(a) for a in arrays)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> list[np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def save_tensor(path, arr) -> None:
    save_tensors(path, [arr])


def load_tensor(path) -> np.ndarray:
    arrs = load_tensors(path)
    if len(arrs) != 1:
        raise ContainerError(f"{path}: expected one tensor, found {len(arrs)}")
    return arrs[0]


def write_manifest(path, items: Mapping[str, object]) -> None:
    lines = []
    for k, v in items.items():
        if "=" in k or "\n" in str(v):
            raise ContainerError(f"manifest entry {k!r} not representable")
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContainerError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def to_u8(img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    x = (np.clip(img, lo, hi) - lo) / (hi - lo)
    return np.round(x * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    """Binary 8-bit PGM; values linearly mapped from [lo, hi]."""
    u8 = to_u8(np.asarray(img, dtype=np.float64), lo, hi)
    h, w = u8.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + u8.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ContainerError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def write_frames(out_dir, clip: np.ndarray) -> list[Path]:
    """Dump a (f, ch, h, w) clip as ``frame_%03d.pgm`` (first channel)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip):
        p = out_dir / f"frame_{i:03d}.pgm"
        write_pgm(p, frame[0])
        paths.append(p)
    return paths
