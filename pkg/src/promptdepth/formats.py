"""On-disk formats: PFM depth maps, PNG images and masks, binary tensor tables.

Tensor table layout (little-endian), shared by weight and prompt files::

    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 data
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- PFM

def write_pfm(path, depth: np.ndarray) -> None:
    """Grayscale little-endian PFM; rows are stored bottom-to-top."""
    arr = np.asarray(depth, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"PFM writer expects a 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(np.flipud(arr)).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag != b"Pf":
            raise FormatError(f"malformed PFM header in {path}: expected 'Pf', got {tag!r}")
        dims = f.readline().split()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(f.readline().strip())
        except (ValueError, IndexError) as exc:
            raise FormatError(f"malformed PFM header in {path}") from exc
        if w <= 0 or h <= 0 or scale == 0:
            raise FormatError(f"malformed PFM header in {path}")
        endian = "<" if scale < 0 else ">"
        buf = f.read()
    if len(buf) != w * h * 4:
        raise FormatError(f"PFM payload size mismatch in {path}")
    arr = np.frombuffer(buf, dtype=endian + "f4").reshape(h, w)
    return np.flipud(arr).astype(np.float32)


# ---------------------------------------------------------------- PNG

def write_rgb_png(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise FormatError(f"mask not binary: {path} has values other than 0 and 255")
    return arr == 255


# ---------------------------------------------------------------- tensor tables

def encode_tensors(tensors: dict) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    return out.getvalue()


def decode_tensors(buf: bytes, offset: int = 0) -> tuple[dict, int]:
    """Parse a tensor table; returns ``(tensors, end_offset)``."""

    def take(n, k):
        nonlocal offset
        if offset + n > len(buf):
            raise FormatError(f"unexpected EOF at tensor {k}")
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4, 0))
    tensors = {}
    for k in range(count):
        (nlen,) = struct.unpack("<H", take(2, k))
        name = take(nlen, k).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, k))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, k))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size, k), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = data
    return tensors, offset


def write_container(path, magic: bytes, version: int, tensors: dict, extra: bytes = b"") -> None:
    """``magic | u32 version | extra | tensor table | u32 CRC32(all preceding bytes)``."""
    payload = magic + struct.pack("<I", version) + extra + encode_tensors(tensors)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_container(path, magic: bytes, version: int, extra_len: int = 0, what: str = "file") -> tuple[dict, bytes]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise FormatError(f"not a promptdepth {what}")
    if len(buf) < 8 + extra_len:
        raise FormatError("unexpected EOF at tensor 0")
    (ver,) = struct.unpack("<I", buf[4:8])
    if ver != version:
        raise FormatError(f"unsupported {what} version {ver} (expected {version})")
    extra = buf[8:8 + extra_len]
    tensors, end = decode_tensors(buf, 8 + extra_len)
    if end + 4 > len(buf):
        raise FormatError(f"unexpected EOF at tensor {len(tensors)}")
    (crc,) = struct.unpack("<I", buf[end:end + 4])
    if crc != zlib.crc32(buf[:end]) & 0xFFFFFFFF:
        raise FormatError(f"CRC mismatch in {path}")
    return tensors, extra


# ---------------------------------------------------------------- JSON

def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
