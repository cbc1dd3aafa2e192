"""PNG and raw float32 readers/writers for RGB, depth and coded images."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

RAW_SUFFIXES = (".f32", ".raw", ".bin")


def read_rgb(path, linear: bool = True) -> np.ndarray:
    """8-bit RGB PNG to float [0, 1]; ``linear=False`` applies the sRGB decode."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if not linear:
        a = np.where(a <= 0.04045, a / 12.92, ((a + 0.055) / 1.055) ** 2.4)
    return a


def write_png8(path, img) -> None:
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path, optimize=False)


def write_png16(path, img, peak_scale: bool = False) -> None:
    a = np.asarray(img, dtype=np.float64)
    if peak_scale and a.max() > 0:
        a = a / a.max()
    a = np.round(np.clip(a, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(a).save(path)


def read_raw(path) -> np.ndarray:
    """Raw float32 file: int32 width, int32 height, then row-major samples."""
    data = Path(path).read_bytes()
    w, h = struct.unpack("<ii", data[:8])
    body = np.frombuffer(data, dtype="<f4", offset=8)
    if body.size % (w * h):
        raise ValueError(f"{path}: size does not match {w}x{h} header")
    ch = body.size // (w * h)
    return body.reshape((h, w) if ch == 1 else (h, w, ch)).astype(np.float64)


def write_raw(path, a) -> None:
    a = np.asarray(a, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<ii", a.shape[1], a.shape[0]))
        f.write(a.tobytes(order="C"))


def read_depth(path) -> np.ndarray:
    """Depth in metres from a 16-bit PNG (millimetres) or a raw float32 file."""
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        return read_raw(path)
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single-channel")
    return a.astype(np.float64) / 1000.0


def write_depth_png(path, depth_m) -> None:
    mm = np.round(np.clip(np.asarray(depth_m), 0.0, 65.535) * 1000.0).astype(np.uint16)
    Image.fromarray(mm).save(path)
