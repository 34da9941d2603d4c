"""Float image I/O and quality metrics.

Two formats: binary PPM (P6, 8-bit) for quick viewing, and a lossless
32-bit planar raw format ("VQIM") used wherever PSNR must be computed on
exact float data.
"""

from __future__ import annotations

import math
import struct

import numpy as np

_VQIM_MAGIC = b"VQIM"


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio, -10*log10(MSE), for images in [0, 1].

    Identical images report ``cap`` instead of infinity.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def write_vqim(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) float image as little-endian float32 RGB planes."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_VQIM_MAGIC + struct.pack("<II", w, h))
        for ch in range(3):
            fh.write(np.ascontiguousarray(image[:, :, ch], dtype="<f4").tobytes())


def read_vqim(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _VQIM_MAGIC:
        raise ValueError("bad image magic")
    w, h = struct.unpack_from("<II", data, 4)
    need = 12 + 12 * w * h
    if len(data) < need:
        raise ValueError("truncated image")
    planes = np.frombuffer(data, dtype="<f4", count=3 * w * h, offset=12)
    return np.ascontiguousarray(planes.reshape(3, h, w).transpose(1, 2, 0))


def write_ppm(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) float image as binary 8-bit PPM (values clipped)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = image.shape[:2]
    bytes8 = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes8.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM back as float32 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM")
    # Header: three whitespace-separated tokens (comments allowed), then
    # a single whitespace byte before the pixel payload.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=pos)
    return pix.reshape(h, w, 3).astype(np.float32) / 255.0
