"""PFM / PNG image files and the raw little-endian f32 matrix format."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

GAMMA = 2.2


def write_pfm(path, image: np.ndarray):
    """Write an ``(H, W, 3)`` (or ``(H, W)``) float image; little-endian, rows bottom-to-top."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    if color and img.shape[2] != 3:
        raise ValueError("PFM color images need 3 channels")
    h, w = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    ch = 3 if color else 1
    count = w * h * ch
    body = data[m.end():]
    if len(body) < count * 4:
        raise ValueError(f"{path}: truncated PFM data")
    img = np.frombuffer(body, dtype=dtype, count=count).reshape(h, w, ch)[::-1]
    img = img.astype(np.float64)
    return img if color else img[..., 0]


def to_srgb8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) ** (1.0 / GAMMA) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray):
    """Tone-map linear RGB with gamma 2.2 and save as 8-bit PNG."""
    Image.fromarray(to_srgb8(image)).save(path)


def read_png(path) -> np.ndarray:
    """8-bit PNG to linear RGB in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr ** GAMMA


def read_image(path) -> np.ndarray:
    path = Path(path)
    return read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def write_matrix(path, matrix: np.ndarray):
    """Raw f32 row-major matrix plus a ``<path>.json`` header with rows and dim."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    Path(path).write_bytes(m.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"rows": int(m.shape[0]), "dim": int(m.shape[1])}))


def read_matrix(path) -> np.ndarray:
    header = json.loads(Path(str(path) + ".json").read_text())
    rows, dim = int(header["rows"]), int(header["dim"])
    data = Path(path).read_bytes()
    if len(data) != rows * dim * 4:
        raise ValueError(f"{path}: expected {rows}x{dim} f32 values, found {len(data) // 4}")
    return np.frombuffer(data, dtype="<f4").reshape(rows, dim).copy()
