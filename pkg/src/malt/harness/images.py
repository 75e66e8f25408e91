"""Frame grids as binary PPM (P6): ``b"P6\\n<W> <H>\\n255\\n"`` then row-major RGB bytes."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def frame_grid(video: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile (B, F, H, W, 3) frames into one image: one row per video, one column per frame."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 4:
        video = video[None]
    if video.ndim != 5 or video.shape[-1] != 3:
        raise ValueError(f"expected (B, F, H, W, 3) frames, got {video.shape}")
    B, F, H, W, _ = video.shape
    out = np.ones((B * (H + pad) + pad, F * (W + pad) + pad, 3))
    for b in range(B):
        for f in range(F):
            y, x = pad + b * (H + pad), pad + f * (W + pad)
            out[y:y + H, x:x + W] = video[b, f]
    return out


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    data = img if img.dtype == np.uint8 else to_bytes(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = data.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    """Inverse of ``write_ppm`` for files it produced; returns uint8 (H, W, 3)."""
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path} is not an 8-bit P6 file")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(buf[pos + 1:], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {data.size}")
    return data.reshape(h, w, 3)
