"""
Phase Strip Images - visualization/strips.py

RESPONSIBILITIES:
-----------------
Along-track vertical cross-sections of phase volumes as portable
pixmaps (P6, colour by phase) and graymaps (P5, cloud mask).

CRITICAL RULES:
--------------
- ACCEPT PREPARED DATA ONLY - class volumes and track pixels in
- Row 0 of every image is the highest layer (altitude increases upward)
- Image height is num_layers * scale, width is track length * scale
"""

from collections.abc import Sequence
from pathlib import Path

import numpy as np

from utils.containers import UNLABELED
from utils.io_helpers import PathLike, atomic_write
from utils.validation import ShapeError, ValidationError


# ============================================================================
# PALETTE
# ============================================================================

# clear, ice, mixed, liquid
PHASE_PALETTE = np.array([
    [255, 255, 255],
    [0, 0, 255],
    [255, 0, 0],
    [0, 160, 0],
], dtype=np.uint8)

UNLABELED_RGB = (128, 128, 128)
CLOUD_GRAY = 0
CLEAR_GRAY = 255
UNLABELED_GRAY = 128


# ============================================================================
# STRIPS
# ============================================================================

def track_strip(volume: np.ndarray, pixels: Sequence[tuple[int, int]]) -> np.ndarray:
    """[D, H, W] class volume sampled at track pixels -> [D, n] in track order."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeError("volume must be [D,H,W]", field="volume", value=volume.shape)
    if len(pixels) == 0:
        return np.zeros((volume.shape[0], 0), dtype=volume.dtype)
    rows, cols = np.asarray(pixels, dtype=np.int64).T
    return volume[:, rows, cols]


def phase_rgb(strip: np.ndarray) -> np.ndarray:
    """[D, n] classes -> [D, n, 3] uint8, top layer first."""
    strip = np.asarray(strip)
    if strip.ndim != 2:
        raise ShapeError("strip must be [D,n]", field="strip", value=strip.shape)
    labelled = strip != UNLABELED
    if np.any(strip[labelled] >= len(PHASE_PALETTE)):
        raise ValidationError("strip holds codes outside the palette", field="strip")
    rgb = np.empty(strip.shape + (3,), dtype=np.uint8)
    rgb[:] = UNLABELED_RGB
    rgb[labelled] = PHASE_PALETTE[strip[labelled].astype(np.intp)]
    return rgb[::-1]


def mask_gray(strip: np.ndarray) -> np.ndarray:
    """[D, n] classes -> [D, n] uint8 cloud mask (black cloud on white), top layer first."""
    strip = np.asarray(strip)
    gray = np.where(strip == 0, CLEAR_GRAY, CLOUD_GRAY).astype(np.uint8)
    gray[strip == UNLABELED] = UNLABELED_GRAY
    return gray[::-1]


def _upscale(image: np.ndarray, scale: int) -> np.ndarray:
    if scale < 1:
        raise ValidationError("scale must be >= 1", field="scale", value=scale)
    return np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)


def write_ppm(path: PathLike, rgb: np.ndarray, scale: int = 1) -> Path:
    """Binary P6 pixmap, maxval 255."""
    image = _upscale(np.asarray(rgb, dtype=np.uint8), scale)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError("pixmap must be [rows, cols, 3]", field="rgb", value=image.shape)
    height, width = image.shape[:2]
    with atomic_write(path) as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())
    return Path(path)


def write_pgm(path: PathLike, gray: np.ndarray, scale: int = 1) -> Path:
    """Binary P5 graymap, maxval 255."""
    image = _upscale(np.asarray(gray, dtype=np.uint8), scale)
    if image.ndim != 2:
        raise ShapeError("graymap must be [rows, cols]", field="gray", value=image.shape)
    height, width = image.shape
    with atomic_write(path) as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())
    return Path(path)


def read_pnm(path: PathLike) -> np.ndarray:
    """Read back a P5/P6 file written by this module."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise ValidationError(f"{path} is not a binary PGM/PPM", field="path", value=str(path))
    width, height = (int(v) for v in parts[1].split())
    channels = 3 if parts[0] == b"P6" else 1
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != width * height * channels:
        raise ValidationError(f"{path} is truncated", field="path", value=str(path))
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape)
