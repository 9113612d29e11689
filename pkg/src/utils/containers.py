"""
Binary Containers - utils/containers.py

Two little-endian formats (byte layouts in docs/FORMATS.md):

CPTX  labelled patches
    "CPTX" | u16 version | u32 count | count x record
    record = header <C H W D flags n_spectral row col : u32, timestamp : f64>
             float32 channels [C, H, W]   (spectral then auxiliary planes)
             u8 labels [D, H, W]          (255 = unlabelled)
             u8 mask [H, W]
             u8 dense truth [D, H, W]     (if flags & DENSE)
             u8 predicted classes [D, H, W] (if flags & PREDICTION)

CPCK  named float64 tensors (parameters and optimizer state)
    "CPCK" | u16 version | u32 count | count x
    (u16 name length | UTF-8 name | u8 rank | rank x u32 dims | f64 payload)
"""

import logging
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from utils.io_helpers import PathLike, atomic_write
from utils.validation import FormatError, ShapeError

logger = logging.getLogger(__name__)


# ============================================================================
# CONSTANTS
# ============================================================================

PATCH_MAGIC = b"CPTX"
CHECKPOINT_MAGIC = b"CPCK"
FORMAT_VERSION = 1

UNLABELED = 255
NUM_LAYERS = 38
NUM_SPECTRAL = 16

FLAG_DENSE = 0x1
FLAG_PREDICTION = 0x2

_FILE_HEADER = struct.Struct("<4sHI")
_RECORD_HEADER = struct.Struct("<IIIIIIIId")


# ============================================================================
# PATCH RECORD
# ============================================================================

@dataclass
class LabeledPatch:
    """
    One imager patch with sparse profile labels.

    channels   float32 [n_spectral, H, W]  reflectance / brightness temperature
    aux        float32 [A, H, W]           normalised auxiliary planes
    labels     uint8   [D, H, W]           phase codes, 255 where mask is False
    mask       bool    [H, W]              True on profiler-labelled pixels
    dense      uint8   [D, H, W] or None   full truth (synthetic data only)
    prediction uint8   [D, H, W] or None   predicted classes
    """
    channels: np.ndarray
    aux: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    dense: Optional[np.ndarray] = None
    prediction: Optional[np.ndarray] = None
    timestamp: float = 0.0
    origin: tuple[int, int] = (0, 0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float32)
        self.aux = np.ascontiguousarray(self.aux, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.dense is not None:
            self.dense = np.ascontiguousarray(self.dense, dtype=np.uint8)
        if self.prediction is not None:
            self.prediction = np.ascontiguousarray(self.prediction, dtype=np.uint8)
        self.origin = (int(self.origin[0]), int(self.origin[1]))
        self.validate()

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])

    @property
    def num_layers(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_channels(self) -> int:
        return int(self.channels.shape[0] + self.aux.shape[0])

    @property
    def mask_density(self) -> float:
        return float(self.mask.mean())

    def validate(self) -> None:
        hw = self.mask.shape
        if self.mask.ndim != 2:
            raise ShapeError("mask must be 2D", field="mask", value=self.mask.shape)
        if self.channels.ndim != 3 or self.channels.shape[1:] != hw:
            raise ShapeError(f"channels must be [C, {hw[0]}, {hw[1]}]", field="channels", value=self.channels.shape)
        if self.aux.ndim != 3 or self.aux.shape[1:] != hw:
            raise ShapeError(f"aux must be [A, {hw[0]}, {hw[1]}]", field="aux", value=self.aux.shape)
        if self.labels.ndim != 3 or self.labels.shape[1:] != hw:
            raise ShapeError(f"labels must be [D, {hw[0]}, {hw[1]}]", field="labels", value=self.labels.shape)
        for name in ("dense", "prediction"):
            volume = getattr(self, name)
            if volume is not None and volume.shape != self.labels.shape:
                raise ShapeError(f"{name} must match labels {self.labels.shape}", field=name, value=volume.shape)
        if np.any(self.labels[:, ~self.mask] != UNLABELED):
            raise FormatError("labels outside the mask must hold the 255 sentinel", field="labels")

    def model_channels(self) -> np.ndarray:
        """Spectral and auxiliary planes stacked as stored on disk."""
        return np.concatenate([self.channels, self.aux], axis=0)

    def track_pixels(self) -> list[tuple[int, int]]:
        """Masked pixels in along-track order (sorted along the longer extent)."""
        rows, cols = np.nonzero(self.mask)
        if rows.size == 0:
            return []
        if np.ptp(rows) >= np.ptp(cols):
            order = np.lexsort((cols, rows))
        else:
            order = np.lexsort((rows, cols))
        return [(int(rows[i]), int(cols[i])) for i in order]


# ============================================================================
# CPTX
# ============================================================================

def _write_patch(handle: BinaryIO, patch: LabeledPatch) -> None:
    flags = 0
    if patch.dense is not None:
        flags |= FLAG_DENSE
    if patch.prediction is not None:
        flags |= FLAG_PREDICTION
    handle.write(_RECORD_HEADER.pack(
        patch.num_channels, patch.height, patch.width, patch.num_layers, flags,
        patch.channels.shape[0], patch.origin[0], patch.origin[1], float(patch.timestamp),
    ))
    handle.write(patch.model_channels().astype("<f4").tobytes())
    handle.write(patch.labels.tobytes())
    handle.write(patch.mask.astype(np.uint8).tobytes())
    if patch.dense is not None:
        handle.write(patch.dense.tobytes())
    if patch.prediction is not None:
        handle.write(patch.prediction.tobytes())


def write_patches(path: PathLike, patches: list[LabeledPatch]) -> Path:
    """Write a CPTX container (an empty list gives a valid empty file)."""
    with atomic_write(path) as handle:
        handle.write(_FILE_HEADER.pack(PATCH_MAGIC, FORMAT_VERSION, len(patches)))
        for patch in patches:
            _write_patch(handle, patch)
    logger.info(f"Wrote {len(patches)} patches to {path}")
    return Path(path)


class _Cursor:
    def __init__(self, buffer: bytes, source: str):
        self.buffer = buffer
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.buffer):
            raise FormatError(f"truncated file {self.source} at byte {self.offset}", field="file")
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).reshape(shape).copy()

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def text(self, n: int) -> str:
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid UTF-8 name in {self.source} at byte {self.offset - n}", field="name", value=raw) from e

    def finish(self) -> None:
        if self.offset != len(self.buffer):
            raise FormatError(f"{len(self.buffer) - self.offset} trailing bytes in {self.source}", field="file")


def _read_header(cursor: _Cursor, magic: bytes) -> int:
    found, version, count = cursor.unpack(_FILE_HEADER)
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}", field="magic", value=found)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", field="version", value=version)
    return int(count)


def read_patches(path: PathLike) -> list[LabeledPatch]:
    """
    Read every record of a CPTX container.

    Raises:
        FormatError: bad magic/version or truncated payload
    """
    cursor = _Cursor(Path(path).read_bytes(), str(path))
    count = _read_header(cursor, PATCH_MAGIC)
    patches = []
    for _ in range(count):
        c, h, w, d, flags, n_spectral, row, col, timestamp = cursor.unpack(_RECORD_HEADER)
        if n_spectral > c:
            raise FormatError(f"spectral count {n_spectral} exceeds channel count {c}", field="n_spectral")
        channels = cursor.array("<f4", (c, h, w))
        labels = cursor.array("u1", (d, h, w))
        mask = cursor.array("u1", (h, w)).astype(bool)
        dense = cursor.array("u1", (d, h, w)) if flags & FLAG_DENSE else None
        prediction = cursor.array("u1", (d, h, w)) if flags & FLAG_PREDICTION else None
        patches.append(LabeledPatch(
            channels=channels[:n_spectral],
            aux=channels[n_spectral:],
            labels=labels,
            mask=mask,
            dense=dense,
            prediction=prediction,
            timestamp=timestamp,
            origin=(row, col),
        ))
    cursor.finish()
    return patches


# ============================================================================
# CPCK
# ============================================================================

def save_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> Path:
    """Write named float64 arrays (rank 0 allowed) as a CPCK file."""
    with atomic_write(path) as handle:
        handle.write(_FILE_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            data = np.asarray(array, dtype="<f8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                handle.write(struct.pack("<I", dim))
            handle.write(np.ascontiguousarray(data).tobytes())
    logger.info(f"Saved {len(tensors)} tensors to {path}")
    return Path(path)


def load_tensors(path: PathLike) -> dict[str, np.ndarray]:
    """Read a CPCK file back into an insertion-ordered name -> array map."""
    cursor = _Cursor(Path(path).read_bytes(), str(path))
    count = _read_header(cursor, CHECKPOINT_MAGIC)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", cursor.take(2))
        name = cursor.text(length)
        if name in tensors:
            raise FormatError(f"duplicate tensor name '{name}' in {path}", field="name", value=name)
        (rank,) = struct.unpack("<B", cursor.take(1))
        shape = tuple(struct.unpack("<I", cursor.take(4))[0] for _ in range(rank))
        tensors[name] = cursor.array("<f8", shape).astype(np.float64)
    cursor.finish()
    return tensors
