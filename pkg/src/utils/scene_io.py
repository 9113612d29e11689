"""
Scene and Track I/O - utils/scene_io.py

PURPOSE:
--------
Reads and writes the two collocation inputs.

Imager scene = <name>.json sidecar + <name>.bin payload
    sidecar: {"version": 1, "height": H, "width": W, "timestamp": ISO-8601,
              "channels": [16 band names], "planes": [plane names in payload order],
              "geo": {"type": "regular", "lat0", "lon0", "dlat", "dlon"}
                   | {"type": "explicit"}}
    payload: little-endian float32 planes [len(planes), H, W]. Planes are
             the 16 bands, then sat_zenith, sol_zenith, night, and lat, lon
             when geo.type == "explicit".

Profiler track CSV (ragged rows, header optional):
    time_iso8601, lat, lon, base_km, top_km, phase[, base_km, top_km, phase ...]
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from utils.io_helpers import PathLike, atomic_write
from utils.validation import FormatError, RangeValidationError, ShapeError

logger = logging.getLogger(__name__)

NUM_BANDS = 16
# bands 1-6 visible/near-IR reflectance, 7-16 infrared brightness temperature
VIS_BANDS = tuple(range(0, 6))
TIR_BANDS = tuple(range(6, NUM_BANDS))
TOP_KM = 19.0
PHASE_CODES = (1, 2, 3)
SIDECAR_VERSION = 1

_EPOCH = pd.Timestamp(0, tz="UTC")


# ============================================================================
# TIME HELPERS
# ============================================================================

def to_seconds(value: Any) -> float:
    """ISO-8601 string / Timestamp / number -> UTC seconds since epoch."""
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    ts = pd.Timestamp(value)
    ts = ts.tz_localize("UTC") if ts.tzinfo is None else ts.tz_convert("UTC")
    return float((ts - _EPOCH) / pd.Timedelta(seconds=1))


def to_iso(seconds: float) -> str:
    return pd.Timestamp(seconds, unit="s", tz="UTC").isoformat().replace("+00:00", "Z")


# ============================================================================
# DOMAIN RECORDS
# ============================================================================

@dataclass
class ImagerScene:
    """One geostationary imager scene on a per-pixel lat/lon grid."""
    timestamp: float
    lat: np.ndarray
    lon: np.ndarray
    channels: np.ndarray
    sat_zenith: np.ndarray
    sol_zenith: np.ndarray
    night: np.ndarray
    name: str = "scene"
    band_names: list[str] = field(default_factory=lambda: [f"B{i + 1:02d}" for i in range(NUM_BANDS)])

    def __post_init__(self) -> None:
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.channels = np.asarray(self.channels, dtype=np.float32)
        self.sat_zenith = np.asarray(self.sat_zenith, dtype=np.float64)
        self.sol_zenith = np.asarray(self.sol_zenith, dtype=np.float64)
        self.night = np.asarray(self.night, dtype=bool)
        self.timestamp = float(self.timestamp)
        self.validate()

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.lat.shape[0]), int(self.lat.shape[1])

    def validate(self) -> None:
        if self.lat.ndim != 2:
            raise ShapeError("lat grid must be 2D", field="lat", value=self.lat.shape)
        hw = self.lat.shape
        for name in ("lon", "sat_zenith", "sol_zenith", "night"):
            if getattr(self, name).shape != hw:
                raise ShapeError(f"{name} must match lat grid {hw}", field=name, value=getattr(self, name).shape)
        if self.channels.shape != (NUM_BANDS, *hw):
            raise ShapeError(f"channels must be [{NUM_BANDS}, {hw[0]}, {hw[1]}]", field="channels", value=self.channels.shape)
        if np.any(np.abs(self.lat) > 90.0):
            raise RangeValidationError("latitude outside [-90, 90]", field="lat")
        if np.any(np.abs(self.lon) > 180.0):
            raise RangeValidationError("longitude outside [-180, 180]", field="lon")
        if not _monotone(self.lat, axis=0):
            raise RangeValidationError("latitude must be monotone down the rows", field="lat")
        if not _monotone(self.lon, axis=1):
            raise RangeValidationError("longitude must be monotone along the columns", field="lon")


def _monotone(grid: np.ndarray, axis: int) -> bool:
    if grid.shape[axis] < 2:
        return True
    d = np.diff(grid, axis=axis)
    return bool(np.all(d >= 0) or np.all(d <= 0))


@dataclass(frozen=True)
class ProfilerShot:
    """One active-sensor footprint with its reported cloud layers (km, phase code)."""
    time: float
    lat: float
    lon: float
    layers: tuple[tuple[float, float, int], ...] = ()

    def __post_init__(self) -> None:
        validate_layers(self.layers)
        if abs(self.lat) > 90.0 or abs(self.lon) > 180.0:
            raise RangeValidationError("shot position out of range", field="lat/lon", value=(self.lat, self.lon))


def validate_layers(layers: Any) -> None:
    """
    Raises:
        RangeValidationError: base >= top, outside [0, 19] km, bad phase,
            or overlapping layers
    """
    ordered = sorted(layers, key=lambda layer: layer[0])
    previous_top = None
    for base, top, phase in ordered:
        if not (0.0 <= base < top <= TOP_KM):
            raise RangeValidationError(f"need 0 <= base < top <= {TOP_KM}", field="layer", value=(base, top))
        if phase not in PHASE_CODES:
            raise RangeValidationError(f"phase must be one of {PHASE_CODES}", field="phase", value=phase)
        if previous_top is not None and base < previous_top:
            raise RangeValidationError("layers overlap", field="layer", value=(base, top))
        previous_top = top


# ============================================================================
# SCENE DIRECTORIES
# ============================================================================

def _geo_spec(scene: ImagerScene) -> Optional[dict[str, float]]:
    """Regular-grid spec if the lat/lon planes are an exact outer product."""
    lat_col, lon_row = scene.lat[:, 0], scene.lon[0, :]
    if not (np.array_equal(scene.lat, np.repeat(lat_col[:, None], scene.lon.shape[1], axis=1))
            and np.array_equal(scene.lon, np.repeat(lon_row[None, :], scene.lat.shape[0], axis=0))):
        return None
    h, w = scene.shape
    dlat = float(lat_col[1] - lat_col[0]) if h > 1 else 0.0
    dlon = float(lon_row[1] - lon_row[0]) if w > 1 else 0.0
    regular_lat = scene.lat[0, 0] + dlat * np.arange(h)
    regular_lon = scene.lon[0, 0] + dlon * np.arange(w)
    if not (np.array_equal(regular_lat, lat_col) and np.array_equal(regular_lon, lon_row)):
        return None
    return {"type": "regular", "lat0": float(scene.lat[0, 0]), "lon0": float(scene.lon[0, 0]),
            "dlat": dlat, "dlon": dlon}


def write_scene(directory: PathLike, scene: ImagerScene) -> Path:
    """Write ``scene`` as <name>.json + <name>.bin into ``directory``."""
    directory = Path(directory)
    geo = _geo_spec(scene) or {"type": "explicit"}
    planes = list(scene.band_names) + ["sat_zenith", "sol_zenith", "night"]
    stack = [scene.channels.astype(np.float32),
             np.stack([scene.sat_zenith, scene.sol_zenith, scene.night]).astype(np.float32)]
    if geo["type"] == "explicit":
        planes += ["lat", "lon"]
        stack.append(np.stack([scene.lat, scene.lon]).astype(np.float32))
    payload = np.concatenate(stack, axis=0).astype("<f4")

    sidecar = {
        "version": SIDECAR_VERSION,
        "height": scene.shape[0],
        "width": scene.shape[1],
        "timestamp": to_iso(scene.timestamp),
        "channels": list(scene.band_names),
        "planes": planes,
        "geo": geo,
    }
    with atomic_write(directory / f"{scene.name}.bin") as f:
        f.write(payload.tobytes())
    with atomic_write(directory / f"{scene.name}.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
    return directory / f"{scene.name}.json"


def read_scene(sidecar_path: PathLike) -> ImagerScene:
    """
    Read one scene from its JSON sidecar (payload next to it).

    Raises:
        FormatError: malformed sidecar or payload size mismatch
    """
    sidecar_path = Path(sidecar_path)
    try:
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
        h, w = int(meta["height"]), int(meta["width"])
        planes = list(meta["planes"])
        geo = meta["geo"]
        timestamp = to_seconds(meta["timestamp"])
        band_names = list(meta["channels"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed scene sidecar {sidecar_path}: {e}", field="sidecar", value=str(sidecar_path)) from e
    if meta.get("version") != SIDECAR_VERSION:
        raise FormatError(f"unsupported sidecar version {meta.get('version')}", field="version", value=meta.get("version"))

    payload_path = sidecar_path.with_suffix(".bin")
    raw = np.fromfile(payload_path, dtype="<f4") if payload_path.exists() else None
    if raw is None or raw.size != len(planes) * h * w:
        raise FormatError(
            f"payload {payload_path} does not hold {len(planes)} planes of {h}x{w}",
            field="payload", value=str(payload_path),
        )
    cube = raw.reshape(len(planes), h, w)
    index = {name: i for i, name in enumerate(planes)}
    missing = [p for p in band_names + ["sat_zenith", "sol_zenith", "night"] if p not in index]
    if missing:
        raise FormatError(f"payload is missing planes {missing}", field="planes", value=missing)

    if geo.get("type") == "regular":
        lat = np.repeat((geo["lat0"] + geo["dlat"] * np.arange(h))[:, None], w, axis=1)
        lon = np.repeat((geo["lon0"] + geo["dlon"] * np.arange(w))[None, :], h, axis=0)
    elif geo.get("type") == "explicit" and "lat" in index and "lon" in index:
        lat = cube[index["lat"]].astype(np.float64)
        lon = cube[index["lon"]].astype(np.float64)
    else:
        raise FormatError(f"unsupported geo spec {geo}", field="geo", value=geo)

    return ImagerScene(
        timestamp=timestamp,
        lat=lat,
        lon=lon,
        channels=np.stack([cube[index[b]] for b in band_names]),
        sat_zenith=cube[index["sat_zenith"]],
        sol_zenith=cube[index["sol_zenith"]],
        night=cube[index["night"]] > 0.5,
        name=sidecar_path.stem,
        band_names=band_names,
    )


def read_scene_dir(directory: PathLike) -> list[ImagerScene]:
    """Every scene under ``directory``, sorted by timestamp then name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"scene directory not found: {directory}", field="scenes", value=str(directory))
    scenes = [read_scene(p) for p in sorted(directory.glob("*.json"))]
    scenes.sort(key=lambda s: (s.timestamp, s.name))
    logger.info(f"Read {len(scenes)} scenes from {directory}", extra={"scenes": len(scenes)})
    return scenes


# ============================================================================
# PROFILER TRACKS
# ============================================================================

def _phase_code(value: float, line_no: int) -> int:
    if not float(value).is_integer():
        raise RangeValidationError(f"line {line_no}: phase code must be a whole number", field="phase", value=value)
    return int(value)


def read_tracks(path: PathLike) -> list[ProfilerShot]:
    """
    Parse a ragged track CSV into shots, in file order.

    Raises:
        FormatError: unreadable file, bad arity or unparsable values
        RangeValidationError: fractional phase codes or invalid layers
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = [row for row in csv.reader(f) if row and any(cell.strip() for cell in row)]
    except OSError as e:
        raise FormatError(f"cannot read track file {path}: {e}", field="tracks", value=str(path)) from e

    if rows and rows[0][0].strip().lower().startswith("time"):
        rows = rows[1:]
    if not rows:
        return []

    try:
        times = pd.to_datetime([r[0].strip() for r in rows], utc=True, format="ISO8601")
    except (ValueError, TypeError) as e:
        raise FormatError(f"unparsable time in {path}: {e}", field="time_iso8601") from e
    seconds = ((times - _EPOCH) / pd.Timedelta(seconds=1)).to_numpy(dtype=np.float64)

    shots = []
    for line_no, (row, t) in enumerate(zip(rows, seconds), start=1):
        cells = [c.strip() for c in row if c.strip() != ""]
        if len(cells) < 3 or (len(cells) - 3) % 3 != 0:
            raise FormatError(f"line {line_no}: expected time, lat, lon then base/top/phase triples", field="tracks", value=row)
        try:
            values = [float(c) for c in cells[1:]]
            layers = tuple(
                (values[i], values[i + 1], _phase_code(values[i + 2], line_no))
                for i in range(2, len(values), 3)
            )
            shots.append(ProfilerShot(time=float(t), lat=values[0], lon=values[1], layers=layers))
        except ValueError as e:
            raise FormatError(f"line {line_no}: {e}", field="tracks", value=row) from e
    logger.info(f"Read {len(shots)} profiler shots from {path}", extra={"shots": len(shots)})
    return shots


def write_tracks(path: PathLike, shots: list[ProfilerShot]) -> Path:
    with atomic_write(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["time_iso8601", "lat", "lon", "base_km", "top_km", "phase"])
        for shot in shots:
            row: list[Any] = [to_iso(shot.time), repr(float(shot.lat)), repr(float(shot.lon))]
            for base, top, phase in shot.layers:
                row += [repr(float(base)), repr(float(top)), int(phase)]
            writer.writerow(row)
    return Path(path)
