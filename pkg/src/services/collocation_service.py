"""
Collocation Service - services/collocation_service.py

RESPONSIBILITIES:
-----------------
Turns imager scenes plus profiler tracks into sparse-labelled patches:

    shots --region filter--> match_temporal (+-window_s, earlier scene on ties)
          --> match_spatial (haversine nearest pixel, smallest (row, col) on ties)
          --> bin_profile (38 x 500 m layers) per shot
          --> aggregate_shots per pixel (plurality; cloud beats clear, lower code on ties)
          --> extract_patches (patch x patch windows along the track)

CRITICAL RULES:
--------------
- Layer bin k spans [0.5k, 0.5(k+1)) km; a bin takes a phase only if the
  overlap is strictly positive
- Where layers of different phase share a bin, the phase with the larger
  total overlap (compared at 1 m resolution) wins; ties go to the lower code
- Labels outside the mask are the 255 sentinel
- Output patch order is (scene timestamp, patch row, patch col) whatever
  order scenes were processed in
"""

import bisect
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np
from sklearn.neighbors import BallTree

from utils.containers import NUM_LAYERS, UNLABELED, LabeledPatch
from utils.logging_config import RunLogger
from utils.scene_io import PHASE_CODES, ImagerScene, ProfilerShot, validate_layers
from utils.validation import RangeValidationError, ValidationError, require_range

logger = logging.getLogger(__name__)

# Type alias: uint8 [38] with values in {0, 1, 2, 3}
LayerLabelVector = np.ndarray

LAYER_KM = 0.5
EARTH_RADIUS_KM = 6371.0088
DEFAULT_WINDOW_S = 300
DEFAULT_PATCH = 128

REGION_PRESETS: dict[str, tuple[float, float, float, float]] = {
    # lon_min, lon_max, lat_min, lat_max
    "western_pacific": (100.0, 160.0, -60.0, 60.0),
}

# cloud before clear, then lower code
_VOTE_PRIORITY = np.array([1, 2, 3, 0])


# ============================================================================
# REGION FILTER
# ============================================================================

@dataclass(frozen=True)
class Region:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self) -> None:
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise RangeValidationError("region bounds must satisfy min < max", field="region", value=self.bounds)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.lon_min, self.lon_max, self.lat_min, self.lat_max)

    def contains(self, lat: float, lon: float) -> bool:
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max

    @classmethod
    def resolve(cls, value: Union[None, str, Sequence[float], "Region"]) -> Optional["Region"]:
        """Preset name, 4-sequence (lon_min, lon_max, lat_min, lat_max) or None."""
        if value is None or isinstance(value, Region):
            return value
        if isinstance(value, str):
            if value not in REGION_PRESETS:
                raise ValidationError(f"unknown region preset; known: {sorted(REGION_PRESETS)}", field="region", value=value)
            return cls(*REGION_PRESETS[value])
        bounds = tuple(float(v) for v in value)
        if len(bounds) != 4:
            raise ValidationError("region needs lon_min, lon_max, lat_min, lat_max", field="region", value=value)
        return cls(*bounds)


def filter_region(shots: Iterable[ProfilerShot], region: Optional[Region]) -> list[ProfilerShot]:
    if region is None:
        return list(shots)
    return [s for s in shots if region.contains(s.lat, s.lon)]


# ============================================================================
# TEMPORAL MATCHING
# ============================================================================

def match_temporal(shot_time: float, scene_times: Sequence[float], window_s: float = DEFAULT_WINDOW_S) -> Optional[int]:
    """
    Index of the scene closest in time, within +-window_s.

    Ties go to the earlier scene. Returns None for an empty list or when
    no scene is inside the window.

    Raises:
        ValidationError: scene_times not strictly increasing, negative window
    """
    require_range("window_s", window_s, low=0)
    n = len(scene_times)
    if n == 0:
        return None
    if any(b <= a for a, b in zip(scene_times, scene_times[1:])):
        raise ValidationError("scene times must be strictly increasing", field="scene_times")

    pos = bisect.bisect_left(scene_times, shot_time)
    best: Optional[int] = None
    best_dt = math.inf
    # earlier candidate first so a tie keeps it
    for i in (pos - 1, pos):
        if 0 <= i < n:
            dt = abs(shot_time - scene_times[i])
            if dt < best_dt:
                best, best_dt = i, dt
    return best if best_dt <= window_s else None


# ============================================================================
# SPATIAL MATCHING
# ============================================================================

def haversine_km(lat1: Any, lon1: Any, lat2: Any, lon2: Any) -> np.ndarray:
    """Great-circle distance in km (inputs in degrees, broadcastable)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


class SpatialIndex:
    """
    Nearest-pixel lookup on one scene grid (BallTree, haversine metric).

    Pixels within ``tie_tolerance`` radians of the best distance count as
    tied; the smallest (row, col) wins.
    """

    def __init__(self, lat: np.ndarray, lon: np.ndarray, tie_tolerance: float = 1e-12):
        self.shape = lat.shape
        self.tie_tolerance = tie_tolerance
        points = np.column_stack([np.radians(lat.ravel()), np.radians(lon.ravel())])
        self.tree = BallTree(points, metric="haversine")

    @classmethod
    def for_scene(cls, scene: ImagerScene) -> "SpatialIndex":
        return cls(scene.lat, scene.lon)

    def query(self, lat: float, lon: float) -> tuple[int, int, float]:
        """(row, col, distance_km) of the nearest pixel."""
        point = np.radians([[lat, lon]])
        dist, _ = self.tree.query(point, k=1)
        best = float(dist[0, 0])
        radius = best + self.tie_tolerance + best * 1e-12
        candidates = self.tree.query_radius(point, r=radius)[0]
        flat = int(candidates.min())
        row, col = divmod(flat, self.shape[1])
        return row, col, best * EARTH_RADIUS_KM


def match_spatial(shot_lat: float, shot_lon: float, scene: Union[ImagerScene, SpatialIndex]) -> tuple[int, int]:
    """Pixel (row, col) nearest to the shot by great-circle distance."""
    index = scene if isinstance(scene, SpatialIndex) else SpatialIndex.for_scene(scene)
    row, col, _ = index.query(shot_lat, shot_lon)
    return row, col


def grid_spacing_km(scene: ImagerScene) -> float:
    """Median neighbour distance along rows and columns."""
    steps = []
    if scene.shape[0] > 1:
        steps.append(haversine_km(scene.lat[:-1, :], scene.lon[:-1, :], scene.lat[1:, :], scene.lon[1:, :]).ravel())
    if scene.shape[1] > 1:
        steps.append(haversine_km(scene.lat[:, :-1], scene.lon[:, :-1], scene.lat[:, 1:], scene.lon[:, 1:]).ravel())
    if not steps:
        return 0.0
    return float(np.median(np.concatenate(steps)))


# ============================================================================
# PROFILE BINNING AND AGGREGATION
# ============================================================================

def validate_label_vector(vector: Any, num_layers: int = NUM_LAYERS) -> LayerLabelVector:
    v = np.asarray(vector)
    if v.shape != (num_layers,):
        raise ValidationError(f"label vector must have length {num_layers}", field="labels", value=v.shape)
    if np.any((v < 0) | (v > 3)):
        raise RangeValidationError("label codes must be in {0, 1, 2, 3}", field="labels")
    return v.astype(np.uint8)


def bin_profile(layers: Iterable[tuple[float, float, int]], num_layers: int = NUM_LAYERS) -> LayerLabelVector:
    """
    Rasterise (base_km, top_km, phase) layers onto 500 m bins.

    Example:
        >>> bin_profile([(1.2, 2.9, 3)]).nonzero()[0].tolist()
        [2, 3, 4, 5]

    Raises:
        RangeValidationError: base >= top, out-of-range heights, bad phase, overlap
    """
    layers = [(float(b), float(t), int(p)) for b, t, p in layers]
    validate_layers(layers)
    # overlap in whole millimetres per (bin, phase)
    overlap_mm = np.zeros((num_layers, 4), dtype=np.int64)
    touched = np.zeros((num_layers, 4), dtype=bool)
    for base, top, phase in layers:
        first = max(0, int(math.floor(base / LAYER_KM)))
        last = min(num_layers - 1, int(math.ceil(top / LAYER_KM)))
        for k in range(first, last + 1):
            overlap = min(top, LAYER_KM * (k + 1)) - max(base, LAYER_KM * k)
            if overlap > 0:
                touched[k, phase] = True
                overlap_mm[k, phase] += int(round(overlap * 1000.0))

    labels = np.zeros(num_layers, dtype=np.uint8)
    for k in np.nonzero(touched.any(axis=1))[0]:
        scores = np.where(touched[k], overlap_mm[k], -1)
        labels[k] = int(np.argmax(scores))  # argmax keeps the lowest code on ties
    return labels


def unbin_profile(vector: LayerLabelVector) -> list[tuple[float, float, int]]:
    """Merge runs of equal non-zero codes back into (base_km, top_km, phase) layers."""
    v = validate_label_vector(vector, num_layers=len(vector))
    layers: list[tuple[float, float, int]] = []
    k = 0
    while k < len(v):
        code = int(v[k])
        if code == 0:
            k += 1
            continue
        start = k
        while k < len(v) and v[k] == code:
            k += 1
        layers.append((LAYER_KM * start, LAYER_KM * k, code))
    return layers


def aggregate_shots(vectors: Sequence[LayerLabelVector]) -> LayerLabelVector:
    """
    Per-layer plurality vote over the binned profiles of one pixel.

    Each shot has one vote per layer. Ties prefer cloud over clear, then
    the lower phase code. Invariant under reordering of ``vectors``.

    Raises:
        ValidationError: empty shot list
    """
    if len(vectors) == 0:
        raise ValidationError("cannot aggregate an empty shot list", field="shots")
    stack = np.stack([np.asarray(v, dtype=np.int64) for v in vectors])
    counts = np.stack([(stack == code).sum(axis=0) for code in _VOTE_PRIORITY], axis=1)
    return _VOTE_PRIORITY[np.argmax(counts, axis=1)].astype(np.uint8)


# ============================================================================
# PATCH EXTRACTION
# ============================================================================

def build_aux_planes(scene: ImagerScene, include_sat_zenith: bool = False) -> np.ndarray:
    """[lat/90, lon/180, cos(solar zenith), night] (+ cos(satellite zenith))."""
    planes = [
        scene.lat / 90.0,
        scene.lon / 180.0,
        np.cos(np.radians(scene.sol_zenith)),
        scene.night.astype(np.float64),
    ]
    if include_sat_zenith:
        planes.append(np.cos(np.radians(scene.sat_zenith)))
    return np.stack(planes).astype(np.float32)


def _track_order(pixels: np.ndarray) -> np.ndarray:
    rows, cols = pixels[:, 0], pixels[:, 1]
    if np.ptp(rows) >= np.ptp(cols):
        return np.lexsort((cols, rows))
    return np.lexsort((rows, cols))


def _segments(pixels: np.ndarray, patch: int) -> list[np.ndarray]:
    """Greedy runs of consecutive track pixels whose bounding box fits in a patch."""
    segments: list[list[int]] = []
    lo = hi = None
    for i, p in enumerate(pixels):
        if lo is not None:
            new_lo, new_hi = np.minimum(lo, p), np.maximum(hi, p)
            if np.all(new_hi - new_lo < patch):
                segments[-1].append(i)
                lo, hi = new_lo, new_hi
                continue
        segments.append([i])
        lo, hi = p.copy(), p.copy()
    return [np.asarray(s) for s in segments]


def _window_start(lo: int, hi: int, patch: int, limit: int) -> int:
    """Top/left index centring [lo, hi] in a window, clamped inside [0, limit - patch]."""
    start = lo - (patch - 1 - (hi - lo)) // 2
    return int(min(max(start, 0), limit - patch))


def _make_patch(
    scene: ImagerScene,
    aux: np.ndarray,
    origin: tuple[int, int],
    patch: int,
    pixels: np.ndarray,
    vectors: np.ndarray,
) -> LabeledPatch:
    r0, c0 = origin
    window = (slice(r0, r0 + patch), slice(c0, c0 + patch))
    labels = np.full((vectors.shape[1], patch, patch), UNLABELED, dtype=np.uint8)
    mask = np.zeros((patch, patch), dtype=bool)
    local_r, local_c = pixels[:, 0] - r0, pixels[:, 1] - c0
    mask[local_r, local_c] = True
    labels[:, local_r, local_c] = vectors.T
    return LabeledPatch(
        channels=scene.channels[(slice(None),) + window],
        aux=aux[(slice(None),) + window],
        labels=labels,
        mask=mask,
        timestamp=scene.timestamp,
        origin=origin,
        meta={"scene": scene.name},
    )


def extract_patches(
    scene: ImagerScene,
    matched: Sequence[tuple[tuple[int, int], LayerLabelVector]],
    patch: int = DEFAULT_PATCH,
    stride: Optional[int] = None,
    include_sat_zenith: bool = False,
) -> list[LabeledPatch]:
    """
    Cut patch x patch windows along the matched track pixels.

    stride == patch (default): the track is split into segments whose
    bounding box fits a patch; each segment gets one window centred on it
    and clamped inside the scene, and its mask holds exactly that
    segment's pixels, so every matched pixel lands in one patch.

    stride < patch: windows advance ``stride`` pixels along the track and
    each mask holds every matched pixel inside its window.

    Raises:
        ValidationError: scene smaller than the patch, bad stride, duplicate pixels
    """
    H, W = scene.shape
    if patch < 1 or H < patch or W < patch:
        raise ValidationError(f"scene {H}x{W} is smaller than patch {patch}", field="patch", value=patch)
    stride = patch if stride is None else int(stride)
    if not 1 <= stride <= patch:
        raise ValidationError("stride must be in [1, patch]", field="stride", value=stride)
    if not matched:
        return []

    pixels = np.array([p for p, _ in matched], dtype=np.int64)
    vectors = np.stack([validate_label_vector(v, num_layers=len(v)) for _, v in matched])
    if len({(int(r), int(c)) for r, c in pixels}) != len(pixels):
        raise ValidationError("matched pixels must be unique", field="matched")
    if np.any(pixels < 0) or np.any(pixels[:, 0] >= H) or np.any(pixels[:, 1] >= W):
        raise ValidationError("matched pixel outside the scene", field="matched")

    order = _track_order(pixels)
    pixels, vectors = pixels[order], vectors[order]
    aux = build_aux_planes(scene, include_sat_zenith)
    patches: list[LabeledPatch] = []

    if stride == patch:
        for seg in _segments(pixels, patch):
            lo, hi = pixels[seg].min(axis=0), pixels[seg].max(axis=0)
            origin = (_window_start(lo[0], hi[0], patch, H), _window_start(lo[1], hi[1], patch, W))
            patches.append(_make_patch(scene, aux, origin, patch, pixels[seg], vectors[seg]))
    else:
        axis = 0 if np.ptp(pixels[:, 0]) >= np.ptp(pixels[:, 1]) else 1
        along = pixels[:, axis]
        start, last = int(along.min()), int(along.max())
        seen: set[tuple[int, int]] = set()
        while True:
            in_range = (along >= start) & (along < start + patch)
            sel = pixels[in_range]
            lo, hi = sel.min(axis=0), sel.max(axis=0)
            origin = (_window_start(lo[0], hi[0], patch, H), _window_start(lo[1], hi[1], patch, W))
            if origin not in seen:
                seen.add(origin)
                inside = (
                    (pixels[:, 0] >= origin[0]) & (pixels[:, 0] < origin[0] + patch)
                    & (pixels[:, 1] >= origin[1]) & (pixels[:, 1] < origin[1] + patch)
                )
                patches.append(_make_patch(scene, aux, origin, patch, pixels[inside], vectors[inside]))
            if start + patch > last:
                break
            start += stride
            # skip gaps in the track
            if not np.any((along >= start) & (along < start + patch)):
                start = int(along[along >= start].min())

    patches.sort(key=lambda p: (p.timestamp, p.origin[0], p.origin[1]))
    return patches


# ============================================================================
# END-TO-END COLLOCATION
# ============================================================================

@dataclass
class CollocationSummary:
    shots_total: int = 0
    shots_in_region: int = 0
    shots_matched_time: int = 0
    shots_matched_space: int = 0
    matched_pixels: int = 0
    scenes_used: int = 0
    patches: int = 0
    mask_density: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "shots_total": self.shots_total,
            "shots_in_region": self.shots_in_region,
            "shots_matched_time": self.shots_matched_time,
            "shots_matched_space": self.shots_matched_space,
            "matched_pixels": self.matched_pixels,
            "scenes_used": self.scenes_used,
            "patches": self.patches,
            "mask_density": self.mask_density,
            "warnings": list(self.warnings),
        }


def _collocate_scene(
    scene: ImagerScene,
    shots: list[ProfilerShot],
    patch: int,
    stride: Optional[int],
    max_distance_km: Optional[float],
    include_sat_zenith: bool,
) -> tuple[list[LabeledPatch], int, int]:
    index = SpatialIndex.for_scene(scene)
    limit = max_distance_km if max_distance_km is not None else math.sqrt(2.0) * grid_spacing_km(scene)
    by_pixel: dict[tuple[int, int], list[LayerLabelVector]] = defaultdict(list)
    matched_shots = 0
    for shot in shots:
        row, col, dist = index.query(shot.lat, shot.lon)
        if dist > limit:
            continue
        matched_shots += 1
        by_pixel[(row, col)].append(bin_profile(shot.layers))
    matched = [(pixel, aggregate_shots(vs)) for pixel, vs in sorted(by_pixel.items())]
    patches = extract_patches(scene, matched, patch=patch, stride=stride, include_sat_zenith=include_sat_zenith)
    return patches, matched_shots, len(matched)


def collocate(
    scenes: Sequence[ImagerScene],
    shots: Sequence[ProfilerShot],
    window_s: float = DEFAULT_WINDOW_S,
    patch: int = DEFAULT_PATCH,
    stride: Optional[int] = None,
    region: Union[None, str, Sequence[float], Region] = None,
    max_distance_km: Optional[float] = None,
    include_sat_zenith: bool = False,
    threads: int = 1,
) -> tuple[list[LabeledPatch], CollocationSummary]:
    """
    Match every shot to a scene and pixel, aggregate labels per pixel and
    cut patches. Scenes are processed on up to ``threads`` workers.

    Shots farther than ``max_distance_km`` from every pixel are dropped
    (default: one pixel diagonal, from the median grid spacing).
    """
    run = RunLogger("collocate", logger)
    run.start(scenes=len(scenes), shots=len(shots), window_s=window_s, patch=patch)
    summary = CollocationSummary(shots_total=len(shots))

    ordered = sorted(scenes, key=lambda s: (s.timestamp, s.name))
    times = [s.timestamp for s in ordered]
    kept = filter_region(shots, Region.resolve(region))
    summary.shots_in_region = len(kept)

    per_scene: dict[int, list[ProfilerShot]] = defaultdict(list)
    for shot in kept:
        idx = match_temporal(shot.time, times, window_s)
        if idx is not None:
            per_scene[idx].append(shot)
    summary.shots_matched_time = sum(len(v) for v in per_scene.values())
    if summary.shots_matched_time == 0:
        run.warn("no profiler shot falls inside the time window of any scene")

    jobs = sorted(per_scene)
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = list(pool.map(
            lambda i: _collocate_scene(ordered[i], per_scene[i], patch, stride, max_distance_km, include_sat_zenith),
            jobs,
        ))

    patches: list[LabeledPatch] = []
    for i, (scene_patches, n_shots, n_pixels) in zip(jobs, results):
        patches.extend(scene_patches)
        summary.shots_matched_space += n_shots
        summary.matched_pixels += n_pixels
        summary.scenes_used += 1 if scene_patches else 0
        run.progress(f"Scene {ordered[i].name}: {n_pixels} pixels, {len(scene_patches)} patches", items=1)
    patches.sort(key=lambda p: (p.timestamp, p.origin[0], p.origin[1]))

    summary.patches = len(patches)
    summary.mask_density = float(np.mean([p.mask_density for p in patches])) if patches else 0.0
    summary.warnings = list(run.warnings)
    run.complete(**{k: v for k, v in summary.to_dict().items() if k != "warnings"})
    return patches, summary


__all__ = [
    "PHASE_CODES",
    "CollocationSummary",
    "LayerLabelVector",
    "Region",
    "SpatialIndex",
    "aggregate_shots",
    "bin_profile",
    "build_aux_planes",
    "collocate",
    "extract_patches",
    "filter_region",
    "haversine_km",
    "match_spatial",
    "match_temporal",
    "unbin_profile",
]
