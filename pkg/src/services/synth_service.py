"""
Synthetic Scene Service - services/synth_service.py

RESPONSIBILITIES:
-----------------
Procedural stand-in for matched imager/profiler archives:

- generate_scene:   3D Gaussian cloud blobs -> dense phase truth [38, H, W]
                    -> 16 imager-like channels + geometry
- sample_track:     one straight line of pixels across the scene, labels
                    copied from the dense truth
- shots_from_track: the same track as profiler shots, for driving the
                    collocation path against known truth
- synth_scenes:     seeded stream of (scene, dense truth, track)
- make_patches:     a whole corpus of labelled patches (the `synth` command)

PHYSICS PROXY:
-------------
- Phase by voxel altitude: above 7 km ice (1), below 3 km water (3),
  otherwise mixed (2)
- TIR brightness temperature = 288 K - 6.5 K/km x cloud-top height,
  floored at 200 K; clear sky 288 K; fixed per-band offsets
- VIS reflectance grows with column cloud thickness; zero at night
- Per-zone top-k selection of the blob field hits the target class
  mixture exactly (up to rounding) whenever blobs cover enough volume
"""

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from config import derive_seed
from services.collocation_service import LAYER_KM, build_aux_planes, unbin_profile
from utils.containers import NUM_LAYERS, UNLABELED, LabeledPatch
from utils.scene_io import NUM_BANDS, TIR_BANDS, VIS_BANDS, ImagerScene, ProfilerShot
from utils.validation import ValidationError, require_fractions

logger = logging.getLogger(__name__)


# ============================================================================
# CONSTANTS
# ============================================================================

DEFAULT_FRACTIONS = (0.893, 0.057, 0.039, 0.012)  # clear, ice, mixed, water

CLEAR_SKY_BT = 288.0
LAPSE_RATE = 6.5
BT_FLOOR = 200.0
ICE_BASE_KM = 7.0
WATER_TOP_KM = 3.0

TIR_OFFSETS = np.array([-4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5])
VIS_GAINS = np.array([1.0, 0.97, 0.94, 0.85, 0.6, 0.45])

BASE_TIME = 1483228800.0  # 2017-01-01T00:00:00Z
SCENE_INTERVAL_S = 600.0
GRID_STEP_DEG = 0.02

# zone -> (phase, first layer, last layer + 1)
_ZONES = (
    (1, int(ICE_BASE_KM / LAYER_KM), NUM_LAYERS),
    (2, int(WATER_TOP_KM / LAYER_KM), int(ICE_BASE_KM / LAYER_KM)),
    (3, 0, int(WATER_TOP_KM / LAYER_KM)),
)


@dataclass
class SceneSpec:
    """Recipe for one synthetic scene; generation is a pure function of it."""
    seed: int = 0
    size: tuple[int, int] = (128, 128)
    cloud_count: tuple[int, int] = (4, 12)
    fractions: tuple[float, float, float, float] = DEFAULT_FRACTIONS
    noise_sigma: float = 0.5
    num_layers: int = NUM_LAYERS
    timestamp: float = BASE_TIME
    name: str = "synth"

    def __post_init__(self) -> None:
        self.size = (int(self.size[0]), int(self.size[1]))
        self.cloud_count = (int(self.cloud_count[0]), int(self.cloud_count[1]))
        self.fractions = require_fractions("fractions", self.fractions)  # type: ignore[assignment]
        if len(self.fractions) != 4:
            raise ValidationError("need four class fractions", field="fractions", value=self.fractions)
        if self.size[0] < 2 or self.size[1] < 2:
            raise ValidationError("scene must be at least 2x2", field="size", value=self.size)
        if not 0 <= self.cloud_count[0] <= self.cloud_count[1]:
            raise ValidationError("cloud_count must be 0 <= lo <= hi", field="cloud_count", value=self.cloud_count)
        if self.noise_sigma < 0:
            raise ValidationError("noise sigma must be >= 0", field="noise_sigma", value=self.noise_sigma)


# ============================================================================
# PHYSICS PROXY
# ============================================================================

def phase_for_layer(k: int) -> int:
    """Phase code a cloudy voxel in layer ``k`` must carry."""
    centre = (k + 0.5) * LAYER_KM
    if centre > ICE_BASE_KM:
        return 1
    if centre < WATER_TOP_KM:
        return 3
    return 2


def cloud_top_km(dense: np.ndarray) -> np.ndarray:
    """Top of the highest cloudy layer per pixel (0 for clear columns)."""
    cloudy = dense > 0
    any_cloud = cloudy.any(axis=0)
    highest = dense.shape[0] - 1 - np.argmax(cloudy[::-1], axis=0)
    return np.where(any_cloud, (highest + 1) * LAYER_KM, 0.0)


def brightness_temperature(top_km: np.ndarray, cloudy: np.ndarray) -> np.ndarray:
    """288 K - 6.5 K/km x top, floored at 200 K; 288 K where clear."""
    bt = np.maximum(CLEAR_SKY_BT - LAPSE_RATE * np.asarray(top_km, dtype=np.float64), BT_FLOOR)
    return np.where(cloudy, bt, CLEAR_SKY_BT)


def reflectance(thickness_km: np.ndarray, night: np.ndarray) -> np.ndarray:
    """[6, H, W] VIS reflectance, rising with column thickness, 0 at night."""
    base = 0.05 + 0.8 * (1.0 - np.exp(-np.asarray(thickness_km) / 2.0))
    refl = VIS_GAINS[:, None, None] * base[None]
    refl[:, night] = 0.0
    return refl


# ============================================================================
# SCENE GENERATION
# ============================================================================

def _blob_field(rng: np.random.Generator, depth: int, H: int, W: int, zone: tuple[int, int]) -> np.ndarray:
    lo, hi = zone
    cz = rng.uniform(lo, hi)
    cy, cx = rng.uniform(0, H), rng.uniform(0, W)
    sz = rng.uniform(1.0, 4.0)
    sy, sx = rng.uniform(0.08, 0.2) * H, rng.uniform(0.08, 0.2) * W
    gz = np.exp(-0.5 * ((np.arange(depth) + 0.5 - cz) / sz) ** 2)
    gy = np.exp(-0.5 * ((np.arange(H) + 0.5 - cy) / sy) ** 2)
    gx = np.exp(-0.5 * ((np.arange(W) + 0.5 - cx) / sx) ** 2)
    return np.einsum("d,h,w->dhw", gz, gy, gx)


def _dense_truth(scene_spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = scene_spec.size
    D = scene_spec.num_layers
    dense = np.zeros((D, H, W), dtype=np.uint8)
    n_blobs = int(rng.integers(scene_spec.cloud_count[0], scene_spec.cloud_count[1] + 1))
    if n_blobs == 0:
        return dense

    total = D * H * W
    fields = {phase: np.zeros((D, H, W)) for phase, _, _ in _ZONES}
    for b in range(n_blobs):
        phase, lo, hi = _ZONES[b % len(_ZONES)]
        fields[phase] += _blob_field(rng, D, H, W, (lo, min(hi, D)))

    for phase, lo, hi in _ZONES:
        hi = min(hi, D)
        if lo >= hi or not fields[phase].any():
            continue
        target = int(round(scene_spec.fractions[phase] * total))
        zone = fields[phase][lo:hi]
        flat = zone.ravel()
        eligible = np.count_nonzero(flat > 1e-2)
        take = min(target, eligible)
        if take == 0:
            continue
        chosen = np.argsort(-flat, kind="stable")[:take]
        zone_labels = np.zeros(flat.size, dtype=np.uint8)
        zone_labels[chosen] = phase
        dense[lo:hi] = zone_labels.reshape(zone.shape)
    return dense


def _geometry(scene_spec: SceneSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    H, W = scene_spec.size
    lat0 = rng.uniform(-50.0, 50.0)
    lon0 = rng.uniform(100.0, 160.0 - GRID_STEP_DEG * W)
    lat = np.repeat((lat0 - GRID_STEP_DEG * np.arange(H))[:, None], W, axis=1)
    lon = np.repeat((lon0 + GRID_STEP_DEG * np.arange(W))[None, :], H, axis=0)

    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, H), np.linspace(-0.5, 0.5, W), indexing="ij")
    ramp = np.cos(theta) * yy + np.sin(theta) * xx
    sol_zenith = np.clip(rng.uniform(20.0, 130.0) + rng.uniform(0.0, 40.0) * ramp, 0.0, 180.0)
    sat_zenith = np.clip(rng.uniform(10.0, 60.0) + 5.0 * ramp, 0.0, 89.0)
    return {"lat": lat, "lon": lon, "sol_zenith": sol_zenith, "sat_zenith": sat_zenith, "night": sol_zenith > 90.0}


def generate_scene(scene_spec: SceneSpec) -> tuple[ImagerScene, np.ndarray]:
    """
    One synthetic scene and its dense phase truth [num_layers, H, W].

    Deterministic in ``scene_spec`` (bitwise).
    """
    rng = np.random.default_rng(scene_spec.seed)
    dense = _dense_truth(scene_spec, rng)
    geo = _geometry(scene_spec, rng)
    H, W = scene_spec.size

    cloudy = dense.any(axis=0)
    top = cloud_top_km(dense)
    thickness = np.count_nonzero(dense, axis=0) * LAYER_KM

    channels = np.empty((NUM_BANDS, H, W), dtype=np.float64)
    vis = reflectance(thickness, geo["night"])
    tir = brightness_temperature(top, cloudy)[None] + TIR_OFFSETS[:, None, None]
    if scene_spec.noise_sigma > 0:
        tir = tir + rng.normal(0.0, scene_spec.noise_sigma, size=tir.shape)
        vis = np.clip(vis + rng.normal(0.0, 0.01 * scene_spec.noise_sigma, size=vis.shape), 0.0, None)
        vis[:, geo["night"]] = 0.0
    channels[list(VIS_BANDS)] = vis
    channels[list(TIR_BANDS)] = tir

    scene = ImagerScene(
        timestamp=scene_spec.timestamp,
        lat=geo["lat"],
        lon=geo["lon"],
        channels=channels.astype(np.float32),
        sat_zenith=geo["sat_zenith"],
        sol_zenith=geo["sol_zenith"],
        night=geo["night"],
        name=scene_spec.name,
    )
    return scene, dense


# ============================================================================
# TRACK SAMPLING
# ============================================================================

@dataclass
class TrackSample:
    """A straight profiler-like track: pixels in along-track order plus labels."""
    pixels: np.ndarray                 # int64 [n, 2] (row, col)
    vectors: np.ndarray                # uint8 [n, num_layers]
    mask: np.ndarray                   # bool [H, W]
    labels: np.ndarray = field(repr=False, default=None)  # uint8 [num_layers, H, W], 255 off-track

    @property
    def count(self) -> int:
        return int(self.pixels.shape[0])


def sample_track(dense: np.ndarray, seed: int) -> TrackSample:
    """
    One pixel per row (steep track) or per column (shallow track) along a
    straight line crossing the scene; labels copied from ``dense``.
    """
    D, H, W = dense.shape
    rng = np.random.default_rng(seed)
    steep = bool(rng.integers(0, 2)) if H == W else H >= W
    length, span = (H, W) if steep else (W, H)
    start = rng.uniform(0, span - 1)
    end = rng.uniform(0, span - 1)
    across = np.rint(np.linspace(start, end, length)).astype(np.int64)
    along = np.arange(length, dtype=np.int64)
    pixels = np.column_stack([along, across] if steep else [across, along])

    mask = np.zeros((H, W), dtype=bool)
    mask[pixels[:, 0], pixels[:, 1]] = True
    labels = np.full((D, H, W), UNLABELED, dtype=np.uint8)
    labels[:, mask] = dense[:, mask]
    vectors = dense[:, pixels[:, 0], pixels[:, 1]].T.copy()
    return TrackSample(pixels=pixels, vectors=vectors, mask=mask, labels=labels)


def shots_from_track(
    scene: ImagerScene,
    dense: np.ndarray,
    track: TrackSample,
    time: Optional[float] = None,
    step_s: float = 0.1,
) -> list[ProfilerShot]:
    """Profiler shots at the exact track pixel centres, layers from the dense truth."""
    t0 = scene.timestamp if time is None else float(time)
    shots = []
    for i, (r, c) in enumerate(track.pixels):
        shots.append(ProfilerShot(
            time=t0 + i * step_s,
            lat=float(scene.lat[r, c]),
            lon=float(scene.lon[r, c]),
            layers=tuple(unbin_profile(dense[:, r, c])),
        ))
    return shots


# ============================================================================
# CORPUS
# ============================================================================

def synth_scenes(
    n: int,
    size: int = 128,
    seed: int = 0,
    cloud_count: tuple[int, int] = (4, 12),
    fractions: tuple[float, float, float, float] = DEFAULT_FRACTIONS,
    noise_sigma: float = 0.5,
) -> Iterator[tuple[ImagerScene, np.ndarray, TrackSample]]:
    """Scene ``i`` is drawn from sub-seeds ``scene{i}`` and ``track{i}`` of ``seed``."""
    if n < 0:
        raise ValidationError("scene count must be >= 0", field="n", value=n)
    for i in range(n):
        scene_spec = SceneSpec(
            seed=derive_seed(seed, f"scene{i}"),
            size=(size, size),
            cloud_count=cloud_count,
            fractions=fractions,
            noise_sigma=noise_sigma,
            timestamp=BASE_TIME + SCENE_INTERVAL_S * i,
            name=f"synth_{i:05d}",
        )
        scene, dense = generate_scene(scene_spec)
        yield scene, dense, sample_track(dense, derive_seed(seed, f"track{i}"))


def make_patches(
    n: int,
    size: int = 128,
    seed: int = 0,
    cloud_count: tuple[int, int] = (4, 12),
    fractions: tuple[float, float, float, float] = DEFAULT_FRACTIONS,
    noise_sigma: float = 0.5,
    with_dense: bool = True,
    include_sat_zenith: bool = False,
) -> list[LabeledPatch]:
    """``n`` whole-scene patches with a sparse track each (dense truth attached)."""
    patches = [
        LabeledPatch(
            channels=scene.channels,
            aux=build_aux_planes(scene, include_sat_zenith),
            labels=track.labels,
            mask=track.mask,
            dense=dense if with_dense else None,
            timestamp=scene.timestamp,
            origin=(0, 0),
            meta={"scene": scene.name},
        )
        for scene, dense, track in synth_scenes(n, size, seed, cloud_count, fractions, noise_sigma)
    ]
    logger.info(f"Generated {n} synthetic patches", extra={"patches": n, "size": size, "seed": seed})
    return patches
