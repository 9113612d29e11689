"""
Tests for Collocation Service

Covers:
- Temporal matching (window edges, earlier-scene ties)
- Nearest-pixel matching against an exhaustive haversine scan
- Profile binning against a 1 m raster
- Per-pixel shot aggregation rules
- Patch extraction coverage
- End-to-end collocation of a synthetic scene and its track
"""

import itertools

import numpy as np
import pytest

from services.collocation_service import (
    Region,
    SpatialIndex,
    aggregate_shots,
    bin_profile,
    build_aux_planes,
    collocate,
    extract_patches,
    filter_region,
    grid_spacing_km,
    haversine_km,
    match_spatial,
    match_temporal,
    unbin_profile,
)
from services.synth_service import shots_from_track, synth_scenes
from utils.containers import UNLABELED
from utils.scene_io import ProfilerShot
from utils.validation import RangeValidationError, ValidationError

HOUR = 3600.0


def raster_oracle(layers, num_layers=38):
    """Label every metre, then pick the phase with most metres per 500 m bin."""
    metres = np.zeros(19000, dtype=np.int64)
    for base, top, phase in layers:
        metres[int(round(base * 1000)):int(round(top * 1000))] = phase
    labels = np.zeros(num_layers, dtype=np.uint8)
    for k in range(num_layers):
        counts = np.bincount(metres[500 * k:500 * (k + 1)], minlength=4)
        counts[0] = 0
        if counts.any():
            labels[k] = int(np.argmax(counts))
    return labels


def random_layers(rng, max_layers=5):
    n = int(rng.integers(0, max_layers + 1))
    points = np.sort(rng.choice(19001, size=2 * n, replace=False))
    return [
        (points[2 * i] / 1000.0, points[2 * i + 1] / 1000.0, int(rng.integers(1, 4)))
        for i in range(n)
    ]


# ============================================================
# Temporal Matching
# ============================================================

class TestMatchTemporal:
    """Scenes every 10 minutes on the hour."""

    SCENES = [3 * HOUR + 600.0 * i for i in range(6)]

    def test_nearest_scene(self):
        assert match_temporal(3 * HOUR + 7 * 60 + 20, self.SCENES) == 1

    def test_tie_goes_to_earlier_scene(self):
        assert match_temporal(3 * HOUR + 5 * 60, [3 * HOUR, 3 * HOUR + 600]) == 0

    def test_outside_window(self):
        assert match_temporal(3 * HOUR + 15 * 60 + 1, [3 * HOUR]) is None

    def test_window_edge_inclusive(self):
        assert match_temporal(1300.0, [1000.0], window_s=300) == 0
        assert match_temporal(1301.0, [1000.0], window_s=300) is None

    def test_zero_window_exact_only(self):
        assert match_temporal(600.0, [0.0, 600.0], window_s=0) == 1
        assert match_temporal(600.5, [0.0, 600.0], window_s=0) is None

    def test_empty_scene_list(self):
        assert match_temporal(0.0, []) is None

    def test_before_first_and_after_last(self):
        assert match_temporal(-100.0, [0.0, 600.0]) == 0
        assert match_temporal(700.0, [0.0, 600.0]) == 1

    def test_unsorted_times_rejected(self):
        with pytest.raises(ValidationError):
            match_temporal(0.0, [600.0, 0.0])

    def test_negative_window_rejected(self):
        with pytest.raises(RangeValidationError):
            match_temporal(0.0, [0.0], window_s=-1)


# ============================================================
# Spatial Matching
# ============================================================

class TestMatchSpatial:

    def test_exact_node(self, scene_factory):
        scene = scene_factory()
        index = SpatialIndex.for_scene(scene)
        row, col, dist = index.query(float(scene.lat[5, 7]), float(scene.lon[5, 7]))
        assert (row, col) == (5, 7)
        assert dist == pytest.approx(0.0, abs=1e-9)

    def test_midpoint_tie_picks_smaller_index(self, scene_factory):
        scene = scene_factory()
        lat = float(scene.lat[3, 0])
        lon = (float(scene.lon[0, 4]) + float(scene.lon[0, 5])) / 2.0
        assert match_spatial(lat, lon, scene) == (3, 4)

    def test_matches_exhaustive_scan(self, scene_factory, rng):
        scene = scene_factory()
        index = SpatialIndex.for_scene(scene)
        lats = rng.uniform(scene.lat.min(), scene.lat.max(), size=1000)
        lons = rng.uniform(scene.lon.min(), scene.lon.max(), size=1000)
        for lat, lon in zip(lats, lons):
            dist = haversine_km(lat, lon, scene.lat, scene.lon)
            expected = divmod(int(np.argmin(dist)), scene.shape[1])
            assert match_spatial(lat, lon, index) == expected

    def test_grid_spacing(self, scene_factory):
        # 0.02 degrees is about 2.2 km
        assert 2.0 < grid_spacing_km(scene_factory()) < 2.3

    def test_haversine_quarter_meridian(self):
        assert haversine_km(0.0, 0.0, 90.0, 0.0) == pytest.approx(np.pi / 2 * 6371.0088)


class TestRegion:

    def test_preset(self):
        region = Region.resolve("western_pacific")
        assert region.contains(0.0, 120.0)
        assert not region.contains(0.0, 90.0)

    def test_bounds_sequence(self):
        assert Region.resolve([0, 10, -5, 5]).bounds == (0.0, 10.0, -5.0, 5.0)

    def test_unknown_preset(self):
        with pytest.raises(ValidationError):
            Region.resolve("atlantic")

    def test_inverted_bounds(self):
        with pytest.raises(RangeValidationError):
            Region(10, 0, -5, 5)

    def test_filter(self):
        shots = [ProfilerShot(time=0.0, lat=0.0, lon=lon) for lon in (90.0, 120.0, 150.0)]
        kept = filter_region(shots, Region.resolve("western_pacific"))
        assert [s.lon for s in kept] == [120.0, 150.0]


# ============================================================
# Binning and Aggregation
# ============================================================

class TestBinProfile:

    def test_single_layer(self):
        labels = bin_profile([(1.2, 2.9, 3)])
        assert labels[2:6].tolist() == [3, 3, 3, 3]
        assert labels.sum() == 12
        assert labels.dtype == np.uint8 and labels.shape == (38,)

    def test_no_layers(self):
        assert not bin_profile([]).any()

    def test_layer_on_bin_edges(self):
        labels = bin_profile([(1.5, 2.0, 2)])
        assert np.nonzero(labels)[0].tolist() == [3]

    def test_larger_overlap_wins(self):
        # bin 4 is [2.0, 2.5): ice covers 0.3 km, water 0.2 km
        labels = bin_profile([(1.0, 2.2, 3), (2.2, 4.0, 1)])
        assert labels[4] == 1
        assert labels[2:4].tolist() == [3, 3]

    def test_equal_overlap_goes_to_lower_code(self):
        labels = bin_profile([(1.0, 2.25, 3), (2.25, 4.0, 2)])
        assert labels[4] == 2

    def test_top_of_column(self):
        labels = bin_profile([(18.7, 19.0, 1)])
        assert labels[37] == 1 and labels[:37].sum() == 0

    @pytest.mark.parametrize("layers", [
        [(2.0, 1.0, 1)],
        [(0.0, 20.0, 1)],
        [(1.0, 2.0, 4)],
        [(1.0, 3.0, 1), (2.0, 4.0, 2)],
    ])
    def test_invalid_layers(self, layers):
        with pytest.raises(RangeValidationError):
            bin_profile(layers)

    def test_matches_metre_raster_sample(self, rng):
        for _ in range(300):
            layers = random_layers(rng)
            np.testing.assert_array_equal(bin_profile(layers), raster_oracle(layers), err_msg=str(layers))

    @pytest.mark.slow
    def test_matches_metre_raster(self):
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            layers = random_layers(rng)
            np.testing.assert_array_equal(bin_profile(layers), raster_oracle(layers), err_msg=str(layers))

    def test_unbin_rebin_fixed_point(self, rng):
        for _ in range(100):
            vector = rng.integers(0, 4, size=38).astype(np.uint8)
            np.testing.assert_array_equal(bin_profile(unbin_profile(vector)), vector)

    def test_unbin_merges_runs(self):
        vector = np.zeros(38, dtype=np.uint8)
        vector[2:5] = 3
        vector[5] = 2
        assert unbin_profile(vector) == [(1.0, 2.5, 3), (2.5, 3.0, 2)]


class TestAggregateShots:

    def test_single_shot_unchanged(self, rng):
        vector = rng.integers(0, 4, size=38).astype(np.uint8)
        np.testing.assert_array_equal(aggregate_shots([vector]), vector)

    def test_plurality(self):
        vectors = [np.full(38, code, dtype=np.uint8) for code in (1, 1, 3)]
        assert aggregate_shots(vectors)[0] == 1

    @pytest.mark.parametrize("a,b", list(itertools.product(range(4), repeat=2)))
    def test_two_vote_table(self, a, b):
        if a == b:
            expected = a
        elif 0 in (a, b):
            expected = max(a, b)
        else:
            expected = min(a, b)
        vectors = [np.full(38, a, dtype=np.uint8), np.full(38, b, dtype=np.uint8)]
        assert aggregate_shots(vectors)[0] == expected

    def test_order_invariant(self, rng):
        vectors = [rng.integers(0, 4, size=38).astype(np.uint8) for _ in range(5)]
        expected = aggregate_shots(vectors)
        for perm in itertools.islice(itertools.permutations(vectors), 20):
            np.testing.assert_array_equal(aggregate_shots(list(perm)), expected)

    def test_empty(self):
        with pytest.raises(ValidationError):
            aggregate_shots([])


# ============================================================
# Patch Extraction
# ============================================================

class TestExtractPatches:

    def test_single_centre_pixel(self, scene_factory):
        scene = scene_factory(height=32, width=32)
        vector = bin_profile([(1.0, 3.0, 3)])
        patches = extract_patches(scene, [((16, 16), vector)], patch=16)
        assert len(patches) == 1
        patch = patches[0]
        assert patch.mask.sum() == 1
        r, c = 16 - patch.origin[0], 16 - patch.origin[1]
        np.testing.assert_array_equal(patch.labels[:, r, c], vector)
        assert np.all(patch.labels[:, ~patch.mask] == UNLABELED)
        assert patch.channels.shape == (16, 16, 16)
        assert patch.aux.shape == (4, 16, 16)

    def test_no_matches(self, scene_factory):
        assert extract_patches(scene_factory(), [], patch=16) == []

    def test_diagonal_track_covered_once(self, scene_factory, rng):
        scene = scene_factory(height=128, width=128)
        matched = [((i, i), rng.integers(0, 4, size=38).astype(np.uint8)) for i in range(128)]
        patches = extract_patches(scene, matched, patch=32)
        coverage = np.zeros((128, 128), dtype=np.int64)
        for p in patches:
            r0, c0 = p.origin
            coverage[r0:r0 + 32, c0:c0 + 32] += p.mask
            for (r, c), vector in matched:
                inside = 0 <= r - r0 < 32 and 0 <= c - c0 < 32
                if inside and p.mask[r - r0, c - c0]:
                    np.testing.assert_array_equal(p.labels[:, r - r0, c - c0], vector)
        assert all(coverage[i, i] == 1 for i in range(128))
        assert coverage.sum() == 128

    def test_overlapping_stride_covers_every_pixel(self, scene_factory):
        scene = scene_factory(height=64, width=64)
        matched = [((i, 10 + i // 4), np.ones(38, dtype=np.uint8)) for i in range(64)]
        patches = extract_patches(scene, matched, patch=16, stride=8)
        seen = set()
        for p in patches:
            rows, cols = np.nonzero(p.mask)
            seen.update(zip((rows + p.origin[0]).tolist(), (cols + p.origin[1]).tolist()))
        assert seen == {pixel for pixel, _ in matched}
        assert len(patches) > 64 // 16

    def test_output_order(self, scene_factory):
        scene = scene_factory(height=64, width=64)
        matched = [((63 - i, i), np.ones(38, dtype=np.uint8)) for i in range(64)]
        origins = [p.origin for p in extract_patches(scene, matched, patch=16)]
        assert origins == sorted(origins)

    def test_patch_larger_than_scene(self, scene_factory):
        with pytest.raises(ValidationError):
            extract_patches(scene_factory(height=8, width=8), [((0, 0), np.zeros(38))], patch=16)

    def test_duplicate_pixels(self, scene_factory):
        with pytest.raises(ValidationError):
            extract_patches(scene_factory(), [((1, 1), np.zeros(38)), ((1, 1), np.zeros(38))], patch=16)

    def test_aux_planes(self, scene_factory):
        scene = scene_factory(height=4, width=4)
        aux = build_aux_planes(scene)
        assert aux.shape == (4, 4, 4)
        np.testing.assert_allclose(aux[0], scene.lat / 90.0, rtol=1e-6)
        assert build_aux_planes(scene, include_sat_zenith=True).shape == (5, 4, 4)


# ============================================================
# End-to-End
# ============================================================

class TestCollocate:

    @pytest.fixture
    def synthetic(self):
        scene, dense, track = next(synth_scenes(1, size=32, seed=11))
        return scene, dense, track

    def test_track_recovered(self, synthetic):
        scene, dense, track = synthetic
        shots = shots_from_track(scene, dense, track)
        patches, summary = collocate([scene], shots, patch=32)
        assert len(patches) == 1
        np.testing.assert_array_equal(patches[0].mask, track.mask)
        np.testing.assert_array_equal(patches[0].labels, track.labels)
        assert summary.shots_matched_space == len(shots)
        assert summary.matched_pixels == track.count
        assert summary.warnings == []

    def test_shots_outside_window(self, synthetic):
        scene, dense, track = synthetic
        shots = shots_from_track(scene, dense, track, time=scene.timestamp + 3 * HOUR)
        patches, summary = collocate([scene], shots, patch=32)
        assert patches == []
        assert summary.shots_matched_time == 0
        assert summary.warnings

    def test_region_excludes_everything(self, synthetic):
        scene, dense, track = synthetic
        shots = shots_from_track(scene, dense, track)
        patches, summary = collocate([scene], shots, patch=32, region=[0.0, 1.0, 0.0, 1.0])
        assert patches == []
        assert summary.shots_in_region == 0

    def test_far_shots_dropped(self, synthetic):
        scene, dense, track = synthetic
        far = ProfilerShot(time=scene.timestamp, lat=float(scene.lat[0, 0]) + 5.0, lon=float(scene.lon[0, 0]))
        patches, summary = collocate([scene], [far], patch=32)
        assert patches == []
        assert summary.shots_matched_time == 1
        assert summary.shots_matched_space == 0

    def test_thread_count_does_not_change_output(self):
        triples = list(synth_scenes(3, size=32, seed=5))
        scenes = [s for s, _, _ in triples]
        shots = [shot for s, d, t in triples for shot in shots_from_track(s, d, t)]
        serial, _ = collocate(scenes, shots, patch=16, threads=1)
        threaded, _ = collocate(list(reversed(scenes)), shots, patch=16, threads=3)
        assert [(p.timestamp, p.origin) for p in serial] == [(p.timestamp, p.origin) for p in threaded]
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.labels, b.labels)
