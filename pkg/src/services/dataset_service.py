"""
Dataset Service - services/dataset_service.py

RESPONSIBILITIES:
-----------------
Descriptive statistics of a patch corpus:
- per-band value densities (reflectance, brightness temperature)
- phase distribution over labelled voxels
- vertical cloud coverage per layer
- mask density
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from services.collocation_service import LAYER_KM
from services.evaluation_service import CLASS_NAMES
from utils.containers import UNLABELED, LabeledPatch
from utils.logging_config import log_execution_time
from utils.scene_io import TIR_BANDS, VIS_BANDS
from utils.validation import ValidationError

logger = logging.getLogger(__name__)

VIS_RANGE = (0.0, 1.2)
TIR_RANGE = (180.0, 330.0)
DENSITY_BINS = 60


@dataclass
class DatasetSummary:
    num_patches: int
    num_pixels: int
    labelled_pixels: int
    labelled_voxels: int
    phase_counts: dict[str, int] = field(default_factory=dict)
    densities: pd.DataFrame = field(default_factory=pd.DataFrame)
    coverage: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def mask_density(self) -> float:
        return self.labelled_pixels / self.num_pixels if self.num_pixels else 0.0

    @property
    def phase_fractions(self) -> dict[str, float]:
        total = sum(self.phase_counts.values())
        return {k: (v / total if total else 0.0) for k, v in self.phase_counts.items()}

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_patches": self.num_patches,
            "num_pixels": self.num_pixels,
            "labelled_pixels": self.labelled_pixels,
            "labelled_voxels": self.labelled_voxels,
            "mask_density": self.mask_density,
            "phase_counts": dict(self.phase_counts),
            "phase_fractions": self.phase_fractions,
        }


def _band_density(values: np.ndarray, value_range: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    hist, edges = np.histogram(values, bins=DENSITY_BINS, range=value_range, density=False)
    total = hist.sum()
    width = edges[1] - edges[0]
    density = hist / (total * width) if total else np.zeros_like(hist, dtype=np.float64)
    return 0.5 * (edges[:-1] + edges[1:]), density


@log_execution_time()
def summarize_patches(patches: Sequence[LabeledPatch], dense: bool = False) -> DatasetSummary:
    """
    Statistics of a patch list; with ``dense`` the phase statistics use the
    dense truth volumes instead of the sparse labels.

    Raises:
        ValidationError: empty input, or dense requested without dense truth
    """
    if not patches:
        raise ValidationError("no patches to summarize", field="patches")
    num_layers = patches[0].num_layers
    per_layer = np.zeros((num_layers, len(CLASS_NAMES)), dtype=np.int64)
    num_pixels = labelled_pixels = 0
    band_values: dict[int, list[np.ndarray]] = {}

    for patch in patches:
        num_pixels += patch.height * patch.width
        labelled_pixels += int(patch.mask.sum())
        if dense:
            if patch.dense is None:
                raise ValidationError("dense statistics need dense truth", field="dense")
            volume = patch.dense
            valid = np.ones(volume.shape, dtype=bool)
        else:
            volume = patch.labels
            valid = patch.mask[None, :, :] & (volume != UNLABELED)

        for k in range(num_layers):
            codes = volume[k][valid[k]]
            per_layer[k] += np.bincount(codes, minlength=len(CLASS_NAMES))[: len(CLASS_NAMES)]

        for band in range(patch.channels.shape[0]):
            band_values.setdefault(band, []).append(patch.channels[band].ravel())

    phase_counts = per_layer.sum(axis=0)

    rows = []
    for band, chunks in sorted(band_values.items()):
        if band in VIS_BANDS:
            value_range = VIS_RANGE
        elif band in TIR_BANDS:
            value_range = TIR_RANGE
        else:
            continue
        centers, density = _band_density(np.concatenate(chunks), value_range)
        rows.extend(
            {"band": f"B{band + 1:02d}", "bin_center": c, "density": d}
            for c, d in zip(centers, density)
        )
    densities = pd.DataFrame(rows, columns=["band", "bin_center", "density"])

    layer_totals = per_layer.sum(axis=1, keepdims=True)
    fractions = np.divide(per_layer, layer_totals, out=np.zeros(per_layer.shape), where=layer_totals > 0)
    coverage = pd.DataFrame(fractions, columns=list(CLASS_NAMES))
    coverage.insert(0, "layer", np.arange(num_layers))
    coverage.insert(1, "altitude_km", (np.arange(num_layers) + 0.5) * LAYER_KM)
    coverage["cloud"] = 1.0 - coverage["clear"].where(layer_totals[:, 0] > 0, 1.0)
    coverage["voxels"] = layer_totals[:, 0]

    summary = DatasetSummary(
        num_patches=len(patches),
        num_pixels=num_pixels,
        labelled_pixels=labelled_pixels,
        labelled_voxels=int(per_layer.sum()),
        phase_counts={name: int(n) for name, n in zip(CLASS_NAMES, phase_counts)},
        densities=densities,
        coverage=coverage,
    )
    logger.info(f"Summarized {len(patches)} patches", extra=summary.to_dict())
    return summary
