"""
Evaluation Service - services/evaluation_service.py

RESPONSIBILITIES:
-----------------
Dual evaluation of predicted phase profiles at labelled voxels:
- Cloud-mask metrics (2x2): accuracy, precision, recall, F1, IoU
- Phase metrics (4x4): balanced accuracy, kappa, macro P/R/F1, per class
- Report emission: two metric tables, per-class table, bar chart, strips

CRITICAL RULES:
--------------
- Confusion matrices only count masked, non-sentinel voxels
- Zero denominators give 0 and a warning flag, never NaN
- Kappa with P_e == 1 is an error (DegenerateMetricError); evaluate()
  records it as 0 with a flag so the CLI can exit 2
- All counting is integer; ratios are formed once at the end

ARCHITECTURE:
------------
    predictions + labels + mask
        |
    ConfusionMatrix (bincount, mergeable)
        |
    mask_metrics(binary)  /  phase_metrics(4-class)
        |
    MetricsReport  ->  render_report (CSV, HTML, PPM/PGM)
"""

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from utils.containers import UNLABELED, LabeledPatch
from utils.io_helpers import PathLike, atomic_write
from utils.logging_config import log_execution_time
from utils.validation import (
    DegenerateMetricError,
    EmptyMaskError,
    ShapeError,
    ValidationError,
    require_codes,
)
from visualization import charts, strips

logger = logging.getLogger(__name__)


# ============================================================================
# CONSTANTS
# ============================================================================

NUM_CLASSES = 4
CLASS_NAMES = ("clear", "ice", "mixed", "liquid")

TABLE1_COLUMNS = ["Accuracy", "Precision", "Recall", "F1", "IoU"]
TABLE2_COLUMNS = ["Balanced_Accuracy", "kappa", "Precision_Macro", "Recall_Macro", "F1_Macro"]
MODEL_COLUMN = "Models"

TABLE1_FILE = "table1_cloud_mask.csv"
TABLE2_FILE = "table2_phase.csv"
PER_CLASS_FILE = "per_class.csv"
PER_CLASS_CHART = "per_class.html"
METRICS_FILE = "metrics.json"


# ============================================================================
# CONFUSION MATRIX
# ============================================================================

@dataclass
class ConfusionMatrix:
    """Counts with rows = truth, columns = prediction."""
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError("confusion matrix must be square", field="counts", value=self.counts.shape)
        if np.any(self.counts < 0):
            raise ValidationError("confusion counts must be non-negative", field="counts")

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth: np.ndarray, pred: np.ndarray, num_classes: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if truth.shape != pred.shape:
            raise ShapeError("truth and prediction differ in size", field="pred", value=(truth.size, pred.size))
        require_codes("truth", truth, range(num_classes))
        require_codes("pred", pred, range(num_classes))
        flat = np.bincount(truth * num_classes + pred, minlength=num_classes * num_classes)
        return cls(flat.reshape(num_classes, num_classes))

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError("cannot merge confusion matrices of different size", field="counts",
                             value=(self.counts.shape, other.counts.shape))
        return ConfusionMatrix(self.counts + other.counts)

    __add__ = merge

    def binary(self) -> "ConfusionMatrix":
        """Collapse classes 1..N-1 into the positive (cloud) class."""
        c = self.counts
        return ConfusionMatrix(np.array([
            [c[0, 0], c[0, 1:].sum()],
            [c[1:, 0].sum(), c[1:, 1:].sum()],
        ]))

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def binarize(classes: np.ndarray) -> np.ndarray:
    """0 -> clear (False), {1, 2, 3} -> cloud (True)."""
    arr = np.asarray(classes)
    if arr.dtype == bool:
        return arr.copy()
    require_codes("classes", arr, range(NUM_CLASSES))
    return arr != 0


def _ratio(num: int, den: int, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def _f1(p: float, r: float, flag: str, flags: list[str]) -> float:
    if p + r == 0:
        flags.append(flag)
        return 0.0
    return 2 * p * r / (p + r)


# ============================================================================
# CLOUD-MASK METRICS
# ============================================================================

@dataclass
class MaskMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float
    flags: list[str] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return dict(zip(TABLE1_COLUMNS, (self.accuracy, self.precision, self.recall, self.f1, self.iou)))


def mask_metrics(cm: ConfusionMatrix) -> MaskMetrics:
    """
    Binary cloud-mask metrics with cloud as the positive class.

    Raises:
        ShapeError: matrix is not 2x2
        ValidationError: empty matrix
    """
    if cm.num_classes != 2:
        raise ShapeError("mask metrics need a 2x2 matrix", field="counts", value=cm.counts.shape)
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty", field="counts")

    (tn, fp), (fn, tp) = (int(v) for v in cm.counts[0]), (int(v) for v in cm.counts[1])
    flags: list[str] = []
    precision = _ratio(tp, tp + fp, "precision_zero_division", flags)
    recall = _ratio(tp, tp + fn, "recall_zero_division", flags)
    return MaskMetrics(
        accuracy=(tp + tn) / cm.total,
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall, "f1_zero_division", flags),
        iou=_ratio(tp, tp + fp + fn, "iou_zero_division", flags),
        flags=flags,
    )


# ============================================================================
# PHASE METRICS
# ============================================================================

def cohen_kappa(cm: ConfusionMatrix) -> float:
    """
    (P_o - P_e) / (1 - P_e), in exact integer arithmetic until the division.

    Raises:
        DegenerateMetricError: P_e == 1
    """
    n = cm.total
    if n == 0:
        raise ValidationError("confusion matrix is empty", field="counts")
    rows = [int(v) for v in cm.counts.sum(axis=1)]
    cols = [int(v) for v in cm.counts.sum(axis=0)]
    chance = sum(r * c for r, c in zip(rows, cols))
    agree = int(np.trace(cm.counts))
    if chance == n * n:
        raise DegenerateMetricError("kappa is undefined: expected agreement P_e == 1")
    return (agree * n - chance) / (n * n - chance)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class PhaseMetrics:
    balanced_accuracy: float
    kappa: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    per_class: dict[str, ClassMetrics] = field(default_factory=dict)
    present: list[int] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        values = (self.balanced_accuracy, self.kappa, self.precision_macro, self.recall_macro, self.f1_macro)
        return dict(zip(TABLE2_COLUMNS, values))


def phase_metrics(
    cm: ConfusionMatrix,
    class_names: Sequence[str] = CLASS_NAMES,
    degenerate_kappa: Optional[float] = None,
) -> PhaseMetrics:
    """
    Multi-class metrics from a CxC matrix.

    Classes absent from both truth and prediction are left out of the macro
    means; balanced accuracy averages recall over classes present in truth.
    With ``degenerate_kappa`` set, an undefined kappa takes that value and
    is flagged instead of raising.

    Raises:
        ValidationError: empty matrix
        DegenerateMetricError: kappa undefined
    """
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty", field="counts")
    if len(class_names) != cm.num_classes:
        raise ShapeError("one class name per row is required", field="class_names", value=len(class_names))

    counts = cm.counts
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    flags: list[str] = []

    per_class: dict[str, ClassMetrics] = {}
    present: list[int] = []
    for i, name in enumerate(class_names):
        tp = int(counts[i, i])
        class_flags: list[str] = []
        p = _ratio(tp, int(cols[i]), f"precision_zero_division:{name}", class_flags)
        r = _ratio(tp, int(rows[i]), f"recall_zero_division:{name}", class_flags)
        f = _f1(p, r, f"f1_zero_division:{name}", class_flags)
        per_class[name] = ClassMetrics(precision=p, recall=r, f1=f, support=int(rows[i]))
        if rows[i] + cols[i] == 0:
            flags.append(f"class_absent:{name}")
            continue
        present.append(i)
        flags.extend(class_flags)

    try:
        kappa = cohen_kappa(cm)
    except DegenerateMetricError:
        if degenerate_kappa is None:
            raise
        kappa = degenerate_kappa
        flags.append("kappa_degenerate")

    names = [class_names[i] for i in present]
    in_truth = [class_names[i] for i in present if rows[i] > 0]
    return PhaseMetrics(
        balanced_accuracy=float(np.mean([per_class[n].recall for n in in_truth])),
        kappa=kappa,
        precision_macro=float(np.mean([per_class[n].precision for n in names])),
        recall_macro=float(np.mean([per_class[n].recall for n in names])),
        f1_macro=float(np.mean([per_class[n].f1 for n in names])),
        per_class=per_class,
        present=present,
        flags=flags,
    )


# ============================================================================
# REPORT
# ============================================================================

@dataclass
class MetricsReport:
    mask: MaskMetrics
    phase: PhaseMetrics
    mask_cm: ConfusionMatrix
    phase_cm: ConfusionMatrix
    warnings: list[str] = field(default_factory=list)

    @property
    def num_voxels(self) -> int:
        return self.phase_cm.total

    @property
    def degenerate(self) -> bool:
        return bool(self.warnings)

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_voxels": self.num_voxels,
            "mask": self.mask.row(),
            "phase": self.phase.row(),
            "per_class": {
                name: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support}
                for name, m in self.phase.per_class.items()
            },
            "mask_confusion": self.mask_cm.to_list(),
            "phase_confusion": self.phase_cm.to_list(),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_confusion(cls, phase_cm: ConfusionMatrix) -> "MetricsReport":
        """Both metric sets from a 4x4 matrix; kappa degeneracy becomes a warning."""
        mask_cm = phase_cm.binary()
        mask = mask_metrics(mask_cm)
        warnings = list(mask.flags)
        phase = phase_metrics(phase_cm, degenerate_kappa=0.0)
        if "kappa_degenerate" in phase.flags:
            logger.warning("kappa is undefined (P_e == 1); reporting 0")
        warnings.extend(phase.flags)
        return cls(mask=mask, phase=phase, mask_cm=mask_cm, phase_cm=phase_cm, warnings=warnings)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        """Rebuild a report from ``to_dict`` output (metrics are recomputed from the matrices)."""
        try:
            phase_cm = ConfusionMatrix(np.array(data["phase_confusion"]))
        except KeyError as e:
            raise ValidationError("metrics file lacks 'phase_confusion'", field="phase_confusion") from e
        return cls.from_confusion(phase_cm)


def evaluate_classes(pred: np.ndarray, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> MetricsReport:
    """
    Metrics over voxels where ``mask`` is set and the label is not 255.

    Args:
        pred: [B, D, H, W] predicted classes
        labels: [B, D, H, W] truth, 255 where unlabelled
        mask: [B, H, W] pixel mask; None evaluates every labelled voxel

    Raises:
        ShapeError: shapes disagree
        EmptyMaskError: nothing to evaluate
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or labels.ndim != 4:
        raise ShapeError(f"prediction {pred.shape} and labels {labels.shape} must both be [B,D,H,W]",
                         field="pred", value=pred.shape)
    valid = labels != UNLABELED
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        B, _, H, W = labels.shape
        if mask.shape != (B, H, W):
            raise ShapeError(f"mask {mask.shape} does not match labels {labels.shape}", field="mask", value=mask.shape)
        valid &= mask[:, None, :, :]
    if not valid.any():
        raise EmptyMaskError("no labelled voxels to evaluate")

    cm = ConfusionMatrix.from_labels(labels[valid], pred[valid], NUM_CLASSES)
    report = MetricsReport.from_confusion(cm)
    for warning in report.warnings:
        logger.warning(f"Metric warning: {warning}")
    return report


def evaluate(probs: np.ndarray, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> MetricsReport:
    """Argmax over the class axis of [B, N, D, H, W] probabilities, then ``evaluate_classes``."""
    probs = np.asarray(probs)
    if probs.ndim != 5:
        raise ShapeError("probabilities must be [B,N,D,H,W]", field="probs", value=probs.shape)
    return evaluate_classes(np.argmax(probs, axis=1), labels, mask)


def patch_confusion(patch: LabeledPatch, dense: bool = False) -> ConfusionMatrix:
    """4x4 counts for one patch carrying a prediction."""
    if patch.prediction is None:
        raise ValidationError("patch carries no prediction", field="prediction")
    if dense:
        if patch.dense is None:
            raise ValidationError("dense evaluation needs dense truth", field="dense")
        valid = np.ones(patch.dense.shape, dtype=bool)
        truth = patch.dense
    else:
        valid = patch.mask[None, :, :] & (patch.labels != UNLABELED)
        truth = patch.labels
    return ConfusionMatrix.from_labels(truth[valid], patch.prediction[valid], NUM_CLASSES)


@log_execution_time()
def evaluate_patches(patches: Sequence[LabeledPatch], dense: bool = False) -> MetricsReport:
    """
    Per-patch confusion matrices merged into one report.

    Raises:
        EmptyMaskError: no labelled voxel in any patch
    """
    if not patches:
        raise EmptyMaskError("no patches to evaluate")
    cm = reduce(ConfusionMatrix.merge, (patch_confusion(p, dense) for p in patches), ConfusionMatrix.zeros(NUM_CLASSES))
    if cm.total == 0:
        raise EmptyMaskError("no labelled voxels to evaluate")
    report = MetricsReport.from_confusion(cm)
    for warning in report.warnings:
        logger.warning(f"Metric warning: {warning}")
    logger.info(
        f"Evaluated {cm.total} voxels from {len(patches)} patches",
        extra={"voxels": cm.total, "patches": len(patches), **report.mask.row(), **report.phase.row()},
    )
    return report


# ============================================================================
# TABLES AND FILES
# ============================================================================

def table1(reports: Mapping[str, MetricsReport]) -> pd.DataFrame:
    rows = [{MODEL_COLUMN: name, **r.mask.row()} for name, r in reports.items()]
    return pd.DataFrame(rows, columns=[MODEL_COLUMN, *TABLE1_COLUMNS])


def table2(reports: Mapping[str, MetricsReport]) -> pd.DataFrame:
    rows = [{MODEL_COLUMN: name, **r.phase.row()} for name, r in reports.items()]
    return pd.DataFrame(rows, columns=[MODEL_COLUMN, *TABLE2_COLUMNS])


def per_class_table(reports: Mapping[str, MetricsReport]) -> pd.DataFrame:
    """Long format: one row per (model, class) with precision, recall, f1, support."""
    rows = [
        {MODEL_COLUMN: name, "Class": cls, "Precision": m.precision, "Recall": m.recall, "F1": m.f1, "Support": m.support}
        for name, r in reports.items()
        for cls, m in r.phase.per_class.items()
    ]
    return pd.DataFrame(rows, columns=[MODEL_COLUMN, "Class", "Precision", "Recall", "F1", "Support"])


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    with atomic_write(path, "w", newline="", encoding="utf-8") as f:
        frame.to_csv(f, index=False, float_format="%.6f")
    return Path(path)


def save_report(path: PathLike, report: MetricsReport, name: str) -> Path:
    payload = {"model": name, **report.to_dict()}
    with atomic_write(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=False)
    return Path(path)


def load_report(path: PathLike) -> tuple[str, MetricsReport]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed metrics file {path}: {e}", field="metrics", value=str(path)) from e
    return str(data.get("model", Path(path).parent.name)), MetricsReport.from_dict(data)


def phase_strips(patches: Sequence[LabeledPatch], limit: Optional[int] = None) -> list[dict[str, np.ndarray]]:
    """Along-track [D, n] class strips (truth and prediction) for patches with a prediction."""
    result = []
    for patch in patches[:limit] if limit is not None else patches:
        pixels = patch.track_pixels()
        if not pixels or patch.prediction is None:
            continue
        entry = {
            "truth": strips.track_strip(patch.labels, pixels),
            "prediction": strips.track_strip(patch.prediction, pixels),
        }
        if patch.dense is not None:
            entry["dense"] = strips.track_strip(patch.dense, pixels)
        result.append(entry)
    return result


def render_report(
    reports: Mapping[str, MetricsReport],
    out_dir: PathLike,
    strip_sets: Optional[Mapping[str, Sequence[Mapping[str, np.ndarray]]]] = None,
    strip_scale: int = 1,
) -> dict[str, list[Path]]:
    """
    Write table1/table2/per-class CSVs, the per-class bar chart and the
    along-track phase strips (PPM, plus PGM cloud-mask strips).

    Raises:
        ValidationError: no reports
    """
    if not reports:
        raise ValidationError("at least one report is required", field="reports")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, list[Path]] = {"tables": [], "charts": [], "strips": []}

    written["tables"].append(write_csv(out / TABLE1_FILE, table1(reports)))
    written["tables"].append(write_csv(out / TABLE2_FILE, table2(reports)))
    per_class = per_class_table(reports)
    written["tables"].append(write_csv(out / PER_CLASS_FILE, per_class))

    figure = charts.per_class_bars(per_class, class_names=list(CLASS_NAMES))
    written["charts"].append(charts.write_html(figure, out / PER_CLASS_CHART))

    for model, entries in (strip_sets or {}).items():
        for i, entry in enumerate(entries):
            for kind, strip in entry.items():
                stem = f"{model}_strip{i:03d}_{kind}"
                written["strips"].append(strips.write_ppm(out / f"{stem}.ppm", strips.phase_rgb(strip), strip_scale))
                written["strips"].append(strips.write_pgm(out / f"{stem}_mask.pgm", strips.mask_gray(strip), strip_scale))

    logger.info(
        f"Rendered report for {len(reports)} model(s) into {out}",
        extra={"models": list(reports), "files": sum(len(v) for v in written.values())},
    )
    return written
