"""
Training Service - services/training_service.py

RESPONSIBILITIES:
-----------------
Sparse-masked training of the phase-profile models:
- masked_loss:       mean -log p(true class) over labelled voxels only
- split_dataset:     seeded 8:1:1 partition, remainder to train
- BatchLoader:       ordered batches assembled on a prefetch thread
- ReduceLROnPlateau: halve lr after `patience` non-improving epochs
- train / evaluate_loss / predict, CPCK checkpoints + model.yaml

CRITICAL RULES:
--------------
- Voxels outside the mask or holding the 255 sentinel contribute exactly
  zero loss and zero gradient
- One training thread owns parameters and optimizer state
- Every random choice derives from TrainConfig.seed (init, shuffle, split)
- Non-finite values abort with the op name and global batch index
"""

import logging
import math
import queue
import threading
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, TypeVar

import numpy as np
import pandas as pd

from config import derive_seed, rng_for
from engine import ops
from engine.optim import AdamState, adam_step
from engine.tensor import Tensor, backward, no_grad
from services.model_service import ModelConfig, ModelParameters, init_parameters, run_model
from utils.containers import UNLABELED, LabeledPatch, load_tensors, save_tensors
from utils.io_helpers import PathLike, atomic_write
from utils.logging_config import RunLogger
from utils.validation import (
    ConfigurationError,
    EmptyMaskError,
    NumericalError,
    ShapeError,
    ValidationError,
    require_fractions,
)
from utils.scene_io import TIR_BANDS

logger = logging.getLogger(__name__)

T = TypeVar("T")

PROB_FLOOR = 1e-12
TIR_CENTER_K = 260.0
TIR_SCALE_K = 30.0

CHECKPOINT_FILE = "model.cpck"
CONFIG_FILE = "model.yaml"
EPOCH_LOG_FILE = "epochs.csv"


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class TrainConfig:
    batch_size: int = 4
    lr0: float = 1e-3
    epochs: int = 50
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    prefetch: int = 2
    seed: int = 0
    dense_labels: bool = False

    def __post_init__(self) -> None:
        self.split = require_fractions("split", self.split)  # type: ignore[assignment]
        if len(self.split) != 3:
            raise ConfigurationError("split needs train, val, test ratios", field="split", value=self.split)
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1", field="batch_size", value=self.batch_size)
        if not self.lr0 > 0:
            raise ConfigurationError("lr0 must be positive", field="lr0", value=self.lr0)
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0", field="epochs", value=self.epochs)
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau factor must be in (0, 1)", field="plateau_factor", value=self.plateau_factor)
        if self.plateau_patience < 1:
            raise ConfigurationError("patience must be >= 1", field="plateau_patience", value=self.plateau_patience)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigurationError(f"unknown training keys {unknown}", field="training", value=unknown)
        values = dict(mapping)
        if "split" in values:
            values["split"] = tuple(values["split"])
        return cls(**values)

    def to_mapping(self) -> dict[str, Any]:
        return {
            "batch_size": self.batch_size,
            "lr0": self.lr0,
            "epochs": self.epochs,
            "split": list(self.split),
            "plateau_factor": self.plateau_factor,
            "plateau_patience": self.plateau_patience,
            "prefetch": self.prefetch,
            "seed": self.seed,
            "dense_labels": self.dense_labels,
        }


# ============================================================================
# LOSS
# ============================================================================

def effective_mask(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """[B, D, H, W] True where the pixel is masked and the voxel is labelled."""
    return mask[:, None, :, :] & (labels != UNLABELED)


def masked_loss(probs: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Mean cross-entropy over labelled voxels.

    Args:
        probs: [B, N, D, H, W] class probabilities
        labels: [B, D, H, W] codes, 255 where unlabelled
        mask: [B, H, W] labelled-pixel mask

    Raises:
        ShapeError: inconsistent shapes
        EmptyMaskError: no labelled voxel in the batch
    """
    B, N, D, H, W = probs.shape
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != (B, D, H, W) or mask.shape != (B, H, W):
        raise ShapeError(
            f"labels {labels.shape} / mask {mask.shape} do not match probabilities {probs.shape}",
            field="labels", value=(labels.shape, mask.shape),
        )
    valid = effective_mask(labels, mask)
    n = int(valid.sum())
    if n == 0:
        raise EmptyMaskError("batch has no labelled voxels")
    if np.any(labels[valid] >= N):
        raise ValidationError(f"label codes must be < {N}", field="labels")

    classes = np.arange(N).reshape(1, N, 1, 1, 1)
    onehot = ((labels[:, None] == classes) & valid[:, None]).astype(np.float64)
    log_p = ops.log(ops.clamp_min(probs, PROB_FLOOR))
    return ops.neg(ops.sum(ops.mul(log_p, onehot))) / n


# ============================================================================
# DATA
# ============================================================================

def split_dataset(
    items: Sequence[T],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[T], list[T], list[T]]:
    """
    Seeded shuffle, then val = floor(n * r_val), test = floor(n * r_test),
    train = the rest.

    Raises:
        ValidationError: empty input or ratios not summing to 1
    """
    if len(items) == 0:
        raise ValidationError("cannot split an empty dataset", field="items")
    r_train, r_val, r_test = require_fractions("ratios", ratios)
    n = len(items)
    if n < 10:
        logger.warning(f"Splitting only {n} items; validation/test splits may be empty")
    order = rng_for(seed, "split").permutation(n)
    n_val = int(math.floor(n * r_val + 1e-9))
    n_test = int(math.floor(n * r_test + 1e-9))
    shuffled = [items[i] for i in order]
    val = shuffled[:n_val]
    test = shuffled[n_val:n_val + n_test]
    train = shuffled[n_val + n_test:]
    return train, val, test


def normalize_channels(channels: np.ndarray, num_spectral: int) -> np.ndarray:
    """TIR bands -> (BT - 260 K) / 30 K; reflectances and aux planes unchanged."""
    x = np.asarray(channels, dtype=np.float64).copy()
    tir = [b for b in TIR_BANDS if b < num_spectral]
    x[..., tir, :, :] = (x[..., tir, :, :] - TIR_CENTER_K) / TIR_SCALE_K
    return x


def assemble_batch(
    patches: Sequence[LabeledPatch],
    dense_labels: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Stack patches into model input and targets.

    Returns:
        X [B, C, H, W] float64, labels [B, D, H, W] uint8, mask [B, H, W] bool

    Raises:
        ShapeError: patches of different shapes
        ValidationError: dense labels requested but missing
    """
    if not patches:
        raise ValidationError("empty batch", field="patches")
    first = patches[0]
    for p in patches[1:]:
        if (p.num_channels, p.height, p.width, p.num_layers, p.channels.shape[0]) != (
            first.num_channels, first.height, first.width, first.num_layers, first.channels.shape[0]
        ):
            raise ShapeError("patches in one batch must share their shape", field="patches")

    X = np.stack([normalize_channels(p.model_channels(), p.channels.shape[0]) for p in patches])
    if dense_labels:
        if any(p.dense is None for p in patches):
            raise ValidationError("dense labels requested but a patch has no dense truth", field="dense")
        labels = np.stack([p.dense for p in patches])
        mask = np.ones((len(patches), first.height, first.width), dtype=bool)
    else:
        labels = np.stack([p.labels for p in patches])
        mask = np.stack([p.mask for p in patches])
    return X, labels, mask


class BatchLoader:
    """
    Yields assembled batches in ``order``, chunked by ``batch_size``.

    A single worker thread assembles ahead into a bounded queue, so the
    hand-off order is always the requested order.
    """

    _DONE = object()

    def __init__(
        self,
        patches: Sequence[LabeledPatch],
        batch_size: int,
        order: Optional[Sequence[int]] = None,
        prefetch: int = 2,
        dense_labels: bool = False,
    ):
        self.patches = patches
        self.batch_size = batch_size
        self.order = list(range(len(patches))) if order is None else [int(i) for i in order]
        self.prefetch = max(0, int(prefetch))
        self.dense_labels = dense_labels

    def __len__(self) -> int:
        return (len(self.order) + self.batch_size - 1) // self.batch_size

    def _chunks(self) -> Iterator[list[LabeledPatch]]:
        for i in range(0, len(self.order), self.batch_size):
            yield [self.patches[j] for j in self.order[i:i + self.batch_size]]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        if self.prefetch == 0:
            for chunk in self._chunks():
                yield assemble_batch(chunk, self.dense_labels)
            return

        buffer: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def worker() -> None:
            try:
                for chunk in self._chunks():
                    if stop.is_set():
                        return
                    buffer.put(assemble_batch(chunk, self.dense_labels))
            except Exception as e:  # forwarded to the consumer
                buffer.put(e)
            finally:
                buffer.put(self._DONE)

        thread = threading.Thread(target=worker, name="batch-prefetch", daemon=True)
        thread.start()
        try:
            while True:
                item = buffer.get()
                if item is self._DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            while thread.is_alive():
                try:
                    buffer.get_nowait()
                except queue.Empty:
                    thread.join(timeout=0.01)


# ============================================================================
# LEARNING-RATE SCHEDULE
# ============================================================================

@dataclass
class ReduceLROnPlateau:
    """Multiply lr by ``factor`` after ``patience`` epochs without strict improvement."""
    lr: float
    factor: float = 0.5
    patience: int = 5
    best: float = math.inf
    num_bad_epochs: int = 0
    reductions: int = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.num_bad_epochs = 0
        else:
            self.num_bad_epochs += 1
            if self.num_bad_epochs >= self.patience:
                self.lr *= self.factor
                self.reductions += 1
                self.num_bad_epochs = 0
                logger.info(f"Reducing learning rate to {self.lr:.3e}", extra={"lr": self.lr})
        return self.lr


# ============================================================================
# CHECKPOINTS
# ============================================================================

def _checkpoint_paths(path: PathLike) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".cpck":
        return p, p.with_name(CONFIG_FILE)
    return p / CHECKPOINT_FILE, p / CONFIG_FILE


def save_checkpoint(
    path: PathLike,
    params: ModelParameters,
    config: ModelConfig,
    state: Optional[AdamState] = None,
) -> Path:
    """Write parameters (+ Adam m/v/t) as CPCK and the model config as YAML."""
    ckpt_path, config_path = _checkpoint_paths(path)
    arrays = params.to_arrays()
    if state is not None:
        for name in params:
            if name in state.m:
                arrays[f"{name}.m"] = state.m[name]
                arrays[f"{name}.v"] = state.v[name]
        arrays["t"] = np.asarray(float(state.t))
    save_tensors(ckpt_path, arrays)
    config.save(config_path)
    return ckpt_path


def load_checkpoint(
    path: PathLike,
    config: Optional[ModelConfig] = None,
) -> tuple[ModelConfig, ModelParameters, Optional[AdamState]]:
    """
    Inverse of ``save_checkpoint``. ``path`` is the checkpoint directory or
    the .cpck file; the config is read from the sibling model.yaml unless given.
    """
    ckpt_path, config_path = _checkpoint_paths(path)
    if config is None:
        config = ModelConfig.load(config_path)
    arrays = load_tensors(ckpt_path)
    params = ModelParameters.from_arrays(arrays, config)
    state = None
    if "t" in arrays:
        state = AdamState(t=int(arrays["t"]))
        for name in params:
            if f"{name}.m" in arrays:
                state.m[name] = arrays[f"{name}.m"]
                state.v[name] = arrays[f"{name}.v"]
    return config, params, state


# ============================================================================
# TRAIN / EVALUATE / PREDICT
# ============================================================================

def check_compatible(config: ModelConfig, patches: Sequence[LabeledPatch]) -> None:
    """
    Raises:
        ConfigurationError: data channels or layers disagree with the model
    """
    for i, p in enumerate(patches):
        if p.num_channels != config.in_channels:
            raise ConfigurationError(
                f"patch {i} has {p.num_channels} channels but the model expects {config.in_channels}",
                field="in_channels", value=p.num_channels,
            )
        if p.num_layers != config.height_dim:
            raise ConfigurationError(
                f"patch {i} has {p.num_layers} layers but the model expects {config.height_dim}",
                field="height_dim", value=p.num_layers,
            )


def evaluate_loss(
    params: ModelParameters,
    config: ModelConfig,
    patches: Sequence[LabeledPatch],
    batch_size: int = 4,
    dense_labels: bool = False,
) -> float:
    """
    Voxel-weighted mean masked loss without recording a graph.

    Raises:
        EmptyMaskError: no labelled voxel anywhere in ``patches``
    """
    total, count = 0.0, 0
    with no_grad():
        for X, labels, mask in BatchLoader(patches, batch_size, prefetch=0, dense_labels=dense_labels):
            n = int(effective_mask(labels, mask).sum())
            if n == 0:
                continue
            loss = masked_loss(run_model(Tensor(X), params, config), labels, mask)
            total += loss.item() * n
            count += n
    if count == 0:
        raise EmptyMaskError("no labelled voxels to evaluate")
    return total / count


@dataclass
class TrainResult:
    params: ModelParameters
    state: AdamState
    history: pd.DataFrame
    best_epoch: int = -1
    best_loss: float = math.inf
    best_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    checkpoint: Optional[Path] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_epoch": self.best_epoch,
            "best_loss": self.best_loss,
            "epochs": len(self.history),
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
        }


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_patches: Sequence[LabeledPatch],
    val_patches: Sequence[LabeledPatch] = (),
    out_dir: Optional[PathLike] = None,
    params: Optional[ModelParameters] = None,
) -> TrainResult:
    """
    Adam on masked_loss with a plateau schedule; keeps the best-validation
    parameters (training loss when there is no validation split).

    With ``out_dir`` the best checkpoint, model.yaml and epochs.csv
    (epoch, train_loss, val_loss, lr) are written there.

    Raises:
        ValidationError: empty training split
        ConfigurationError: data incompatible with the model
        NumericalError: NaN/Inf, tagged with the global batch index
    """
    if not train_patches:
        raise ValidationError("training split is empty", field="train")
    check_compatible(model_config, list(train_patches) + list(val_patches))

    run = RunLogger("train", logger)
    run.start(train=len(train_patches), val=len(val_patches), epochs=train_config.epochs,
              architecture=model_config.architecture)

    seed = train_config.seed
    if params is None:
        params = init_parameters(model_config, derive_seed(seed, "init"))
    state = AdamState.for_parameters(params.tensors)
    scheduler = ReduceLROnPlateau(train_config.lr0, train_config.plateau_factor, train_config.plateau_patience)
    shuffle = rng_for(seed, "shuffle")

    rows: list[dict[str, Any]] = []
    result = TrainResult(params=params, state=state, history=pd.DataFrame())
    global_batch = 0
    try:
        for epoch in range(train_config.epochs):
            lr = scheduler.lr
            order = shuffle.permutation(len(train_patches))
            loader = BatchLoader(train_patches, train_config.batch_size, order,
                                 train_config.prefetch, train_config.dense_labels)
            loss_sum, voxel_sum = 0.0, 0
            for X, labels, mask in loader:
                n = int(effective_mask(labels, mask).sum())
                if n == 0:
                    run.warn(f"batch {global_batch} has no labelled voxels; skipped", batch=global_batch)
                    global_batch += 1
                    continue
                try:
                    params.zero_grad()
                    loss = masked_loss(run_model(Tensor(X), params, model_config), labels, mask)
                    backward(loss)
                    adam_step(params.tensors, params.grads(), state, lr)
                except NumericalError as e:
                    raise NumericalError(e.op, e.detail, batch_index=global_batch) from e
                loss_sum += loss.item() * n
                voxel_sum += n
                global_batch += 1

            train_loss = loss_sum / voxel_sum if voxel_sum else math.nan
            val_loss = (
                evaluate_loss(params, model_config, val_patches, train_config.batch_size, train_config.dense_labels)
                if val_patches else None
            )
            monitored = val_loss if val_loss is not None else train_loss
            scheduler.step(monitored)
            rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
            run.progress(
                f"epoch {epoch}: train {train_loss:.6f} val {val_loss if val_loss is not None else float('nan'):.6f} lr {lr:.2e}",
                items=1, epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=lr,
            )

            if monitored < result.best_loss:
                result.best_loss = monitored
                result.best_epoch = epoch
                result.best_arrays = params.to_arrays()
                if out_dir is not None:
                    result.checkpoint = save_checkpoint(out_dir, params, model_config, state)
    except Exception as e:
        run.fail(e, batch=global_batch)
        raise

    result.history = pd.DataFrame(rows, columns=["epoch", "train_loss", "val_loss", "lr"])
    if out_dir is not None:
        if result.checkpoint is None:
            result.checkpoint = save_checkpoint(out_dir, params, model_config, state)
        with atomic_write(Path(out_dir) / EPOCH_LOG_FILE, "w", newline="", encoding="utf-8") as f:
            result.history.to_csv(f, index=False)
    run.complete(**result.to_dict())
    return result


def predict(
    params: ModelParameters,
    config: ModelConfig,
    patches: Sequence[LabeledPatch],
    batch_size: int = 4,
) -> list[np.ndarray]:
    """Per-patch argmax class volumes, uint8 [D, H, W]."""
    check_compatible(config, patches)
    predictions: list[np.ndarray] = []
    with no_grad():
        for X, _, _ in BatchLoader(patches, batch_size, prefetch=0):
            probs = run_model(Tensor(X), params, config)
            predictions.extend(np.argmax(probs.data, axis=1).astype(np.uint8))
    return predictions


def with_predictions(patches: Sequence[LabeledPatch], predictions: Sequence[np.ndarray]) -> list[LabeledPatch]:
    """Copies of ``patches`` carrying the predicted class volumes."""
    if len(patches) != len(predictions):
        raise ValidationError("one prediction per patch is required", field="predictions", value=len(predictions))
    return [
        LabeledPatch(
            channels=p.channels, aux=p.aux, labels=p.labels, mask=p.mask, dense=p.dense,
            prediction=pred, timestamp=p.timestamp, origin=p.origin, meta=dict(p.meta),
        )
        for p, pred in zip(patches, predictions)
    ]
