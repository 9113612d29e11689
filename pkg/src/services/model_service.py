"""
Model Service - services/model_service.py

RESPONSIBILITIES:
-----------------
The phase-profile network and its plain baseline, built from engine ops:

    X [B, C, H, W]
      -> encode_spatial      2D conv stack C -> E -> ... -> E
      -> height_features     learnable per-layer table [1, H_dim, E]
                             replicated to [B, H_dim, W, E]
      -> fuse                volume[b, e, d, h, w] = spatial[b, e, h, w] + table[d, e]
      -> multiscale_generate per scale: resample, 3x3x3 conv + act, resample back;
                             concat over scales; 1x1x1 fusion conv
      -> phase_gate          3x3x3 conv to N classes, softmax over classes
      -> P [B, N, H_dim, H, W]

CRITICAL RULES:
--------------
- Scales are downsampling factors and the first one is always 1
- No activation after the last encoder block or after the fusion conv
- Parameter names are stable; checkpoints are keyed by them
- Initialisation: uniform in +-sqrt(1 / fan_in), seeded

ARCHITECTURE:
------------
    ModelConfig (YAML) --> init_parameters(config, seed) --> ModelParameters
                                     |
    run_model(X, params, config) -> forward | baseline_forward
"""

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from engine import ops
from engine.ops import parse_scale
from engine.tensor import Tensor, as_tensor
from utils.io_helpers import PathLike, atomic_write
from utils.validation import ConfigurationError, ShapeError, ValidationError, require_shape

logger = logging.getLogger(__name__)


ARCHITECTURES = ("sgmagnet", "baseline")
ACTIVATIONS = ("relu", "tanh")


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class ModelConfig:
    """Network hyperparameters; serialised next to every checkpoint."""
    in_channels: int = 20
    embed_dim: int = 32
    height_dim: int = 38
    num_classes: int = 4
    scales: tuple[Fraction, ...] = (Fraction(1), Fraction(1, 2), Fraction(1, 4))
    encoder_depth: int = 3
    gen_channels: int = 16
    kernel_size: int = 3
    activation: str = "relu"
    architecture: str = "sgmagnet"

    def __post_init__(self) -> None:
        self.scales = tuple(parse_scale(s) for s in self.scales)
        self.validate()

    def validate(self) -> None:
        for name in ("in_channels", "embed_dim", "height_dim", "num_classes", "encoder_depth", "gen_channels"):
            value = getattr(self, name)
            if int(value) < 1:
                raise ConfigurationError("must be >= 1", field=name, value=value)
        if not self.scales:
            raise ConfigurationError("at least one scale is required", field="scales", value=self.scales)
        if self.scales[0] != 1:
            raise ConfigurationError("first scale must be 1", field="scales", value=self.scale_strings())
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel size must be odd", field="kernel_size", value=self.kernel_size)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"must be one of {ACTIVATIONS}", field="activation", value=self.activation)
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"must be one of {ARCHITECTURES}", field="architecture", value=self.architecture)

    def scale_strings(self) -> list[str]:
        return [str(s) for s in self.scales]

    def to_mapping(self) -> dict[str, Any]:
        return {
            "architecture": self.architecture,
            "in_channels": self.in_channels,
            "embed_dim": self.embed_dim,
            "height_dim": self.height_dim,
            "num_classes": self.num_classes,
            "scales": self.scale_strings(),
            "encoder_depth": self.encoder_depth,
            "gen_channels": self.gen_channels,
            "kernel_size": self.kernel_size,
            "activation": self.activation,
        }

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigurationError(f"unknown model keys {unknown}", field="model", value=unknown)
        values = dict(mapping)
        if "scales" in values:
            values["scales"] = tuple(str(s) for s in values["scales"])
        try:
            return cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(str(e), field="model") from e

    def save(self, path: PathLike) -> Path:
        with atomic_write(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_mapping(), f, sort_keys=False, default_flow_style=None)
        return Path(path)

    @classmethod
    def load(cls, path: PathLike) -> "ModelConfig":
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError as e:
            raise ConfigurationError(f"model config not found: {path}", field="config", value=str(path)) from e
        except yaml.YAMLError as e:
            raise ConfigurationError(f"malformed model config {path}: {e}", field="config", value=str(path)) from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path} must contain a mapping", field="config", value=str(path))
        # Settings files nest the model under "model:"
        if "model" in data and isinstance(data["model"], dict):
            data = data["model"]
        return cls.from_mapping(data)


# ============================================================================
# PARAMETERS
# ============================================================================

def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for the configured architecture."""
    k = config.kernel_size
    E, G, N = config.embed_dim, config.gen_channels, config.num_classes
    shapes: dict[str, tuple[int, ...]] = {}

    if config.architecture == "baseline":
        shapes["baseline.0.weight"] = (E, config.in_channels, k, k)
        shapes["baseline.0.bias"] = (E,)
        shapes["baseline.1.weight"] = (E, E, k, k)
        shapes["baseline.1.bias"] = (E,)
        shapes["baseline.head.weight"] = (N * config.height_dim, E, 1, 1)
        shapes["baseline.head.bias"] = (N * config.height_dim,)
        return shapes

    for i in range(config.encoder_depth):
        cin = config.in_channels if i == 0 else E
        shapes[f"encoder.{i}.weight"] = (E, cin, k, k)
        shapes[f"encoder.{i}.bias"] = (E,)
    shapes["height.embedding"] = (1, config.height_dim, E)
    for j in range(len(config.scales)):
        shapes[f"generator.scale{j}.weight"] = (G, E, k, k, k)
        shapes[f"generator.scale{j}.bias"] = (G,)
    shapes["generator.fuse.weight"] = (G, G * len(config.scales), 1, 1, 1)
    shapes["generator.fuse.bias"] = (G,)
    shapes["gate.weight"] = (N, G, k, k, k)
    shapes["gate.bias"] = (N,)
    return shapes


@dataclass
class ModelParameters:
    """Named parameter tensors, in creation order."""
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self.tensors.items()}

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], config: ModelConfig) -> "ModelParameters":
        """
        Rebuild parameters from saved arrays, checked against the config.

        Raises:
            ConfigurationError: names or shapes disagree with the config
        """
        expected = parameter_shapes(config)
        missing = [n for n in expected if n not in arrays]
        if missing:
            raise ConfigurationError(
                f"checkpoint lacks parameters {missing} required by the model config",
                field="checkpoint", value=missing,
            )
        tensors = {}
        for name, shape in expected.items():
            data = np.asarray(arrays[name], dtype=np.float64)
            if data.shape != shape:
                raise ConfigurationError(
                    f"parameter '{name}' has shape {data.shape}, config expects {shape}",
                    field=name, value=data.shape,
                )
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(tensors)


def init_parameters(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Uniform +-sqrt(1/fan_in) initialisation, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(config)
    tensors: dict[str, Tensor] = {}
    fan_in = 1
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
        elif name == "height.embedding":
            fan_in = shape[-1]
        # biases reuse the fan-in of the weight just before them
        bound = float(np.sqrt(1.0 / fan_in))
        data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    params = ModelParameters(tensors)
    logger.info(
        f"Initialised {config.architecture} with {params.num_parameters} parameters",
        extra={"architecture": config.architecture, "num_parameters": params.num_parameters},
    )
    return params


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

def _activate(x: Tensor, config: ModelConfig) -> Tensor:
    return ops.relu(x) if config.activation == "relu" else ops.tanh(x)


def encode_spatial(X: Tensor, params: ModelParameters, config: ModelConfig) -> Tensor:
    """
    2D feature extractor: [B, C, H, W] -> [B, E, H, W].

    Raises:
        ShapeError: channel count differs from config.in_channels
    """
    X = as_tensor(X)
    require_shape("X", X.shape, rank=4)
    if X.shape[1] != config.in_channels:
        raise ShapeError(
            f"input has {X.shape[1]} channels, model expects {config.in_channels}",
            field="in_channels", value=X.shape[1],
        )
    h = X
    for i in range(config.encoder_depth):
        h = ops.conv2d(h, params[f"encoder.{i}.weight"], params[f"encoder.{i}.bias"], stride=1, padding="same")
        if i < config.encoder_depth - 1:
            h = _activate(h, config)
    return h


def height_features(params: ModelParameters, B: int, W: int) -> Tensor:
    """Replicate the [1, H_dim, E] table to [B, H_dim, W, E]."""
    if B < 1 or W < 1:
        raise ValidationError("B and W must be >= 1", field="height_features", value=(B, W))
    table = params["height.embedding"]
    _, h_dim, e = table.shape
    return ops.broadcast_to(ops.reshape(table, (1, h_dim, 1, e)), (B, h_dim, W, e))


def fuse(f_spatial: Tensor, f_height: Tensor) -> Tensor:
    """
    Lift 2D features into a column volume: [B, E, H_dim, H, W].

    volume[b, e, d, h, w] = f_spatial[b, e, h, w] + f_height[0, d, 0, e]
    """
    require_shape("f_spatial", f_spatial.shape, rank=4)
    require_shape("f_height", f_height.shape, rank=4)
    B, E, H, W = f_spatial.shape
    Bh, h_dim, Wh, Eh = f_height.shape
    if (B, W, E) != (Bh, Wh, Eh):
        raise ShapeError(
            f"fuse: f_spatial {f_spatial.shape} and f_height {f_height.shape} disagree on B, W or E",
            field="fuse", value=(f_spatial.shape, f_height.shape),
        )
    table = ops.index(f_height, (0, slice(None), 0, slice(None)))  # [H_dim, E]
    column = ops.reshape(ops.permute(table, (1, 0)), (1, E, h_dim, 1, 1))
    plane = ops.reshape(f_spatial, (B, E, 1, H, W))
    return ops.broadcast_add(plane, column)


def multiscale_generate(volume: Tensor, params: ModelParameters, config: ModelConfig) -> Tensor:
    """
    Multi-scale volumetric generator: [B, E, D, H, W] -> [B, G, D, H, W].

    Raises:
        ShapeError: D != height_dim, or a scale empties a dimension
    """
    require_shape("volume", volume.shape, rank=5)
    if volume.shape[2] != config.height_dim:
        raise ShapeError(
            f"volume depth {volume.shape[2]} != height_dim {config.height_dim}",
            field="volume", value=volume.shape,
        )
    size = volume.shape[2:]
    branches = []
    for j, scale in enumerate(config.scales):
        x = volume if scale == 1 else ops.interp3d(volume, scale)
        y = _activate(
            ops.conv3d(x, params[f"generator.scale{j}.weight"], params[f"generator.scale{j}.bias"]),
            config,
        )
        if y.shape[2:] != size:
            y = ops.resize3d(y, size)
        branches.append(y)
    stacked = branches[0] if len(branches) == 1 else ops.concat(branches, axis=1)
    return ops.conv3d(stacked, params["generator.fuse.weight"], params["generator.fuse.bias"])


def phase_gate(features: Tensor, params: ModelParameters, config: ModelConfig) -> Tensor:
    """Class probabilities [B, N, D, H, W]; softmax over axis 1."""
    logits = ops.conv3d(features, params["gate.weight"], params["gate.bias"])
    return ops.softmax(logits, axis=1)


# ============================================================================
# FULL MODELS
# ============================================================================

def forward(X: Tensor, params: ModelParameters, config: ModelConfig) -> Tensor:
    """[B, C, H, W] -> per-voxel class probabilities [B, N, H_dim, H, W]."""
    X = as_tensor(X)
    f_spatial = encode_spatial(X, params, config)
    f_height = height_features(params, X.shape[0], X.shape[3])
    volume = fuse(f_spatial, f_height)
    features = multiscale_generate(volume, params, config)
    return phase_gate(features, params, config)


def baseline_forward(X: Tensor, params: ModelParameters, config: ModelConfig) -> Tensor:
    """
    Plain 2D encoder whose head emits N * D channels, reshaped into the
    same [B, N, D, H, W] probability volume as ``forward``.
    """
    X = as_tensor(X)
    require_shape("X", X.shape, rank=4)
    if X.shape[1] != config.in_channels:
        raise ShapeError(
            f"input has {X.shape[1]} channels, model expects {config.in_channels}",
            field="in_channels", value=X.shape[1],
        )
    B, _, H, W = X.shape
    h = _activate(ops.conv2d(X, params["baseline.0.weight"], params["baseline.0.bias"]), config)
    h = _activate(ops.conv2d(h, params["baseline.1.weight"], params["baseline.1.bias"]), config)
    logits = ops.conv2d(h, params["baseline.head.weight"], params["baseline.head.bias"])
    logits = ops.reshape(logits, (B, config.num_classes, config.height_dim, H, W))
    return ops.softmax(logits, axis=1)


def run_model(X: Tensor, params: ModelParameters, config: ModelConfig) -> Tensor:
    """Dispatch on ``config.architecture``."""
    if config.architecture == "baseline":
        return baseline_forward(X, params, config)
    return forward(X, params, config)
