"""
Settings loader.

Priority: CLI flags > environment variables > user YAML > settings.yaml.
"""

import copy
import logging
import os
from collections.abc import Mapping
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml
from dotenv import load_dotenv

from utils.validation import ConfigurationError

logger = logging.getLogger(__name__)

SETTINGS_PATH = Path(__file__).parent / "settings.yaml"
ENV_PREFIX = "PHASEPROF_"


@lru_cache(maxsize=8)
def _read_yaml(path: str) -> dict:
    """Parse a YAML mapping; cached per path."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigurationError(f"settings file not found: {path}", field="settings", value=path) from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"malformed YAML in {path}: {e}", field="settings", value=path) from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must contain a mapping", field="settings", value=path)
    return data


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict:
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_settings(path: Optional[os.PathLike] = None) -> dict:
    """
    Packaged defaults, merged with an optional user file, then env overrides.

    Returns a fresh dict on each call; callers may mutate it.
    """
    load_dotenv()
    settings = copy.deepcopy(_read_yaml(str(SETTINGS_PATH)))
    if path is not None:
        settings = deep_merge(settings, _read_yaml(str(Path(path))))

    threads = os.getenv(f"{ENV_PREFIX}THREADS")
    if threads:
        try:
            settings["runtime"]["threads"] = int(threads)
        except ValueError as e:
            raise ConfigurationError("must be an integer", field=f"{ENV_PREFIX}THREADS", value=threads) from e
    if os.getenv("LOG_LEVEL"):
        settings["logging"]["level"] = os.environ["LOG_LEVEL"]
    if os.getenv("JSON_LOGS"):
        settings["logging"]["json_logs"] = os.environ["JSON_LOGS"].lower() == "true"
    return settings


def worker_threads(settings: Optional[Mapping[str, Any]] = None) -> int:
    """Thread cap: runtime.threads / PHASEPROF_THREADS, else min(4, cpus)."""
    configured = (settings or load_settings()).get("runtime", {}).get("threads")
    if configured is None:
        return max(1, min(4, os.cpu_count() or 1))
    if int(configured) < 1:
        raise ConfigurationError("thread count must be >= 1", field="threads", value=configured)
    return int(configured)


def derive_seed(seed: int, name: str) -> int:
    """
    Named sub-seed ("data", "init", "shuffle", "track", ...) from the run seed.

    Stable across processes and platforms.
    """
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *name.encode("utf-8")])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))
