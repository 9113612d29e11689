"""
File output helpers.

Outputs are written to a temporary sibling and renamed into place, so a
failed command never leaves a half-written file behind.
"""

import logging
import os
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Any, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


@contextmanager
def atomic_write(path: PathLike, mode: str = "wb", **kwargs: Any) -> Iterator[IO[Any]]:
    """
    Open a temporary file next to ``path``; rename over ``path`` on success.

    Example:
        >>> with atomic_write("out.bin") as f:
        ...     f.write(b"data")
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp, target)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


class OutputTracker:
    """
    Remembers files a command created so they can be removed if the
    command fails part-way.
    """

    def __init__(self) -> None:
        self.paths: list[Path] = []

    def add(self, path: PathLike) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def rollback(self) -> None:
        for p in reversed(self.paths):
            if p.exists() and p.is_file():
                p.unlink()
                logger.info(f"Removed partial output {p}")
        self.paths.clear()
