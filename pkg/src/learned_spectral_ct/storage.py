"""On-disk formats: raw little-endian float32 blobs, JSON manifests, PGM previews, lock files."""

from __future__ import annotations

import contextlib
import json
import logging
import os
from collections.abc import Iterator, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from learned_spectral_ct.errors import DatasetError

logger = logging.getLogger(__name__)

RAW_DTYPE = np.dtype("<f4")
LOCK_NAME = ".lock"


def write_f32(path: Path, array: ArrayLike) -> None:
    """Write ``array`` as raw little-endian float32 in C order."""
    np.ascontiguousarray(array, dtype=RAW_DTYPE).tofile(path)


def read_f32(path: Path, shape: Sequence[int]) -> NDArray[np.float32]:
    """Read a raw float32 blob and check it holds exactly ``shape`` elements."""
    data = np.fromfile(path, dtype=RAW_DTYPE)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise DatasetError(f"{path}: expected {expected} float32 values, found {data.size}")
    return data.reshape(tuple(shape)).astype(np.float32, copy=False)


def write_json(path: Path, payload: Mapping[str, Any]) -> None:
    """Write a manifest deterministically (sorted keys, fixed indentation)."""
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> dict[str, Any]:
    """Read a JSON manifest."""
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc


def write_pgm(path: Path, image: ArrayLike, vmin: float, vmax: float) -> None:
    """Write an 8-bit binary PGM preview, mapping [vmin, vmax] linearly onto [0, 255]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM preview needs a 2-D image, got shape {image.shape}")
    span = vmax - vmin if vmax > vmin else 1.0
    scaled = np.clip(np.rint((image - vmin) / span * 255.0), 0, 255).astype(np.uint8)
    # row 0 is the bottom of the image in scanner coordinates
    scaled = scaled[::-1]
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + scaled.tobytes())


def prepare_output_dir(path: Path, overwrite: bool) -> None:
    """Create ``path`` or check that it may be written into.

    Raises:
        DatasetError: If the directory exists, is non-empty and ``overwrite`` is False.
    """
    if path.exists() and not path.is_dir():
        raise DatasetError(f"{path} exists and is not a directory")
    if path.is_dir() and not overwrite and any(p.name != LOCK_NAME for p in path.iterdir()):
        raise DatasetError(f"{path} is not empty; pass overwrite to replace its contents")
    path.mkdir(parents=True, exist_ok=True)


@contextlib.contextmanager
def output_lock(directory: Path) -> Iterator[Path]:
    """Hold an exclusive lock file in ``directory`` for the duration of a write.

    Raises:
        DatasetError: If another process holds the lock.
    """
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DatasetError(f"{directory} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        logger.debug("Acquired output lock %s", lock)
        yield lock
    finally:
        lock.unlink(missing_ok=True)
        logger.debug("Released output lock %s", lock)
