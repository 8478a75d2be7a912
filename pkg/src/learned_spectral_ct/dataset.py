"""Synthetic dataset generation and loading.

A dataset is a directory holding ``manifest.json`` and, per sample ``i``, the raw float32 blobs
``q_<i>.f32``, ``beta_<i>.f32`` and ``y_<i>.f32``. Every sample draws its phantom and noise from
a random stream derived from ``(seed, i)`` only, so the directory is a pure function of the
configuration and the seed regardless of how many workers generate it.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from learned_spectral_ct.errors import DatasetError
from learned_spectral_ct.phantoms import PhantomConfig, Sample, make_phantom, synthesize_sample
from learned_spectral_ct.spectral import SpectralSystem
from learned_spectral_ct.storage import (
    output_lock,
    prepare_output_dir,
    read_f32,
    read_json,
    write_f32,
    write_json,
)
from learned_spectral_ct.tomo import ScanGeometry

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMAT = "learned-spectral-ct/dataset"
FORMAT_VERSION = 1
FIELDS = ("q", "beta", "y")


def sample_streams(seed: int, index: int) -> tuple[np.random.Generator, np.random.SeedSequence]:
    """Return (phantom generator, noise seed) for sample ``index`` of a run seeded with ``seed``."""
    phantom_seq, noise_seq = np.random.SeedSequence([seed, index]).spawn(2)
    return np.random.default_rng(phantom_seq), noise_seq


def make_sample(
    cfg: PhantomConfig, geom: ScanGeometry, sys: SpectralSystem, seed: int, index: int
) -> Sample:
    """Generate sample ``index`` of the dataset seeded with ``seed``."""
    phantom_rng, noise_seed = sample_streams(seed, index)
    return synthesize_sample(make_phantom(cfg, geom, phantom_rng), geom, sys, noise_seed)


def describe_system(sys: SpectralSystem) -> dict[str, Any]:
    """JSON-friendly summary of a spectral system for manifests."""
    return {
        "materials": list(sys.materials),
        "densities": sys.densities.tolist(),
        "bin_edges": sys.bin_edges.tolist(),
        "n_quad": sys.n_nodes,
        "intensity": sys.intensity,
    }


def generate_dataset(
    cfg: PhantomConfig,
    geom: ScanGeometry,
    sys: SpectralSystem,
    count: int,
    seed: int,
    out_path: Path | str,
    *,
    overwrite: bool = False,
    workers: int = 1,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write ``count`` samples and a manifest to ``out_path``.

    Args:
        cfg: Phantom recipe.
        geom: Scan geometry.
        sys: Spectral system.
        count: Number of samples (0 writes the manifest only).
        seed: Dataset seed.
        out_path: Target directory.
        overwrite: Replace the contents of a non-empty directory.
        workers: Number of threads generating samples; does not change the output.
        metadata: Extra JSON-serialisable entries recorded under ``config``.

    Returns:
        Path of the written manifest.

    Raises:
        DatasetError: If the directory is non-empty without ``overwrite`` or is locked.
    """
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    out = Path(out_path)
    with output_lock(out):
        prepare_output_dir(out, overwrite)
        for stale in [*out.glob("*.f32"), out / MANIFEST]:
            stale.unlink(missing_ok=True)

        shapes = {
            "q": [sys.n_materials, *geom.image_shape],
            "beta": [sys.n_materials, *geom.sinogram_shape],
            "y": [sys.n_bins, *geom.sinogram_shape],
        }

        def write_one(index: int) -> int:
            sample = make_sample(cfg, geom, sys, seed, index)
            for name in FIELDS:
                write_f32(out / f"{name}_{index}.f32", getattr(sample, name))
            return index

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for index in pool.map(write_one, range(count)):
                logger.debug("Wrote sample %d/%d", index + 1, count)

        manifest_path = out / MANIFEST
        write_json(
            manifest_path,
            {
                "format": FORMAT,
                "version": FORMAT_VERSION,
                "count": count,
                "seed": seed,
                "dtype": "<f4",
                "shapes": shapes,
                "geometry": dataclasses.asdict(geom),
                "phantom": dataclasses.asdict(cfg),
                "spectral": describe_system(sys),
                "config": dict(metadata or {}),
            },
        )
    logger.info("Wrote dataset with %d samples to %s", count, out)
    return manifest_path


class Dataset(Sequence[Sample]):
    """Read-only view of a dataset directory; samples are loaded on access."""

    def __init__(self, path: Path | str) -> None:
        """Open a dataset directory.

        Raises:
            DatasetError: If the manifest is missing or of an unknown format.
        """
        self.path = Path(path)
        manifest_path = self.path / MANIFEST
        if not manifest_path.is_file():
            raise DatasetError(f"{self.path} has no {MANIFEST}")
        self.manifest = read_json(manifest_path)
        if self.manifest.get("format") != FORMAT or self.manifest.get("version") != FORMAT_VERSION:
            raise DatasetError(f"{manifest_path}: unsupported dataset format")
        self.shapes = {name: tuple(self.manifest["shapes"][name]) for name in FIELDS}

    @classmethod
    def load(cls, path: Path | str) -> Dataset:
        """Open ``path`` and check that every sample blob is present with the recorded size."""
        dataset = cls(path)
        for index in range(len(dataset)):
            for name in FIELDS:
                blob = dataset.path / f"{name}_{index}.f32"
                expected = int(np.prod(dataset.shapes[name])) * 4
                if not blob.is_file() or blob.stat().st_size != expected:
                    raise DatasetError(f"{blob}: missing or not {expected} bytes")
        return dataset

    def split(self, n_validation: int) -> tuple[list[int], list[int]]:
        """Return (training indices, validation indices); the validation set is the tail."""
        if not 0 <= n_validation < len(self):
            raise ValueError(
                f"validation size must be in [0, {len(self)}), got {n_validation}"
            )
        cut = len(self) - n_validation
        return list(range(cut)), list(range(cut, len(self)))

    def __len__(self) -> int:
        return int(self.manifest["count"])

    def __getitem__(self, index: int) -> Sample:  # type: ignore[override]
        if not -len(self) <= index < len(self):
            raise IndexError(f"sample index {index} out of range for {len(self)} samples")
        index %= len(self)
        arrays = {
            name: read_f32(self.path / f"{name}_{index}.f32", self.shapes[name]).astype(np.float64)
            for name in FIELDS
        }
        return Sample(**arrays)

    def __iter__(self) -> Iterator[Sample]:
        for index in range(len(self)):
            yield self[index]

    @property
    def materials(self) -> list[str]:
        """Return the material names recorded in the manifest."""
        return list(self.manifest["spectral"]["materials"])

    def stack(self, indices: Sequence[int]) -> dict[str, NDArray[np.float64]]:
        """Load several samples and stack each field along a new batch axis."""
        samples = [self[i] for i in indices]
        return {name: np.stack([getattr(s, name) for s in samples]) for name in FIELDS}
