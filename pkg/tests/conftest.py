"""Shared fixtures: tiny geometries and spectral systems that keep the suite fast."""

from __future__ import annotations

import numpy as np
import pytest

from learned_spectral_ct.materials import MaterialTable, load_bundled_table
from learned_spectral_ct.spectral import SpectralSystem, build_system
from learned_spectral_ct.tomo import ScanGeometry

SMALL_MATERIALS = ("bone", "soft_tissue", "air")


@pytest.fixture
def table() -> MaterialTable:
    """The bundled material tables."""
    return load_bundled_table()


@pytest.fixture
def tiny_system(table: MaterialTable) -> SpectralSystem:
    """Two materials, two bins, four quadrature nodes."""
    return build_system(
        table, ["bone", "soft_tissue"], n_bins=2, e_min=30.0, e_max=140.0, n_quad=4, intensity=1e4
    )


@pytest.fixture
def small_system(table: MaterialTable) -> SpectralSystem:
    """Three materials (air last), four bins, moderate count level."""
    return build_system(table, SMALL_MATERIALS, n_bins=4, n_quad=16, intensity=1e8)


@pytest.fixture
def geom8() -> ScanGeometry:
    """8x8 image, 6 angles, detector covering the diagonal."""
    return ScanGeometry.parallel(8, 6, pixel_size=1.0)


@pytest.fixture
def geom16() -> ScanGeometry:
    """16x16 image with half-centimetre pixels."""
    return ScanGeometry.parallel(16, 12, pixel_size=0.5)


@pytest.fixture
def rng() -> np.random.Generator:
    """Deterministic generator for test inputs."""
    return np.random.default_rng(1234)
