"""2D parallel-beam tomography with exact pixel-ray intersection lengths.

The ray transform R is assembled once per geometry as a sparse matrix whose entries are the
Siddon intersection lengths w_{i, theta, l} of ray (theta, l) with pixel i. ``project`` applies R
and ``backproject`` applies its exact transpose.

Coordinates: the image is centred on the origin; pixel ``q[..., iy, ix]`` covers
``x in [x_min + ix p, x_min + (ix + 1) p)`` and likewise for y. Ray (theta, l) is the line
``{x : x . (cos theta, sin theta) = u_l}`` with detector coordinate ``u_l`` centred on zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse

logger = logging.getLogger(__name__)

#: Volume fractions q, shape (N, nPixY, nPixX).
MaterialImage: TypeAlias = NDArray[np.float64]

_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel-beam scan geometry.

    Attributes:
        n_pix_x: Number of image columns.
        n_pix_y: Number of image rows.
        pixel_size: Pixel side length in cm.
        angles: Projection angles in radians, strictly increasing within [0, pi).
        n_det: Number of detector elements N_d.
        det_elem_size: Detector element size in cm.
    """

    n_pix_x: int
    n_pix_y: int
    pixel_size: float
    angles: tuple[float, ...]
    n_det: int
    det_elem_size: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if min(self.n_pix_x, self.n_pix_y, self.n_det) < 1 or not self.angles:
            raise ValueError("pixel, angle and detector counts must all be >= 1")
        if not (self.pixel_size > 0 and self.det_elem_size > 0):
            raise ValueError("pixel and detector element sizes must be positive")
        angles = np.asarray(self.angles)
        if np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if angles[0] < 0 or angles[-1] >= math.pi:
            raise ValueError("angles must lie in [0, pi)")

    @classmethod
    def parallel(
        cls,
        n_pix: int,
        n_angles: int,
        pixel_size: float = 1.0,
        n_det: int | None = None,
        det_elem_size: float | None = None,
    ) -> ScanGeometry:
        """Square image with ``n_angles`` uniform angles in [0, pi).

        When ``n_det`` is omitted the detector is just wide enough to cover the image diagonal.
        """
        det_elem_size = pixel_size if det_elem_size is None else det_elem_size
        if n_det is None:
            n_det = math.ceil(n_pix * pixel_size * math.sqrt(2) / det_elem_size) + 1
        angles = tuple(np.arange(n_angles) * (math.pi / n_angles))
        return cls(n_pix, n_pix, pixel_size, angles, n_det, det_elem_size)

    @property
    def n_angles(self) -> int:
        """Return N_theta."""
        return len(self.angles)

    @property
    def image_shape(self) -> tuple[int, int]:
        """Return (nPixY, nPixX)."""
        return self.n_pix_y, self.n_pix_x

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        """Return (N_theta, N_d)."""
        return self.n_angles, self.n_det

    @property
    def detector_positions(self) -> NDArray[np.float64]:
        """Return the detector element centres u_l in cm."""
        return (np.arange(self.n_det) - 0.5 * (self.n_det - 1)) * self.det_elem_size


def _trace_ray(
    centre: tuple[float, float],
    direction: tuple[float, float],
    x_planes: NDArray[np.float64],
    y_planes: NDArray[np.float64],
    pixel_size: float,
) -> tuple[NDArray[np.intp], NDArray[np.intp], NDArray[np.float64]]:
    """Siddon traversal of one ray; returns (ix, iy, lengths) of the pixels it crosses."""
    empty = np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp), np.empty(0)
    t_lo, t_hi = -math.inf, math.inf
    crossings = []
    for c, d, planes in ((centre[0], direction[0], x_planes), (centre[1], direction[1], y_planes)):
        if abs(d) > _PARALLEL_EPS:
            t = (planes - c) / d
            t_lo = max(t_lo, min(t[0], t[-1]))
            t_hi = min(t_hi, max(t[0], t[-1]))
            crossings.append(t)
        elif not planes[0] <= c < planes[-1]:
            return empty
    if t_hi - t_lo <= _PARALLEL_EPS * pixel_size:
        return empty

    t = np.concatenate([[t_lo, t_hi], *crossings])
    t = np.sort(t[(t >= t_lo) & (t <= t_hi)])
    lengths = np.diff(t)
    keep = lengths > _PARALLEL_EPS * pixel_size
    mid = (t[:-1] + 0.5 * lengths)[keep]
    lengths = lengths[keep]
    n_x, n_y = x_planes.size - 1, y_planes.size - 1
    ix = np.clip(np.floor((centre[0] + mid * direction[0] - x_planes[0]) / pixel_size), 0, n_x - 1)
    iy = np.clip(np.floor((centre[1] + mid * direction[1] - y_planes[0]) / pixel_size), 0, n_y - 1)
    return ix.astype(np.intp), iy.astype(np.intp), lengths


@lru_cache(maxsize=8)
def system_matrix(geom: ScanGeometry) -> sparse.csr_matrix:
    """Assemble R as a CSR matrix of shape (N_theta * N_d, nPixY * nPixX).

    Results are cached per geometry; the returned matrix must not be modified.
    """
    p = geom.pixel_size
    x_planes = (np.arange(geom.n_pix_x + 1) - 0.5 * geom.n_pix_x) * p
    y_planes = (np.arange(geom.n_pix_y + 1) - 0.5 * geom.n_pix_y) * p
    rows, cols, vals = [], [], []
    for a, theta in enumerate(geom.angles):
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        for l, u in enumerate(geom.detector_positions):
            ix, iy, lengths = _trace_ray(
                (u * cos_t, u * sin_t), (-sin_t, cos_t), x_planes, y_planes, p
            )
            rows.append(np.full(lengths.size, a * geom.n_det + l, dtype=np.intp))
            cols.append(iy * geom.n_pix_x + ix)
            vals.append(lengths)
    shape = (geom.n_angles * geom.n_det, geom.n_pix_y * geom.n_pix_x)
    matrix = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    )
    matrix.sum_duplicates()
    logger.info(
        "Assembled ray transform: %d rays x %d pixels, %d nonzeros",
        shape[0],
        shape[1],
        matrix.nnz,
    )
    return matrix


def project(geom: ScanGeometry, q: ArrayLike) -> NDArray[np.float64]:
    """Apply R to every leading slice of ``q``.

    Args:
        geom: Scan geometry.
        q: Images with shape (..., nPixY, nPixX).

    Returns:
        Sinograms with shape (..., N_theta, N_d).

    Raises:
        ValueError: If the trailing image shape does not match the geometry.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-2:] != geom.image_shape:
        raise ValueError(f"image shape {q.shape[-2:]} does not match geometry {geom.image_shape}")
    lead = q.shape[:-2]
    flat = q.reshape(-1, geom.n_pix_y * geom.n_pix_x)
    return np.asarray(system_matrix(geom) @ flat.T).T.reshape((*lead, *geom.sinogram_shape))


def backproject(geom: ScanGeometry, beta: ArrayLike) -> NDArray[np.float64]:
    """Apply R^T to every leading slice of ``beta`` (shape (..., N_theta, N_d))."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-2:] != geom.sinogram_shape:
        raise ValueError(
            f"sinogram shape {beta.shape[-2:]} does not match geometry {geom.sinogram_shape}"
        )
    lead = beta.shape[:-2]
    flat = beta.reshape(-1, geom.n_angles * geom.n_det)
    return np.asarray(system_matrix(geom).T @ flat.T).T.reshape((*lead, *geom.image_shape))


def ray_lengths(geom: ScanGeometry) -> NDArray[np.float64]:
    """Intersection length |L(theta, l)| of every ray with the image, shape (N_theta, N_d)."""
    return project(geom, np.ones((1, *geom.image_shape)))[0]


def operator_norm(geom: ScanGeometry, iterations: int = 100, seed: int = 0) -> float:
    """Estimate ||R||_2 by power iteration on R^T R."""
    matrix = system_matrix(geom)
    x = np.random.default_rng(seed).standard_normal(matrix.shape[1])
    x /= np.linalg.norm(x)
    estimate = 0.0
    for _ in range(iterations):
        x = matrix.T @ (matrix @ x)
        estimate = float(np.linalg.norm(x))
        if estimate == 0.0:
            return 0.0
        x /= estimate
    return math.sqrt(estimate)
