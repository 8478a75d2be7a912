"""Tests for the parallel-beam ray transform."""

from __future__ import annotations

import math

import numpy as np
import pytest

from learned_spectral_ct.tomo import (
    ScanGeometry,
    backproject,
    operator_norm,
    project,
    ray_lengths,
    system_matrix,
)


def dense_ray_transform(geom: ScanGeometry) -> np.ndarray:
    """Independent oracle: clip each ray against every pixel square (Liang-Barsky style)."""
    p = geom.pixel_size
    x0 = -0.5 * geom.n_pix_x * p
    y0 = -0.5 * geom.n_pix_y * p
    matrix = np.zeros((geom.n_angles * geom.n_det, geom.n_pix_y * geom.n_pix_x))
    for a, theta in enumerate(geom.angles):
        c, s = math.cos(theta), math.sin(theta)
        for l, u in enumerate(geom.detector_positions):
            point, direction = (u * c, u * s), (-s, c)
            for iy in range(geom.n_pix_y):
                for ix in range(geom.n_pix_x):
                    lo, hi = -math.inf, math.inf
                    inside = True
                    box = ((x0 + ix * p, x0 + (ix + 1) * p), (y0 + iy * p, y0 + (iy + 1) * p))
                    for axis in range(2):
                        start, d = point[axis], direction[axis]
                        low, high = box[axis]
                        if abs(d) < 1e-12:
                            inside &= low <= start < high
                        else:
                            t1, t2 = (low - start) / d, (high - start) / d
                            lo, hi = max(lo, min(t1, t2)), min(hi, max(t1, t2))
                    if inside and hi > lo:
                        matrix[a * geom.n_det + l, iy * geom.n_pix_x + ix] = hi - lo
    return matrix


class TestScanGeometry:
    """Tests for ScanGeometry."""

    def test_parallel_defaults_cover_diagonal(self) -> None:
        """Without n_det the detector spans the image diagonal."""
        geom = ScanGeometry.parallel(128, 180)
        assert geom.n_det == math.ceil(128 * math.sqrt(2)) + 1
        assert geom.angles[0] == 0.0 and geom.angles[-1] < math.pi

    def test_table_geometry(self) -> None:
        """The e_5 scan: 128 pixels of 1 cm, 183 detector elements of 1 cm."""
        geom = ScanGeometry.parallel(128, 180, 1.0, 183, 1.0)
        assert geom.sinogram_shape == (180, 183)
        assert geom.image_shape == (128, 128)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_pix_x": 0},
            {"pixel_size": 0.0},
            {"angles": (0.5, 0.1)},
            {"angles": (0.0, math.pi)},
        ],
    )
    def test_rejects_invalid(self, kwargs: dict) -> None:
        """Counts, sizes and angle ordering are validated."""
        base = {
            "n_pix_x": 4,
            "n_pix_y": 4,
            "pixel_size": 1.0,
            "angles": (0.0, 1.0),
            "n_det": 6,
            "det_elem_size": 1.0,
        }
        with pytest.raises(ValueError):
            ScanGeometry(**{**base, **kwargs})

    def test_geometry_is_hashable(self) -> None:
        """Geometries key the system-matrix cache."""
        a = ScanGeometry.parallel(4, 3)
        assert hash(a) == hash(ScanGeometry.parallel(4, 3))


class TestProject:
    """Tests for forward projection."""

    def test_constant_image_gives_ray_lengths(self, geom8: ScanGeometry) -> None:
        """q = c gives c * |L| on every ray."""
        sino = project(geom8, np.full((1, 8, 8), 0.3))
        np.testing.assert_allclose(sino[0], 0.3 * ray_lengths(geom8), rtol=1e-12)

    def test_single_pixel_axis_aligned(self) -> None:
        """A ray through the centre of a unit pixel at theta = 0 sees one side length."""
        geom = ScanGeometry(1, 1, 2.0, (0.0,), 1, 2.0)
        assert project(geom, np.ones((1, 1, 1)))[0, 0, 0] == pytest.approx(2.0)

    def test_matches_dense_oracle(self) -> None:
        """Siddon traversal equals a per-pixel clipping oracle."""
        geom = ScanGeometry.parallel(16, 7, pixel_size=0.5)
        image = np.random.default_rng(0).uniform(size=(16, 16))
        expected = (dense_ray_transform(geom) @ image.reshape(-1)).reshape(geom.sinogram_shape)
        np.testing.assert_allclose(project(geom, image), expected, rtol=1e-12, atol=1e-12)

    def test_rejects_wrong_shape(self, geom8: ScanGeometry) -> None:
        """Images must match the geometry."""
        with pytest.raises(ValueError, match="image shape"):
            project(geom8, np.zeros((1, 7, 8)))

    def test_leading_axes_are_independent(self, geom8: ScanGeometry, rng) -> None:
        """Materials and batches are projected separately."""
        images = rng.uniform(size=(2, 3, 8, 8))
        stacked = project(geom8, images)
        np.testing.assert_allclose(stacked[1, 2], project(geom8, images[1, 2]))

    def test_rotation_by_pi(self, rng) -> None:
        """Flipping both image axes reverses the detector for every angle."""
        geom = ScanGeometry.parallel(8, 4, n_det=12)
        image = rng.uniform(size=(8, 8))
        np.testing.assert_allclose(
            project(geom, image[::-1, ::-1]), project(geom, image)[:, ::-1], atol=1e-12
        )


class TestBackproject:
    """Tests for the adjoint."""

    def test_adjoint_identity(self, rng) -> None:
        """<R q, beta> == <q, R^T beta> for 20 random pairs on 32x32."""
        geom = ScanGeometry.parallel(32, 20)
        for _ in range(20):
            q = rng.standard_normal(geom.image_shape)
            beta = rng.standard_normal(geom.sinogram_shape)
            lhs = np.sum(project(geom, q) * beta)
            rhs = np.sum(q * backproject(geom, beta))
            assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_zero_sinogram(self, geom8: ScanGeometry) -> None:
        """R^T 0 = 0."""
        np.testing.assert_array_equal(backproject(geom8, np.zeros(geom8.sinogram_shape)), 0.0)

    def test_single_ray_footprint(self, geom8: ScanGeometry) -> None:
        """Back-projecting a unit ray gives that ray's row of R."""
        beta = np.zeros(geom8.sinogram_shape)
        beta[2, 5] = 1.0
        row = system_matrix(geom8)[2 * geom8.n_det + 5].toarray().reshape(geom8.image_shape)
        np.testing.assert_allclose(backproject(geom8, beta), row)


class TestRayLengths:
    """Tests for per-ray chord lengths."""

    def test_central_ray_at_zero(self) -> None:
        """theta = 0 through the centre of a square of side D has length D."""
        geom = ScanGeometry(10, 10, 0.5, (0.0,), 3, 0.5)
        assert ray_lengths(geom)[0, 1] == pytest.approx(5.0)

    def test_diagonal_ray(self) -> None:
        """theta = pi/4 through the centre of a square of side D has length D sqrt(2)."""
        geom = ScanGeometry(10, 10, 1.0, (math.pi / 4,), 1, 1.0)
        assert ray_lengths(geom)[0, 0] == pytest.approx(10.0 * math.sqrt(2))

    def test_ray_outside_domain(self) -> None:
        """Rays that miss the image have zero length."""
        geom = ScanGeometry(4, 4, 1.0, (0.0,), 9, 1.0)
        lengths = ray_lengths(geom)
        assert lengths[0, 0] == 0.0 and lengths[0, -1] == 0.0

    def test_equals_projection_of_ones(self, geom16: ScanGeometry) -> None:
        """ray_lengths is project(ones) exactly."""
        np.testing.assert_array_equal(
            ray_lengths(geom16), project(geom16, np.ones((1, *geom16.image_shape)))[0]
        )


class TestOperatorNorm:
    """Tests for the power-iteration norm estimate."""

    def test_matches_largest_singular_value(self, geom8: ScanGeometry) -> None:
        """Power iteration converges to the spectral norm."""
        dense = system_matrix(geom8).toarray()
        assert operator_norm(geom8, iterations=300) == pytest.approx(
            np.linalg.norm(dense, 2), rel=1e-4
        )
