"""Tests for the classical ADMM solvers and their proximal operators."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from learned_spectral_ct.classical import (
    SolverConfig,
    admm_imaging,
    admm_unmixing,
    classical_pipeline,
    kl_prox,
    project_simplex_scaled,
    total_variation,
    tv_prox,
)
from learned_spectral_ct.materials import MaterialTable
from learned_spectral_ct.metrics import nrmse
from learned_spectral_ct.phantoms import shepp_logan_material
from learned_spectral_ct.spectral import SpectralSystem, build_system, forward_counts
from learned_spectral_ct.tomo import ScanGeometry, operator_norm, project, ray_lengths


def grid_simplex_projection(v: np.ndarray, radius: float, step: float = 1e-4) -> np.ndarray:
    """Brute-force nearest point of the scaled simplex (N = 2 or 3) on a grid."""
    ticks = np.arange(0.0, radius + step / 2, step)
    if v.size == 2:
        candidates = np.stack([ticks, radius - ticks], axis=1)
    else:
        coarse = ticks[:: max(1, int(0.01 / step))]
        a, b = np.meshgrid(coarse, coarse, indexing="ij")
        keep = a + b <= radius + 1e-12
        candidates = np.stack([a[keep], b[keep], radius - a[keep] - b[keep]], axis=1)
    return candidates[np.argmin(np.sum((candidates - v) ** 2, axis=1))]


class TestSolverConfig:
    """Tests for SolverConfig validation."""

    @pytest.mark.parametrize(
        "kwargs", [{"lam": -1.0}, {"tau": 0.0}, {"max_iters": 0}, {"inner_iters": 0}]
    )
    def test_rejects_invalid(self, kwargs: dict) -> None:
        """Negative weights, non-positive steps and empty iteration budgets are invalid."""
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)


class TestSimplexProjection:
    """Tests for project_simplex_scaled."""

    def test_feasible_point_unchanged(self) -> None:
        """Projection is the identity on the simplex."""
        beta = np.array([[0.2], [0.5], [0.3]])
        np.testing.assert_allclose(project_simplex_scaled(beta, np.array([1.0])), beta)

    def test_two_material_example(self) -> None:
        """(2, 0) with |L| = 1 projects to (1, 0)."""
        out = project_simplex_scaled(np.array([[2.0], [0.0]]), np.array([1.0]))
        np.testing.assert_allclose(out[:, 0], [1.0, 0.0])

    def test_centroid(self) -> None:
        """(1, 1, 1) with |L| = 3 is feasible."""
        out = project_simplex_scaled(np.ones((3, 1)), np.array([3.0]))
        np.testing.assert_allclose(out[:, 0], [1.0, 1.0, 1.0])

    @pytest.mark.parametrize("n", [2, 3])
    def test_matches_grid_search(self, n: int, rng) -> None:
        """The projection agrees with a brute-force nearest point."""
        for _ in range(5):
            v = rng.uniform(-1.0, 2.0, size=n)
            radius = float(rng.uniform(0.5, 2.0))
            got = project_simplex_scaled(v[:, None], np.array([radius]))[:, 0]
            oracle = grid_simplex_projection(v, radius)
            tolerance = 1e-3 if n == 2 else 1.5e-2
            np.testing.assert_allclose(got, oracle, atol=tolerance)

    def test_feasible_idempotent_nonexpansive(self, rng) -> None:
        """Outputs lie on the simplex, projecting twice changes nothing, distances shrink."""
        lengths = rng.uniform(0.0, 3.0, size=(4, 5))
        a = rng.standard_normal((3, 4, 5)) * 2
        b = rng.standard_normal((3, 4, 5)) * 2
        pa, pb = project_simplex_scaled(a, lengths), project_simplex_scaled(b, lengths)
        assert np.all(pa >= 0)
        np.testing.assert_allclose(pa.sum(axis=0), lengths, atol=1e-12)
        np.testing.assert_allclose(project_simplex_scaled(pa, lengths), pa, atol=1e-12)
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12

    def test_zero_length_rays(self) -> None:
        """Rays that miss the image map to zero."""
        out = project_simplex_scaled(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.0, 1.0]))
        np.testing.assert_array_equal(out[:, 0], 0.0)

    def test_negative_lengths(self) -> None:
        """Negative ray lengths are invalid."""
        with pytest.raises(ValueError, match="non-negative"):
            project_simplex_scaled(np.zeros((2, 1)), np.array([-1.0]))


class TestTVProx:
    """Tests for the total-variation proximal map."""

    def test_zero_weight_is_identity(self, rng) -> None:
        """weight = 0 returns the input exactly."""
        image = rng.standard_normal((5, 6))
        np.testing.assert_array_equal(tv_prox(image, 0.0), image)

    def test_constant_image_unchanged(self) -> None:
        """TV of a constant is zero."""
        np.testing.assert_allclose(tv_prox(np.full((6, 6), 2.5), 3.0), 2.5)

    def test_energy_decreases(self, rng) -> None:
        """The prox lowers 1/2 ||x - u||^2 + w TV(x) relative to the input."""
        image = rng.standard_normal((12, 12))
        weight = 0.3

        def energy(x: np.ndarray) -> float:
            return 0.5 * float(np.sum((x - image) ** 2)) + weight * total_variation(x)

        few, many = tv_prox(image, weight, 5), tv_prox(image, weight, 200)
        assert energy(few) < energy(image)
        assert energy(many) <= energy(few) + 1e-9

    def test_step_levels_move_together(self) -> None:
        """A step of height h, weight w: each plateau moves by w / (plateau length)."""
        height, weight, width = 1.0, 0.2, 8
        image = np.zeros((1, 2 * width))
        image[:, width:] = height
        out = tv_prox(image, weight, 2000)
        np.testing.assert_allclose(out[0, :width], weight / width, atol=5e-3)
        np.testing.assert_allclose(out[0, width:], height - weight / width, atol=5e-3)

    def test_negative_weight(self) -> None:
        """Weights must be non-negative."""
        with pytest.raises(ValueError):
            tv_prox(np.zeros((3, 3)), -1.0)

    def test_warm_start_continues_iterations(self, rng) -> None:
        """Two warm-started calls of 10 iterations equal one cold call of 20."""
        image = rng.standard_normal((2, 9, 9))
        dual = np.zeros((2, *image.shape))
        tv_prox(image, 0.4, 10, dual=dual)
        np.testing.assert_allclose(tv_prox(image, 0.4, 10, dual=dual), tv_prox(image, 0.4, 20))

    def test_dual_shape_checked(self) -> None:
        """The warm-start dual must match the image."""
        with pytest.raises(ValueError, match="dual shape"):
            tv_prox(np.zeros((4, 4)), 1.0, dual=np.zeros((2, 3, 3)))


class TestKLProx:
    """Tests for the closed-form KL proximal map."""

    def test_optimality(self, rng) -> None:
        """The result zeroes the derivative step (1 - y / z) + z - v."""
        v = rng.uniform(-1.0, 3.0, 20)
        y = rng.uniform(0.0, 2.0, 20)
        z = kl_prox(v, y, 0.7)
        np.testing.assert_allclose(0.7 * (1 - y / z) + z - v, 0.0, atol=1e-10)

    def test_zero_counts(self) -> None:
        """For y = 0 the prox is a shifted positive part."""
        np.testing.assert_allclose(kl_prox(np.array([2.0, 0.1]), np.zeros(2), 0.5), [1.5, 0.0])


class TestAdmmImaging:
    """Tests for the linearised-ADMM imaging solver."""

    @pytest.fixture
    def geom32(self) -> ScanGeometry:
        return ScanGeometry.parallel(32, 30)

    def test_reduces_error_on_shepp_logan(self, geom32: ScanGeometry, tmp_path: Path) -> None:
        """Noiseless data: NRMSE drops at least fivefold from the zero start in 200 iterations."""
        q_true = shepp_logan_material(geom32, ("bone", "soft_tissue", "calcium", "adipose", "air"))
        image = q_true[1:2]
        beta = project(geom32, image)
        trace = tmp_path / "trace.csv"
        result = admm_imaging(
            geom32, beta, SolverConfig(lam=1e-4, max_iters=200, tolerance=1e-12), trace_path=trace
        )
        assert nrmse(result.solution, image) <= nrmse(np.zeros_like(image), image) / 5
        with trace.open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["iteration", "objective"]
        assert len(rows) == result.iterations + 1

    def test_objective_drops(self, geom32: ScanGeometry) -> None:
        """The data misfit ends far below its starting value."""
        image = np.zeros((1, 32, 32))
        image[0, 8:20, 10:24] = 1.0
        result = admm_imaging(
            geom32, project(geom32, image), SolverConfig(lam=1e-4, max_iters=60, tolerance=0.0)
        )
        assert result.iterations == 60
        assert result.objective[-1] < 0.1 * result.objective[0]

    def test_default_settings_leave_the_zero_start(self, geom32: ScanGeometry) -> None:
        """With the default tolerance the solver iterates past the zero first step."""
        image = np.zeros((1, 32, 32))
        image[0, 8:20, 10:24] = 1.0
        result = admm_imaging(geom32, project(geom32, image), SolverConfig())
        assert result.iterations > 1
        assert result.solution.max() > 0
        assert nrmse(result.solution, image) < 0.8 * nrmse(np.zeros_like(image), image)

    @pytest.mark.parametrize("lam", [1e-4, 1e-2])
    def test_objective_non_increasing_after_warmup(self, geom32: ScanGeometry, lam: float) -> None:
        """From iteration 5 on the objective never rises by more than 1e-9 relative."""
        image = np.zeros((1, 32, 32))
        image[0, 6:22, 9:25] = 0.8
        result = admm_imaging(
            geom32, project(geom32, image), SolverConfig(lam=lam, max_iters=150, tolerance=0.0)
        )
        trace = result.objective[4:]
        for previous, current in zip(trace, trace[1:], strict=False):
            assert current <= previous * (1 + 1e-9)

    def test_large_weight_gives_constant_image(self, geom8: ScanGeometry) -> None:
        """A huge TV weight flattens the reconstruction to a constant."""
        image = np.zeros((1, 8, 8))
        image[0, 2:5, 3:7] = 1.0
        cfg = SolverConfig(lam=1e6, max_iters=60, tolerance=0.0, inner_iters=300)
        solution = admm_imaging(geom8, project(geom8, image), cfg).solution
        assert solution.mean() > 0
        assert np.ptp(solution) <= 1e-2 * solution.mean()

    def test_zero_data_fixed_point(self, geom32: ScanGeometry) -> None:
        """beta = 0 gives q = 0."""
        result = admm_imaging(geom32, np.zeros((2, *geom32.sinogram_shape)), SolverConfig())
        np.testing.assert_array_equal(result.solution, 0.0)
        assert result.converged and result.reason == "tolerance"

    def test_rejects_oversized_step(self, geom32: ScanGeometry) -> None:
        """tau ||R||^2 > 1 is rejected with the estimated norm in the message."""
        tau = 2.0 / operator_norm(geom32) ** 2
        with pytest.raises(ValueError, match=r"\|\|R\|\|"):
            admm_imaging(geom32, np.zeros((1, *geom32.sinogram_shape)), SolverConfig(tau=tau))


class TestAdmmUnmixing:
    """Tests for the nonlinear-constraint ADMM unmixing solver."""

    @pytest.fixture
    def two_by_two(self, table: MaterialTable) -> SpectralSystem:
        """Two materials, two bins, high counts."""
        return build_system(table, ["bone", "soft_tissue"], n_bins=2, n_quad=8, intensity=1e6)

    @pytest.fixture
    def single_ray(self) -> ScanGeometry:
        """One ray through the centre of a 4 cm square."""
        return ScanGeometry(4, 4, 1.0, (0.3,), 1, 1.0)

    def test_true_projection_is_fixed_point(
        self, two_by_two: SpectralSystem, geom8: ScanGeometry, rng
    ) -> None:
        """Noiseless counts with a warm start at the truth stay put."""
        lengths = ray_lengths(geom8)
        share = rng.uniform(size=lengths.shape)
        beta = np.stack([share * lengths, (1 - share) * lengths])
        y = forward_counts(two_by_two, beta)
        result = admm_unmixing(
            two_by_two, geom8, y, SolverConfig(lam=0.0, tau=1.0, max_iters=20), initial=beta
        )
        np.testing.assert_allclose(result.solution, beta, atol=1e-8)

    def test_matches_brute_force_on_single_ray(
        self, two_by_two: SpectralSystem, single_ray: ScanGeometry
    ) -> None:
        """One degree of freedom: compare with a grid search of the KL objective."""
        length = float(ray_lengths(single_ray)[0, 0])
        truth = np.array([[[0.3 * length]], [[0.7 * length]]])
        y = np.round(forward_counts(two_by_two, truth) * 1.01)
        result = admm_unmixing(
            two_by_two,
            single_ray,
            y,
            SolverConfig(lam=0.0, tau=1.0, max_iters=300, tolerance=1e-12),
        )
        fractions = np.linspace(0.0, 1.0, 100_001)
        candidates = np.stack([fractions * length, (1 - fractions) * length])[:, None, :]
        ybar = forward_counts(two_by_two, candidates)
        objective = np.sum(ybar - y * np.log(ybar), axis=(0, 1))
        best = fractions[np.argmin(objective)] * length
        assert result.solution[0, 0, 0] == pytest.approx(best, abs=1e-3)

    def test_output_is_feasible(self, small_system: SpectralSystem, geom8: ScanGeometry) -> None:
        """Whatever the data, the result lies on the scaled simplex."""
        q = np.zeros((3, 8, 8))
        q[0, 2:4, 2:6] = 1.0
        q[1, 4:7, 1:7] = 1.0
        q[2] = 1.0 - q[0] - q[1]
        y = forward_counts(small_system, project(geom8, q))
        result = admm_unmixing(small_system, geom8, y, SolverConfig(lam=1e-3, max_iters=15))
        assert np.all(result.solution >= 0)
        np.testing.assert_allclose(result.solution.sum(axis=0), ray_lengths(geom8), atol=1e-9)

    def test_rejects_negative_counts(
        self, two_by_two: SpectralSystem, single_ray: ScanGeometry
    ) -> None:
        """Counts must be non-negative."""
        with pytest.raises(ValueError, match="non-negative"):
            admm_unmixing(two_by_two, single_ray, -np.ones((2, 1, 1)), SolverConfig())

    def test_rejects_wrong_shape(
        self, two_by_two: SpectralSystem, single_ray: ScanGeometry
    ) -> None:
        """Counts must have shape (N_b, N_theta, N_d)."""
        with pytest.raises(ValueError, match="shape"):
            admm_unmixing(two_by_two, single_ray, np.ones((3, 1, 1)), SolverConfig())


class TestClassicalPipeline:
    """Tests for unmixing followed by imaging."""

    def test_shapes_and_feasibility(
        self, small_system: SpectralSystem, geom8: ScanGeometry
    ) -> None:
        """The pipeline returns images and simplex-feasible projections."""
        q = np.zeros((3, 8, 8))
        q[1, 2:6, 2:6] = 1.0
        q[2] = 1.0 - q[1]
        y = forward_counts(small_system, project(geom8, q))
        q_hat, beta_hat = classical_pipeline(
            small_system,
            geom8,
            y,
            SolverConfig(lam=0.0, tau=1.0, max_iters=20),
            SolverConfig(lam=1e-3, max_iters=50),
        )
        assert q_hat.shape == q.shape
        assert np.all(q_hat >= 0)
        np.testing.assert_allclose(beta_hat.sum(axis=0), ray_lengths(geom8), atol=1e-9)
        assert q_hat[1, 2:6, 2:6].mean() > q_hat[1, :, 0].mean()
