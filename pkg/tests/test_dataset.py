"""Tests for dataset generation and loading."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from learned_spectral_ct.dataset import MANIFEST, Dataset, generate_dataset, make_sample
from learned_spectral_ct.errors import DatasetError
from learned_spectral_ct.phantoms import PhantomConfig
from learned_spectral_ct.spectral import SpectralSystem
from learned_spectral_ct.storage import LOCK_NAME, output_lock
from learned_spectral_ct.tomo import ScanGeometry, project

MATERIALS = ("bone", "soft_tissue", "air")


@pytest.fixture
def phantom_cfg() -> PhantomConfig:
    """Sparse random ellipses on the three-material basis."""
    return PhantomConfig(materials=MATERIALS, mean_ellipses=4)


def blobs(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


class TestGenerateDataset:
    """Tests for generate_dataset."""

    def test_writes_samples_and_manifest(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """count samples produce three blobs each plus a manifest with shapes and seed."""
        manifest_path = generate_dataset(
            phantom_cfg, geom8, small_system, 2, 7, tmp_path / "ds", metadata={"note": "x"}
        )
        manifest = json.loads(manifest_path.read_text())
        assert manifest["count"] == 2 and manifest["seed"] == 7
        assert manifest["shapes"]["y"] == [4, *geom8.sinogram_shape]
        assert manifest["spectral"]["materials"] == list(MATERIALS)
        assert manifest["config"] == {"note": "x"}
        names = {p.name for p in (tmp_path / "ds").iterdir()}
        assert {"q_0.f32", "beta_1.f32", "y_1.f32", MANIFEST} <= names
        assert LOCK_NAME not in names

    def test_zero_count_writes_manifest_only(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """count = 0 is valid."""
        generate_dataset(phantom_cfg, geom8, small_system, 0, 0, tmp_path / "empty")
        assert [p.name for p in (tmp_path / "empty").iterdir()] == [MANIFEST]

    def test_byte_identical_reruns(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """Same arguments, same bytes, independent of the worker count."""
        generate_dataset(phantom_cfg, geom8, small_system, 3, 5, tmp_path / "a")
        generate_dataset(phantom_cfg, geom8, small_system, 3, 5, tmp_path / "b", workers=3)
        assert blobs(tmp_path / "a") == blobs(tmp_path / "b")

    def test_different_seeds_differ(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """Test sets drawn with another seed are different samples."""
        generate_dataset(phantom_cfg, geom8, small_system, 1, 1, tmp_path / "a")
        generate_dataset(phantom_cfg, geom8, small_system, 1, 2, tmp_path / "b")
        first, second = tmp_path / "a" / "y_0.f32", tmp_path / "b" / "y_0.f32"
        assert first.read_bytes() != second.read_bytes()

    def test_refuses_non_empty_directory(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """Existing content is only replaced with overwrite."""
        out = tmp_path / "ds"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        with pytest.raises(DatasetError, match="not empty"):
            generate_dataset(phantom_cfg, geom8, small_system, 1, 0, out)
        generate_dataset(phantom_cfg, geom8, small_system, 1, 0, out, overwrite=True)
        assert (out / MANIFEST).is_file()

    def test_overwrite_removes_stale_samples(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """Regenerating fewer samples leaves no blobs from the earlier run."""
        out = tmp_path / "ds"
        generate_dataset(phantom_cfg, geom8, small_system, 3, 0, out)
        generate_dataset(phantom_cfg, geom8, small_system, 1, 0, out, overwrite=True)
        assert not (out / "y_2.f32").exists()

    def test_locked_directory(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """A concurrent writer holding the lock makes generation fail."""
        out = tmp_path / "ds"
        with output_lock(out), pytest.raises(DatasetError, match="locked"):
            generate_dataset(phantom_cfg, geom8, small_system, 1, 0, out)

    def test_negative_count(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """Counts must be non-negative."""
        with pytest.raises(ValueError):
            generate_dataset(phantom_cfg, geom8, small_system, -1, 0, tmp_path / "ds")


class TestDataset:
    """Tests for reading datasets back."""

    @pytest.fixture
    def dataset(
        self,
        tmp_path: Path,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> Dataset:
        generate_dataset(phantom_cfg, geom8, small_system, 4, 3, tmp_path / "ds")
        return Dataset.load(tmp_path / "ds")

    def test_samples_match_generator(
        self,
        dataset: Dataset,
        phantom_cfg: PhantomConfig,
        geom8: ScanGeometry,
        small_system: SpectralSystem,
    ) -> None:
        """Stored samples equal regenerated ones up to float32 rounding."""
        expected = make_sample(phantom_cfg, geom8, small_system, 3, 2)
        np.testing.assert_array_equal(dataset[2].q, expected.q.astype(np.float32))
        np.testing.assert_allclose(dataset[2].y, expected.y, rtol=1e-6)

    def test_stored_projections_are_consistent(self, dataset: Dataset, geom8: ScanGeometry) -> None:
        """beta blobs are the projections of the q blobs."""
        sample = dataset[0]
        np.testing.assert_allclose(sample.beta, project(geom8, sample.q), rtol=1e-6, atol=1e-6)

    def test_sequence_protocol(self, dataset: Dataset) -> None:
        """len, negative indices and iteration behave like a sequence."""
        assert len(dataset) == 4
        assert dataset[-1].q.tobytes() == dataset[3].q.tobytes()
        assert len(list(dataset)) == 4
        with pytest.raises(IndexError):
            dataset[4]

    def test_materials(self, dataset: Dataset) -> None:
        """Material names come from the manifest."""
        assert dataset.materials == list(MATERIALS)

    def test_stack(self, dataset: Dataset, geom8: ScanGeometry) -> None:
        """stack adds a batch axis to every field."""
        batch = dataset.stack([0, 2, 2])
        assert batch["q"].shape == (3, 3, *geom8.image_shape)
        assert batch["y"].shape == (3, 4, *geom8.sinogram_shape)

    def test_split_takes_validation_from_the_tail(self, dataset: Dataset) -> None:
        """The last samples are held out."""
        assert dataset.split(1) == ([0, 1, 2], [3])
        assert dataset.split(0) == ([0, 1, 2, 3], [])
        with pytest.raises(ValueError):
            dataset.split(4)

    def test_load_detects_truncated_blob(self, dataset: Dataset) -> None:
        """A short blob is reported on load."""
        blob = dataset.path / "y_1.f32"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(DatasetError, match="y_1.f32"):
            Dataset.load(dataset.path)

    def test_missing_manifest(self, tmp_path: Path) -> None:
        """A directory without a manifest is not a dataset."""
        with pytest.raises(DatasetError, match=MANIFEST):
            Dataset(tmp_path)
