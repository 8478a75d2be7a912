"""Tests for configuration loading and the builders."""

from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from learned_spectral_ct.config import (
    RESOLVED_NAME,
    build_geometry,
    build_spectral_system,
    config_to_dict,
    load_config,
    parse_override,
    phantom_config,
    preset_names,
    save_resolved,
)
from learned_spectral_ct.errors import ConfigError


class TestPresets:
    """Tests for the bundled presets."""

    def test_names(self) -> None:
        """All bundled presets are discoverable."""
        assert {"e_5", "e_5_small", "structured"} <= set(preset_names())

    @pytest.mark.parametrize("name", ["e_5", "e_5_small", "structured"])
    def test_presets_load_and_build(self, name: str) -> None:
        """Every preset resolves and yields a geometry, a system and a phantom setup."""
        cfg = load_config(name)
        geom = build_geometry(cfg)
        system = build_spectral_system(cfg)
        assert system.materials == tuple(cfg.spectral.materials)
        assert geom.image_shape == (cfg.geometry.n_pix, cfg.geometry.n_pix)
        assert phantom_config(cfg).materials == cfg.spectral.materials

    def test_table_setting(self) -> None:
        """e_5 is the 128-pixel, five-material, eight-bin setting at 1e12 photons."""
        cfg = load_config("e_5")
        assert cfg.geometry.n_pix == 128 and cfg.geometry.n_angles == 180
        assert cfg.geometry.n_det == 183
        assert cfg.spectral.materials == ("bone", "soft_tissue", "calcium", "adipose", "air")
        assert cfg.spectral.n_bins == 8
        assert cfg.spectral.intensity == 1e12

    def test_unknown_preset(self) -> None:
        """The error lists what is available."""
        with pytest.raises(ConfigError, match="e_5_small"):
            load_config("e_6")


class TestLoadConfig:
    """Tests for files, overrides and validation."""

    def test_file_over_preset_and_overrides_over_file(self, tmp_path: Path) -> None:
        """Precedence is preset < file < --set."""
        path = tmp_path / "cfg.yaml"
        path.write_text("geometry:\n  n_pix: 24\ntraining:\n  steps: 7\n")
        cfg = load_config("e_5_small", path, ["training.steps=9"])
        assert cfg.geometry.n_pix == 24
        assert cfg.geometry.n_angles == 60
        assert cfg.training.steps == 9
        assert cfg.base_dir == str(tmp_path.resolve())

    def test_unknown_key(self, tmp_path: Path) -> None:
        """Misspelled keys are reported with their path."""
        path = tmp_path / "cfg.yaml"
        path.write_text("geometry:\n  n_pixels: 24\n")
        with pytest.raises(ConfigError, match="geometry: unknown key.*n_pixels"):
            load_config(path=path)

    def test_invalid_value(self) -> None:
        """Dataclass validation errors surface as ConfigError."""
        with pytest.raises(ConfigError, match="training"):
            load_config("e_5_small", overrides=["training.method=joint"])

    def test_exponent_strings_become_floats(self, tmp_path: Path) -> None:
        """YAML 1.1 reads 1e12 as a string; numeric fields accept it."""
        path = tmp_path / "cfg.yaml"
        path.write_text("spectral:\n  intensity: 1e12\n")
        assert load_config(path=path).spectral.intensity == 1e12

    def test_non_numeric_string(self) -> None:
        """Text where a number belongs is rejected."""
        with pytest.raises(ConfigError, match="expected a number"):
            load_config(overrides=["spectral.intensity=lots"])

    def test_lists_become_tuples(self) -> None:
        """Sequence settings are stored as tuples."""
        cfg = load_config(overrides=["spectral.materials=[bone, soft_tissue, air]"])
        assert cfg.spectral.materials == ("bone", "soft_tissue", "air")

    def test_missing_file(self, tmp_path: Path) -> None:
        """A missing configuration file is a configuration error."""
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(path=tmp_path / "absent.yaml")

    def test_missing_referenced_file(self) -> None:
        """Spectrum and material files must exist."""
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(overrides=["spectral.spectrum_file=nowhere.txt"])

    def test_top_level_must_be_mapping(self, tmp_path: Path) -> None:
        """A YAML list is not a configuration."""
        path = tmp_path / "cfg.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path=path)

    def test_unknown_material(self) -> None:
        """Materials absent from the tables fail when the system is built."""
        cfg = load_config(overrides=["spectral.materials=[bone, unobtainium, air]"])
        with pytest.raises(ConfigError, match="spectral"):
            build_spectral_system(cfg)


class TestOverrides:
    """Tests for key=value parsing."""

    @pytest.mark.parametrize(
        ("text", "expected"),
        [
            ("seed=3", ("seed", 3)),
            ("training.learning_rate=1.0e-4", ("training.learning_rate", 1e-4)),
            ("phantom.kind=structured", ("phantom.kind", "structured")),
            ("geometry.n_det=null", ("geometry.n_det", None)),
        ],
    )
    def test_values_are_yaml(self, text: str, expected: tuple) -> None:
        """Values are parsed as YAML scalars."""
        assert parse_override(text) == expected

    @pytest.mark.parametrize("text", ["seed", "=3", "a=[1, 2"])
    def test_malformed(self, text: str) -> None:
        """Missing keys, missing '=' and broken YAML are rejected."""
        with pytest.raises(ConfigError):
            parse_override(text)

    def test_override_into_scalar(self) -> None:
        """A dotted path cannot descend into a scalar."""
        with pytest.raises(ConfigError, match="not a block"):
            load_config(overrides=["seed=1", "seed.value=1"])


class TestResolvedConfig:
    """Tests for writing the resolved configuration."""

    def test_round_trip(self, tmp_path: Path) -> None:
        """The written YAML loads back into the same configuration."""
        cfg = load_config("e_5_small", overrides=["seed=11"])
        path = save_resolved(cfg, tmp_path)
        assert path.name == RESOLVED_NAME
        assert load_config(path=path) == cfg
        assert yaml.safe_load(path.read_text())["seed"] == 11

    def test_plain_dict(self) -> None:
        """Tuples become lists so the dict serialises cleanly."""
        data = config_to_dict(load_config())
        assert isinstance(data["spectral"]["materials"], list)
        assert data["solver"]["unmixing"]["tau"] == 1.0
