"""Experiment configuration: YAML presets, overrides and builders for the runtime objects.

A configuration is a YAML document with the blocks ``geometry``, ``spectral``, ``phantom``,
``solver``, ``networks``, ``training`` and ``evaluation`` (plus a top-level ``seed``). Every block
maps onto a frozen dataclass; unknown keys are rejected. Bundled presets live in
``learned_spectral_ct/presets``.
"""

from __future__ import annotations

import dataclasses
import logging
import typing
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from learned_spectral_ct.classical import SolverConfig
from learned_spectral_ct.errors import ConfigError
from learned_spectral_ct.learned_pd import UnrollConfig
from learned_spectral_ct.materials import MaterialTable, load_bundled_table
from learned_spectral_ct.phantoms import PhantomConfig
from learned_spectral_ct.spectral import SpectralSystem, build_system, load_spectrum
from learned_spectral_ct.tomo import ScanGeometry
from learned_spectral_ct.training import TrainingConfig

logger = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved.yaml"


@dataclass(frozen=True)
class GeometryConfig:
    """Square parallel-beam scan; ``n_det`` None covers the image diagonal."""

    n_pix: int = 128
    pixel_size: float = 1.0
    n_angles: int = 180
    n_det: int | None = 183
    det_elem_size: float | None = 1.0


@dataclass(frozen=True)
class SpectralConfig:
    """Material basis, binning and source.

    Attributes:
        materials: Basis materials in material-axis order.
        n_bins: Number of energy bins.
        e_min: Lower energy limit in keV.
        e_max: Upper energy limit in keV.
        n_quad: Quadrature nodes.
        intensity: Photons per ray y0.
        spectrum_file: Optional two-column source table; Kramers' law otherwise.
        kvp: Tube voltage of the Kramers shape (defaults to e_max).
        material_files: Extra material tables, merged over the bundled ones.
    """

    materials: tuple[str, ...] = ("bone", "soft_tissue", "calcium", "adipose", "air")
    n_bins: int = 8
    e_min: float = 30.0
    e_max: float = 140.0
    n_quad: int = 16
    intensity: float = 1e12
    spectrum_file: str | None = None
    kvp: float | None = None
    material_files: tuple[str, ...] = ()


@dataclass(frozen=True)
class PhantomSettings:
    kind: str = "ellipses"
    mean_ellipses: float = 25.0
    axis_range: tuple[float, float] = (0.05, 0.35)
    allow_overlap_mix: bool = False


@dataclass(frozen=True)
class SolverSettings:
    unmixing: SolverConfig = field(
        default_factory=lambda: SolverConfig(lam=0.0, tau=1.0, max_iters=100, inner_iters=30)
    )
    imaging: SolverConfig = field(default_factory=SolverConfig)


@dataclass(frozen=True)
class NetworkSettings:
    unmix: UnrollConfig = field(default_factory=UnrollConfig)
    reco: UnrollConfig = field(default_factory=UnrollConfig)


@dataclass(frozen=True)
class EvaluationConfig:
    """Test protocol: number of samples and whether to score density images."""

    n_samples: int = 100
    density_mode: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a command from a seed."""

    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    phantom: PhantomSettings = field(default_factory=PhantomSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    networks: NetworkSettings = field(default_factory=NetworkSettings)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0
    base_dir: str = "."


def _build(cls: type, data: Any, where: str) -> Any:
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, path)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            kwargs[name] = tuple(value)
        elif isinstance(value, str) and float in _members(hint):
            # PyYAML reads exponent literals such as 1e12 as strings
            try:
                kwargs[name] = float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected a number, got {value!r}") from None
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _members(hint: Any) -> tuple[Any, ...]:
    return typing.get_args(hint) or (hint,)


def _set_path(data: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {dotted}: {key} is not a block")
        node = child
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``key.path=value``; the value is parsed as YAML (so numbers and lists work)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value in {text!r}: {exc}") from exc


def preset_names() -> list[str]:
    root = resources.files("learned_spectral_ct") / "presets"
    return sorted(p.name.removesuffix(".yaml") for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_yaml(text: str, source: str) -> dict[str, Any]:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data


def load_config(
    preset: str | None = None,
    path: Path | str | None = None,
    overrides: Sequence[str] = (),
) -> ExperimentConfig:
    """Resolve a configuration from a preset and/or a file plus ``key=value`` overrides.

    The file, if given, is applied on top of the preset, and overrides on top of both.

    Raises:
        ConfigError: On unknown presets, unknown keys, invalid values or missing files.
    """
    data: dict[str, Any] = {}
    base_dir = Path.cwd()
    if preset is not None:
        asset = resources.files("learned_spectral_ct") / "presets" / f"{preset}.yaml"
        if not asset.is_file():
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(preset_names())}")
        data = _read_yaml(asset.read_text(encoding="utf-8"), f"preset {preset}")
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data = _merge(data, _read_yaml(text, str(path)))
        base_dir = path.resolve().parent
    for override in overrides:
        _set_path(data, *parse_override(override))
    data.setdefault("base_dir", str(base_dir))
    cfg = _build(ExperimentConfig, data, "")
    _check_files(cfg)
    logger.debug("Resolved configuration: %s", cfg)
    return cfg


def _merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _resolve(cfg: ExperimentConfig, name: str) -> Path:
    path = Path(name)
    return path if path.is_absolute() else Path(cfg.base_dir) / path


def _check_files(cfg: ExperimentConfig) -> None:
    names = [*cfg.spectral.material_files]
    if cfg.spectral.spectrum_file:
        names.append(cfg.spectral.spectrum_file)
    for name in names:
        if not _resolve(cfg, name).is_file():
            raise ConfigError(f"referenced file {name} does not exist (base {cfg.base_dir})")


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Plain nested dict (lists instead of tuples) suitable for YAML/JSON."""

    def plain(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, list | tuple):
            return [plain(v) for v in value]
        return value

    return plain(dataclasses.asdict(cfg))


def save_resolved(cfg: ExperimentConfig, directory: Path | str) -> Path:
    """Write the resolved configuration next to a command's outputs."""
    out = Path(directory) / RESOLVED_NAME
    out.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True), encoding="utf-8")
    return out


def build_geometry(cfg: ExperimentConfig) -> ScanGeometry:
    g = cfg.geometry
    try:
        return ScanGeometry.parallel(g.n_pix, g.n_angles, g.pixel_size, g.n_det, g.det_elem_size)
    except ValueError as exc:
        raise ConfigError(f"geometry: {exc}") from exc


def material_table(cfg: ExperimentConfig) -> MaterialTable:
    table = load_bundled_table()
    if cfg.spectral.material_files:
        table = table.merged(
            MaterialTable.load(_resolve(cfg, name) for name in cfg.spectral.material_files)
        )
    return table


def build_spectral_system(cfg: ExperimentConfig) -> SpectralSystem:
    s = cfg.spectral
    spectrum = load_spectrum(_resolve(cfg, s.spectrum_file)) if s.spectrum_file else None
    try:
        return build_system(
            material_table(cfg),
            s.materials,
            n_bins=s.n_bins,
            e_min=s.e_min,
            e_max=s.e_max,
            n_quad=s.n_quad,
            intensity=s.intensity,
            spectrum=spectrum,
            kvp=s.kvp,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"spectral: {exc}") from exc


def phantom_config(cfg: ExperimentConfig, seed: int | None = None) -> PhantomConfig:
    p = cfg.phantom
    try:
        return PhantomConfig(
            materials=cfg.spectral.materials,
            mean_ellipses=p.mean_ellipses,
            axis_range=p.axis_range,
            allow_overlap_mix=p.allow_overlap_mix,
            kind=p.kind,
            seed=cfg.seed if seed is None else seed,
        )
    except ValueError as exc:
        raise ConfigError(f"phantom: {exc}") from exc
