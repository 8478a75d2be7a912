"""Material attenuation tables.

Mass attenuation coefficients (MACs) are stored as plain text assets, one block per
material::

    # material <name> density <rho>
    <E_keV> <mac_cm2_per_g>
    ...

Absorption edges are written as two rows with the same energy (below-edge value first).
Interpolation onto arbitrary energies is linear in log-log space and takes the right limit
exactly at an edge.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

_HEADER = re.compile(r"^#\s*material\s+(\S+)\s+density\s+(\S+)\s*$")

#: Names of the tables shipped with the package.
BUNDLED_MATERIALS = (
    "bone",
    "soft_tissue",
    "calcium",
    "air",
    "adipose",
    "blood",
    "omnipaque",
    "water",
)


@dataclass(frozen=True)
class MaterialCurve:
    """Tabulated MAC curve of a single material.

    Attributes:
        name: Material identifier.
        density: Density rho_k in g/cm^3.
        energies: Non-decreasing energy grid in keV; a repeated energy marks an edge.
        macs: Mass attenuation coefficients m_k(E) in cm^2/g on ``energies``.
    """

    name: str
    density: float
    energies: NDArray[np.float64]
    macs: NDArray[np.float64]

    def __post_init__(self) -> None:
        energies = np.asarray(self.energies, dtype=np.float64)
        macs = np.asarray(self.macs, dtype=np.float64)
        if energies.ndim != 1 or energies.shape != macs.shape or energies.size < 2:
            raise ValueError(f"Material {self.name!r}: need matching 1-D energy/MAC rows (>= 2)")
        steps = np.diff(energies)
        if np.any(steps < 0):
            raise ValueError(f"Material {self.name!r}: energies must be non-decreasing")
        # an edge is a single repeated energy, never three in a row
        if np.any((steps[:-1] == 0) & (steps[1:] == 0)) or steps[0] == 0 or steps[-1] == 0:
            raise ValueError(f"Material {self.name!r}: malformed absorption edge rows")
        if np.any(energies <= 0) or np.any(macs <= 0):
            raise ValueError(f"Material {self.name!r}: energies and MACs must be positive")
        if not self.density > 0:
            raise ValueError(f"Material {self.name!r}: density must be positive")
        object.__setattr__(self, "energies", energies)
        object.__setattr__(self, "macs", macs)

    @property
    def energy_range(self) -> tuple[float, float]:
        """Return the (min, max) tabulated energy in keV."""
        return float(self.energies[0]), float(self.energies[-1])

    def interpolate(self, energies: ArrayLike) -> NDArray[np.float64]:
        """Interpolate the MAC log-log onto ``energies`` (keV).

        Args:
            energies: Query energies, all within the tabulated range.

        Returns:
            MAC values in cm^2/g with the shape of ``energies``.

        Raises:
            ValueError: If any query energy lies outside the table.
        """
        query = np.asarray(energies, dtype=np.float64)
        e_min, e_max = self.energy_range
        if np.any(query < e_min) or np.any(query > e_max):
            raise ValueError(
                f"Material {self.name!r}: energies outside tabulated range [{e_min}, {e_max}] keV"
            )
        # side="right" places a query sitting on an edge after both rows: right limit
        upper = np.searchsorted(self.energies, query, side="right")
        upper = np.clip(upper, 1, self.energies.size - 1)
        lower = upper - 1
        log_e = np.log(self.energies)
        log_m = np.log(self.macs)
        t = (np.log(query) - log_e[lower]) / (log_e[upper] - log_e[lower])
        return np.exp(log_m[lower] + t * (log_m[upper] - log_m[lower]))

    def attenuation(self, energies: ArrayLike) -> NDArray[np.float64]:
        """Return linear attenuation coefficients mu_k(E) = m_k(E) rho_k in 1/cm."""
        return self.interpolate(energies) * self.density


@dataclass(frozen=True)
class MaterialTable:
    """An ordered collection of material MAC curves keyed by name."""

    curves: Mapping[str, MaterialCurve] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        """Return the material identifiers in table order."""
        return list(self.curves)

    def __contains__(self, name: object) -> bool:
        return name in self.curves

    def __getitem__(self, name: str) -> MaterialCurve:
        try:
            return self.curves[name]
        except KeyError:
            raise KeyError(f"Unknown material {name!r}; known: {', '.join(self.curves)}") from None

    def densities(self, selection: Sequence[str]) -> NDArray[np.float64]:
        """Return rho_k for the selected materials, in selection order."""
        return np.array([self[name].density for name in selection], dtype=np.float64)

    def merged(self, other: MaterialTable) -> MaterialTable:
        """Return a table with the curves of ``other`` added (overriding same names)."""
        return MaterialTable({**self.curves, **other.curves})

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> MaterialTable:
        """Parse the text table format.

        Args:
            text: File contents with one or more ``# material`` blocks.
            source: Name used in error messages.

        Returns:
            The parsed table.

        Raises:
            ValueError: On rows outside a block, malformed rows or duplicate names.
        """
        blocks: dict[str, tuple[float, list[tuple[float, float]]]] = {}
        current: str | None = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                match = _HEADER.match(line)
                if match:
                    current = match.group(1)
                    if current in blocks:
                        raise ValueError(f"{source}:{lineno}: duplicate material {current!r}")
                    blocks[current] = (float(match.group(2)), [])
                continue
            if current is None:
                raise ValueError(f"{source}:{lineno}: data row before any '# material' header")
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{source}:{lineno}: expected 'E_keV mac' row, got {line!r}")
            blocks[current][1].append((float(parts[0]), float(parts[1])))

        curves = {}
        for name, (density, rows) in blocks.items():
            data = np.array(rows, dtype=np.float64).reshape(-1, 2)
            curves[name] = MaterialCurve(name, density, data[:, 0], data[:, 1])
        return cls(curves)

    @classmethod
    def load(cls, paths: Path | str | Iterable[Path | str]) -> MaterialTable:
        """Load and merge one or more table files."""
        if isinstance(paths, str | Path):
            paths = [paths]
        table = cls()
        for path in paths:
            path = Path(path)
            table = table.merged(cls.parse(path.read_text(encoding="utf-8"), source=str(path)))
        return table


def load_bundled_table(names: Iterable[str] = BUNDLED_MATERIALS) -> MaterialTable:
    """Load the material tables shipped with the package.

    Args:
        names: Which bundled materials to load.

    Returns:
        A MaterialTable with those materials, in the given order.
    """
    root = resources.files("learned_spectral_ct") / "data" / "materials"
    table = MaterialTable()
    for name in names:
        asset = root / f"{name}.txt"
        if not asset.is_file():
            raise KeyError(f"No bundled table for material {name!r}")
        table = table.merged(MaterialTable.parse(asset.read_text(encoding="utf-8"), source=name))
    logger.debug("Loaded bundled material tables: %s", ", ".join(table.names))
    return table
