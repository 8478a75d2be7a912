"""Ground-truth material phantoms and synthetic measurements.

All phantoms are volume-fraction images ``q`` of shape (N, nPixY, nPixX) that are feasible on
the pixel simplex: fractions in [0, 1] summing to one per pixel. Ellipses are defined on the
normalised square [-1, 1]^2 spanned by the image.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from learned_spectral_ct.spectral import (
    BinnedCounts,
    SinogramStack,
    SpectralSystem,
    forward_counts,
    sample_counts,
)
from learned_spectral_ct.tomo import MaterialImage, ScanGeometry, project

logger = logging.getLogger(__name__)

AIR = "air"

#: Standard Shepp-Logan ellipses: (x0, y0, semi-axis a, semi-axis b, angle in degrees).
SHEPP_LOGAN_ELLIPSES = (
    (0.0, 0.0, 0.69, 0.92, 0.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0),
    (0.22, 0.0, 0.11, 0.31, -18.0),
    (-0.22, 0.0, 0.16, 0.41, 18.0),
    (0.0, 0.35, 0.21, 0.25, 0.0),
    (0.0, 0.1, 0.046, 0.046, 0.0),
    (0.0, -0.1, 0.046, 0.046, 0.0),
    (-0.08, -0.605, 0.046, 0.023, 0.0),
    (0.0, -0.605, 0.023, 0.023, 0.0),
    (0.06, -0.605, 0.023, 0.046, 0.0),
)
# material class per ellipse: shell, interior, two lateral voids, six inclusions
_SHEPP_LOGAN_CLASSES = ("bone", "tissue", "fifth", "fifth", *("calcium",) * 6)


@dataclass(frozen=True)
class Ellipse:
    """An ellipse on the normalised square, filled with one material index."""

    x0: float
    y0: float
    a: float
    b: float
    angle: float
    material: int

    def mask(self, xx: NDArray[np.float64], yy: NDArray[np.float64]) -> NDArray[np.bool_]:
        """Return the pixel-centre membership mask on the grid (xx, yy)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = xx - self.x0, yy - self.y0
        return ((dx * c + dy * s) / self.a) ** 2 + ((dy * c - dx * s) / self.b) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomConfig:
    """Random-ellipse phantom recipe.

    Attributes:
        materials: Ordered material names; must contain ``air`` (the background).
        mean_ellipses: Poisson mean of the number of ellipses.
        axis_range: Range of semi-axes as a fraction of the image side.
        allow_overlap_mix: Mix the last two covering materials 50/50 where ellipses overlap.
        kind: ``ellipses`` or ``structured``.
        seed: Base seed for dataset generation.
    """

    materials: tuple[str, ...] = ("bone", "soft_tissue", "calcium", "adipose", AIR)
    mean_ellipses: float = 25.0
    axis_range: tuple[float, float] = (0.05, 0.35)
    allow_overlap_mix: bool = False
    kind: str = "ellipses"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "materials", tuple(self.materials))
        object.__setattr__(self, "axis_range", tuple(self.axis_range))
        if not self.mean_ellipses > 0:
            raise ValueError("mean_ellipses must be positive")
        if AIR not in self.materials:
            raise ValueError(f"materials must include {AIR!r} as background")
        if len(self.materials) < 2:
            raise ValueError("need at least one non-air material")
        low, high = self.axis_range
        if not 0 < low <= high:
            raise ValueError(f"invalid axis range {self.axis_range}")
        if self.kind not in ("ellipses", "structured"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")

    @property
    def air_index(self) -> int:
        """Return the material index of the background."""
        return self.materials.index(AIR)

    @property
    def foreground(self) -> list[int]:
        """Return the indices of the non-air materials."""
        return [k for k, name in enumerate(self.materials) if name != AIR]


@dataclass(frozen=True, eq=False)
class Sample:
    """One training/test example: phantom, noiseless projections and measured counts."""

    q: MaterialImage
    beta: SinogramStack
    y: BinnedCounts


def _pixel_grid(geom: ScanGeometry) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if geom.n_pix_x < 1 or geom.n_pix_y < 1:
        raise ValueError("degenerate geometry")
    side = max(geom.n_pix_x, geom.n_pix_y)
    x = (np.arange(geom.n_pix_x) + 0.5 - 0.5 * geom.n_pix_x) * (2.0 / side)
    y = (np.arange(geom.n_pix_y) + 0.5 - 0.5 * geom.n_pix_y) * (2.0 / side)
    return np.meshgrid(x, y)


def draw_ellipses(cfg: PhantomConfig, rng: np.random.Generator) -> list[Ellipse]:
    """Draw the random ellipse parameters of one phantom.

    The count is Poisson(mean_ellipses); semi-axes are uniform in ``axis_range`` (times the half
    side, i.e. fractions of the full side on the [-1, 1] square), orientation uniform in
    [0, pi), centres uniform in the inscribed unit disc and the material uniform over non-air.
    """
    count = int(rng.poisson(cfg.mean_ellipses))
    foreground = cfg.foreground
    low, high = cfg.axis_range
    ellipses = []
    for _ in range(count):
        radius = math.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * math.pi)
        a, b = rng.uniform(2 * low, 2 * high, size=2)
        ellipses.append(
            Ellipse(
                x0=radius * math.cos(phi),
                y0=radius * math.sin(phi),
                a=float(a),
                b=float(b),
                angle=float(rng.uniform(0.0, math.pi)),
                material=foreground[int(rng.integers(len(foreground)))],
            )
        )
    return ellipses


def render_ellipses(
    ellipses: Sequence[Ellipse],
    geom: ScanGeometry,
    n_materials: int,
    background: int,
    overlap_mix: bool = False,
) -> MaterialImage:
    """Rasterise ellipses by pixel centre; the last covering ellipse wins.

    With ``overlap_mix`` a pixel covered by two or more ellipses of different materials gets a
    50/50 mix of the last two.
    """
    xx, yy = _pixel_grid(geom)
    last = np.full(xx.shape, -1, dtype=np.intp)
    previous = np.full(xx.shape, -1, dtype=np.intp)
    for ellipse in ellipses:
        inside = ellipse.mask(xx, yy)
        previous[inside] = last[inside]
        last[inside] = ellipse.material
    last[last < 0] = background

    q = np.zeros((n_materials, *xx.shape))
    rows, cols = np.indices(xx.shape)
    mixed = overlap_mix & (previous >= 0) & (previous != last)
    q[last, rows, cols] = np.where(mixed, 0.5, 1.0)
    q[previous[mixed], rows[mixed], cols[mixed]] = 0.5
    return q


def random_ellipse_phantom(
    cfg: PhantomConfig, geom: ScanGeometry, rng: np.random.Generator
) -> MaterialImage:
    """Draw and rasterise one random-ellipse phantom; uncovered pixels are air."""
    return render_ellipses(
        draw_ellipses(cfg, rng),
        geom,
        len(cfg.materials),
        cfg.air_index,
        cfg.allow_overlap_mix,
    )


def _shepp_logan_roles(materials: Sequence[str]) -> dict[str, int]:
    if AIR not in materials:
        raise ValueError(f"materials must include {AIR!r}")
    others = [k for k, name in enumerate(materials) if name != AIR]
    if len(others) < 4:
        raise ValueError(f"Shepp-Logan needs >= 4 non-air materials, got {len(others)}")
    return {
        "bone": others[0],
        "tissue": others[1],
        "calcium": others[2],
        "fifth": others[3],
        "air": materials.index(AIR),
    }


def shepp_logan_material(geom: ScanGeometry, materials: Sequence[str]) -> MaterialImage:
    """Material Shepp-Logan phantom.

    The first four non-air materials take the roles shell, interior, inclusions and lateral
    voids (in that order, e.g. bone, soft tissue, calcium, adipose); everything outside the
    skull is air.
    """
    roles = _shepp_logan_roles(materials)
    ellipses = [
        Ellipse(x0, y0, a, b, math.radians(angle), roles[role])
        for (x0, y0, a, b, angle), role in zip(
            SHEPP_LOGAN_ELLIPSES, _SHEPP_LOGAN_CLASSES, strict=True
        )
    ]
    return render_ellipses(ellipses, geom, len(materials), roles["air"])


def structured_phantom(
    geom: ScanGeometry, materials: Sequence[str], rng: np.random.Generator
) -> MaterialImage:
    """Smooth nested-organ phantom with small calcified inclusions.

    A desk-scale stand-in for anatomical chest data: a body ellipse with a fat layer, a
    heart-like region of the fifth material, two bone arcs and a handful of calcium spots, all
    with randomly jittered positions and sizes. It does not model real anatomy.
    """
    roles = _shepp_logan_roles(materials)

    def jitter(value: float, scale: float = 0.05) -> float:
        return float(value + rng.uniform(-scale, scale))

    body_a, body_b = jitter(0.85), jitter(0.65)
    # skin, then a thin fat ring, then the inner soft tissue
    ellipses = [
        Ellipse(0.0, 0.0, body_a, body_b, 0.0, roles["tissue"]),
        Ellipse(0.0, 0.0, body_a - 0.02, body_b - 0.02, 0.0, roles["fifth"]),
        Ellipse(0.0, 0.0, body_a - 0.07, body_b - 0.07, 0.0, roles["tissue"]),
    ]
    for side in (-1.0, 1.0):
        ellipses.append(Ellipse(side * jitter(0.55), jitter(0.0), 0.08, 0.35, 0.0, roles["bone"]))
        ellipses.append(Ellipse(side * jitter(0.55), jitter(0.0), 0.05, 0.30, 0.0, roles["tissue"]))
    heart = Ellipse(
        jitter(0.1), jitter(0.05), jitter(0.3), jitter(0.25), jitter(0.5, 0.3), roles["fifth"]
    )
    ellipses.append(heart)
    for _ in range(int(rng.integers(2, 6))):
        r = rng.uniform(0.0, 0.8)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        ellipses.append(
            Ellipse(
                heart.x0 + r * heart.a * math.cos(phi),
                heart.y0 + r * heart.b * math.sin(phi),
                float(rng.uniform(0.02, 0.05)),
                float(rng.uniform(0.02, 0.05)),
                0.0,
                roles["calcium"],
            )
        )
    return render_ellipses(ellipses, geom, len(materials), roles["air"])


def make_phantom(cfg: PhantomConfig, geom: ScanGeometry, rng: np.random.Generator) -> MaterialImage:
    """Draw one phantom of the configured kind."""
    if cfg.kind == "structured":
        return structured_phantom(geom, cfg.materials, rng)
    return random_ellipse_phantom(cfg, geom, rng)


def synthesize_sample(
    q: MaterialImage,
    geom: ScanGeometry,
    sys: SpectralSystem,
    seed: int | np.random.SeedSequence,
) -> Sample:
    """Project a phantom and draw Poisson counts from the spectral model.

    Raises:
        ValueError: If the phantom and the spectral system disagree on the number of materials.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[0] != sys.n_materials:
        raise ValueError(f"phantom has {q.shape[0]} materials, system has {sys.n_materials}")
    beta = project(geom, q)
    y = sample_counts(forward_counts(sys, beta), seed)
    return Sample(q=q, beta=beta, y=y)
