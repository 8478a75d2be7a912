"""Discretised spectral physics of a photon-counting detector.

For every ray the expected counts in bin ``b`` are::

    ybar_b(beta) = y0 * sum_j D_bj * w_j * s_j * exp(-sum_k M_jk beta_k)

with quadrature nodes ``E_j``/weights ``w_j``, normalised source ``s``, bin sensitivities ``D``
and linear attenuation coefficients ``M``. The energy sum is evaluated in the log domain with
LogSumExp so that heavily attenuated rays stay finite.

Arrays follow a "leading axis" convention: material projections have shape ``(N, ...)`` and
binned counts ``(N_b, ...)``, where ``...`` are the ray axes (usually ``(N_theta, N_d)``).
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import kl_div, logsumexp

from learned_spectral_ct.materials import MaterialTable

logger = logging.getLogger(__name__)

#: Material projections beta, shape (N, N_theta, N_d).
SinogramStack: TypeAlias = NDArray[np.float64]
#: Photon counts per energy bin, shape (N_b, N_theta, N_d).
BinnedCounts: TypeAlias = NDArray[np.float64]

#: Above this mean the Poisson sampler switches to a rounded Gaussian.
GAUSSIAN_SAMPLING_THRESHOLD = 1e6


def fejer_first_rule(n: int, lower: float = -1.0, upper: float = 1.0) -> tuple[
    NDArray[np.float64], NDArray[np.float64]
]:
    """Fejér's first quadrature rule on ``[lower, upper]``.

    Nodes are the Chebyshev points ``cos((2k - 1) pi / 2n)``; no node sits on an endpoint.

    Args:
        n: Number of nodes (>= 1).
        lower: Left end of the interval.
        upper: Right end of the interval.

    Returns:
        (nodes, weights) with nodes in increasing order.
    """
    if n < 1:
        raise ValueError(f"Fejér rule needs at least one node, got {n}")
    theta = (2.0 * np.arange(1, n + 1) - 1.0) * np.pi / (2.0 * n)
    j = np.arange(1, n // 2 + 1)
    series = np.cos(2.0 * np.outer(theta, j)) / (4.0 * j**2 - 1.0)
    weights = (2.0 / n) * (1.0 - 2.0 * series.sum(axis=1))
    nodes = np.cos(theta)
    half = 0.5 * (upper - lower)
    return (0.5 * (upper + lower) + half * nodes)[::-1].copy(), (half * weights)[::-1].copy()


def kramers_spectrum(energies: ArrayLike, kvp: float) -> NDArray[np.float64]:
    """Unnormalised Kramers bremsstrahlung shape ``(kvp - E) / E``, zero above ``kvp``."""
    energies = np.asarray(energies, dtype=np.float64)
    return np.clip(kvp - energies, 0.0, None) / energies


def load_spectrum(path: Path | str) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Read a two-column ``E_keV s`` spectrum table (``#`` comments allowed)."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"{path}: spectrum table must have two columns, got {data.shape[1]}")
    if np.any(np.diff(data[:, 0]) <= 0):
        raise ValueError(f"{path}: spectrum energies must be strictly increasing")
    if np.any(data[:, 1] < 0):
        raise ValueError(f"{path}: spectrum values must be non-negative")
    return data[:, 0], data[:, 1]


@dataclass(frozen=True, eq=False)
class SpectralSystem:
    """The discretised spectral model of one scanner configuration.

    Attributes:
        nodes: Quadrature energies E_j in keV, shape (N_e,).
        weights: Quadrature weights w_j, shape (N_e,).
        source: Normalised source samples s_j, shape (N_e,), with sum(w * s) == 1.
        bin_sensitivity: D, shape (N_b, N_e), entries in [0, 1].
        lacs: M, shape (N_e, N), linear attenuation coefficients in 1/cm.
        intensity: y0, total photons per ray.
        bin_edges: N_b + 1 bin boundaries in keV.
        materials: Material names, one per column of ``lacs``.
        densities: rho_k in g/cm^3, one per material.
    """

    nodes: NDArray[np.float64]
    weights: NDArray[np.float64]
    source: NDArray[np.float64]
    bin_sensitivity: NDArray[np.float64]
    lacs: NDArray[np.float64]
    intensity: float
    bin_edges: NDArray[np.float64]
    materials: tuple[str, ...]
    densities: NDArray[np.float64]

    def __post_init__(self) -> None:
        n_e = self.nodes.shape[0]
        if self.weights.shape != (n_e,) or self.source.shape != (n_e,):
            raise ValueError("weights and source must have one entry per quadrature node")
        if np.any(self.weights < 0) or np.any(self.source < 0):
            raise ValueError("quadrature weights and source samples must be non-negative")
        if not np.isclose(np.dot(self.weights, self.source), 1.0, rtol=1e-12, atol=0.0):
            raise ValueError("source must be normalised so that sum(w * s) == 1")
        if self.bin_sensitivity.ndim != 2 or self.bin_sensitivity.shape[1] != n_e:
            raise ValueError("bin sensitivity must have shape (N_b, N_e)")
        if np.any(self.bin_sensitivity < 0) or np.any(self.bin_sensitivity > 1):
            raise ValueError("bin sensitivities must lie in [0, 1]")
        if self.lacs.shape != (n_e, len(self.materials)):
            raise ValueError("LAC matrix must have shape (N_e, N)")
        if np.any(self.lacs <= 0):
            raise ValueError("linear attenuation coefficients must be positive")
        if self.bin_edges.shape != (self.n_bins + 1,) or np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be N_b + 1 strictly increasing energies")
        if not self.intensity > 0:
            raise ValueError("intensity y0 must be positive")

    @property
    def n_materials(self) -> int:
        """Return N, the number of basis materials."""
        return self.lacs.shape[1]

    @property
    def n_bins(self) -> int:
        """Return N_b, the number of energy bins."""
        return self.bin_sensitivity.shape[0]

    @property
    def n_nodes(self) -> int:
        """Return N_e, the number of quadrature nodes."""
        return self.nodes.shape[0]

    @property
    def log_weighted_source(self) -> NDArray[np.float64]:
        """Return log(w_j s_j), with -inf where the product vanishes."""
        with np.errstate(divide="ignore"):
            return np.log(self.weights * self.source)


def build_system(
    table: MaterialTable,
    selection: Sequence[str],
    *,
    n_bins: int = 8,
    e_min: float = 30.0,
    e_max: float = 140.0,
    n_quad: int = 16,
    intensity: float = 1e12,
    spectrum: tuple[ArrayLike, ArrayLike] | None = None,
    kvp: float | None = None,
) -> SpectralSystem:
    """Discretise the spectral model for a selection of materials.

    Bins are ideal indicators with edges spaced geometrically between ``e_min`` and ``e_max``;
    the energy integral uses Fejér's first rule on the same interval.

    Args:
        table: Material MAC tables.
        selection: Material names, in the order of the material axis.
        n_bins: Number of energy bins N_b.
        e_min: Lower energy limit in keV.
        e_max: Upper energy limit in keV.
        n_quad: Number of quadrature nodes N_e.
        intensity: Photons per ray y0.
        spectrum: Optional tabulated (energies, values) source; Kramers' law otherwise.
        kvp: Tube voltage for the Kramers shape; defaults to ``e_max``.

    Returns:
        The assembled SpectralSystem.

    Raises:
        KeyError: If a selected material is not in the table.
        ValueError: On an invalid energy range or a bin that contains no quadrature node.
    """
    if not selection:
        raise ValueError("at least one material must be selected")
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if n_quad < 2:
        raise ValueError(f"n_quad must be >= 2, got {n_quad}")
    if not 0 < e_min < e_max:
        raise ValueError(f"need 0 < e_min < e_max, got [{e_min}, {e_max}]")

    curves = [table[name] for name in selection]
    for curve in curves:
        lo, hi = curve.energy_range
        if e_min < lo or e_max > hi:
            raise ValueError(
                f"energy range [{e_min}, {e_max}] keV outside table of {curve.name!r} [{lo}, {hi}]"
            )

    nodes, weights = fejer_first_rule(n_quad, e_min, e_max)
    edges = e_min * (e_max / e_min) ** (np.arange(n_bins + 1) / n_bins)
    edges[-1] = e_max

    bin_index = np.clip(np.searchsorted(edges, nodes, side="right") - 1, 0, n_bins - 1)
    sensitivity = np.zeros((n_bins, n_quad))
    sensitivity[bin_index, np.arange(n_quad)] = 1.0
    empty = np.flatnonzero(sensitivity.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(
            f"bins {empty.tolist()} contain no quadrature node; increase n_quad (now {n_quad})"
        )

    if spectrum is None:
        source = kramers_spectrum(nodes, e_max if kvp is None else kvp)
    else:
        spec_e, spec_s = (np.asarray(a, dtype=np.float64) for a in spectrum)
        source = np.clip(np.interp(nodes, spec_e, spec_s, left=0.0, right=0.0), 0.0, None)
    norm = np.dot(weights, source)
    if not norm > 0:
        raise ValueError("source spectrum vanishes on every quadrature node")
    source = source / norm

    lacs = np.stack([curve.attenuation(nodes) for curve in curves], axis=1)
    system = SpectralSystem(
        nodes=nodes,
        weights=weights,
        source=source,
        bin_sensitivity=sensitivity,
        lacs=lacs,
        intensity=float(intensity),
        bin_edges=edges,
        materials=tuple(selection),
        densities=table.densities(selection),
    )
    logger.debug(
        "Built spectral system: N=%d N_b=%d N_e=%d range=[%g, %g] keV y0=%g",
        system.n_materials,
        system.n_bins,
        system.n_nodes,
        e_min,
        e_max,
        intensity,
    )
    return system


def _check_leading(array: NDArray[np.float64], size: int, what: str) -> None:
    if array.ndim < 1 or array.shape[0] != size:
        raise ValueError(f"{what}: leading axis must have length {size}, got shape {array.shape}")


def _log_attenuated_source(sys: SpectralSystem, beta: SinogramStack) -> NDArray[np.float64]:
    """Return log(w_j s_j) - (M beta)_j with shape (N_e, rays)."""
    _check_leading(beta, sys.n_materials, "beta")
    flat = beta.reshape(sys.n_materials, -1)
    return sys.log_weighted_source[:, None] - sys.lacs @ flat


def _attenuated_source(sys: SpectralSystem, beta: SinogramStack) -> NDArray[np.float64]:
    return np.exp(_log_attenuated_source(sys, beta))


def forward_counts(sys: SpectralSystem, beta: ArrayLike) -> BinnedCounts:
    """Expected counts ybar(beta) per bin and ray.

    Args:
        sys: The spectral system.
        beta: Material projections, shape (N, ...).

    Returns:
        Expected counts, shape (N_b, ...).

    Raises:
        ValueError: On a shape mismatch or non-finite beta.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta contains NaN or infinite values")
    log_terms = _log_attenuated_source(sys, beta)
    with np.errstate(divide="ignore"):
        log_d = np.log(sys.bin_sensitivity)
    out = np.empty((sys.n_bins, log_terms.shape[1]))
    for b in range(sys.n_bins):
        out[b] = logsumexp(log_terms + log_d[b][:, None], axis=0)
    return sys.intensity * np.exp(out).reshape((sys.n_bins, *beta.shape[1:]))


def derivative_apply(sys: SpectralSystem, beta: ArrayLike, v: ArrayLike) -> BinnedCounts:
    """Directional derivative d ybar(beta) v = -y0 D diag(w s exp(-M beta)) M v, raywise."""
    beta = np.asarray(beta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != beta.shape:
        raise ValueError(f"direction shape {v.shape} does not match beta shape {beta.shape}")
    t = _attenuated_source(sys, beta)
    out = -sys.intensity * (sys.bin_sensitivity @ (t * (sys.lacs @ v.reshape(sys.n_materials, -1))))
    return out.reshape((sys.n_bins, *beta.shape[1:]))


def adjoint_derivative_apply(sys: SpectralSystem, beta: ArrayLike, z: ArrayLike) -> SinogramStack:
    """Adjoint derivative d ybar*(beta) z = -y0 M^T diag(w s exp(-M beta)) D^T z, raywise.

    Args:
        sys: The spectral system.
        beta: Base point, shape (N, ...).
        z: Element of the counts space, shape (N_b, ...) with the same ray axes.

    Returns:
        An element of the projection space, shape (N, ...).
    """
    beta = np.asarray(beta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _check_leading(z, sys.n_bins, "z")
    if z.shape[1:] != beta.shape[1:]:
        raise ValueError(f"ray axes of z {z.shape[1:]} do not match beta {beta.shape[1:]}")
    t = _attenuated_source(sys, beta)
    weighted = t * (sys.bin_sensitivity.T @ z.reshape(sys.n_bins, -1))
    return (-sys.intensity * (sys.lacs.T @ weighted)).reshape(beta.shape)


def adjoint_derivative_base_gradient(
    sys: SpectralSystem, beta: ArrayLike, z: ArrayLike, g: ArrayLike
) -> SinogramStack:
    """Gradient with respect to ``beta`` of <g, d ybar*(beta) z>.

    Equals y0 M^T diag(w s exp(-M beta) (M g) (D^T z)), raywise. Needed to back-propagate through
    a network layer that evaluates the adjoint derivative at a learned base point.
    """
    beta = np.asarray(beta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != beta.shape:
        raise ValueError(f"cotangent shape {g.shape} does not match beta shape {beta.shape}")
    t = _attenuated_source(sys, beta)
    mg = sys.lacs @ g.reshape(sys.n_materials, -1)
    dz = sys.bin_sensitivity.T @ z.reshape(sys.n_bins, -1)
    return (sys.intensity * (sys.lacs.T @ (t * mg * dz))).reshape(beta.shape)


def ray_jacobians(sys: SpectralSystem, beta: ArrayLike) -> NDArray[np.float64]:
    """Per-ray Jacobians of ybar, shape (rays, N_b, N), rays flattened in C order."""
    beta = np.asarray(beta, dtype=np.float64)
    t = _attenuated_source(sys, beta)
    return -sys.intensity * np.einsum("bj,jr,jk->rbk", sys.bin_sensitivity, t, sys.lacs)


def open_beam_counts(sys: SpectralSystem) -> NDArray[np.float64]:
    """Unattenuated expected counts per bin (flat field), shape (N_b,)."""
    return forward_counts(sys, np.zeros((sys.n_materials, 1)))[:, 0]


def kl_divergence(y: ArrayLike, ybar: ArrayLike) -> float:
    """Generalised Kullback-Leibler distance sum(y log(y / ybar) + ybar - y).

    Terms with ``y == 0`` contribute ``ybar``.

    Raises:
        ValueError: If shapes differ, any ``ybar <= 0`` or any ``y < 0``.
    """
    y = np.asarray(y, dtype=np.float64)
    ybar = np.asarray(ybar, dtype=np.float64)
    if y.shape != ybar.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs ybar {ybar.shape}")
    if np.any(ybar <= 0):
        raise ValueError("expected counts ybar must be strictly positive")
    if np.any(y < 0):
        raise ValueError("measured counts y must be non-negative")
    return float(np.sum(kl_div(y, ybar)))


def sample_counts(ybar: ArrayLike, seed: int | np.random.SeedSequence) -> BinnedCounts:
    """Draw independent Poisson counts with means ``ybar``.

    Means above ``GAUSSIAN_SAMPLING_THRESHOLD`` use ``round(N(ybar, ybar))`` clamped at zero.

    Args:
        ybar: Non-negative expected counts.
        seed: Seed for a fresh ``numpy.random.Generator``; the output is a pure function of it.

    Returns:
        Sampled counts (float64) with the shape of ``ybar``.
    """
    ybar = np.asarray(ybar, dtype=np.float64)
    if np.any(ybar < 0) or not np.all(np.isfinite(ybar)):
        raise ValueError("Poisson means must be finite and non-negative")
    rng = np.random.default_rng(seed)
    out = np.zeros_like(ybar)
    large = ybar > GAUSSIAN_SAMPLING_THRESHOLD
    small = ~large
    out[small] = rng.poisson(ybar[small])
    if np.any(large):
        mean = ybar[large]
        out[large] = np.clip(np.rint(rng.normal(mean, np.sqrt(mean))), 0.0, None)
    return out
