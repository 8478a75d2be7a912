"""Classical primal-dual reference solvers for unmixing and imaging.

Imaging solves, per material, ``min_q 1/2 ||R q - beta||^2 + lam TV(q) + i_{q >= 0}`` with
linearised ADMM. Unmixing solves ``min_beta KL(y, ybar(beta)) + lam TV(beta) + i_Delta(beta)``
with an ADMM that splits ``z = ybar(beta)`` and linearises the nonlinear constraint around the
current iterate (Gauss-Newton), solving each per-ray subproblem over the scaled simplex Delta.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import kl_div

from learned_spectral_ct.spectral import (
    BinnedCounts,
    SinogramStack,
    SpectralSystem,
    forward_counts,
    ray_jacobians,
)
from learned_spectral_ct.tomo import (
    MaterialImage,
    ScanGeometry,
    backproject,
    operator_norm,
    project,
    ray_lengths,
)

logger = logging.getLogger(__name__)

#: Consecutive objective increases after which a solver gives up.
DIVERGENCE_PATIENCE = 20


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of a classical solver.

    Attributes:
        lam: Regularisation weight (>= 0).
        tau: Step size; ``None`` lets the imaging solver use 0.99 / ||R||^2.
        max_iters: Maximum number of outer iterations.
        tolerance: Stop once the relative changes of the iterate and of the split variable
            both fall below this.
        inner_iters: Iterations of inner solvers (TV prox, simplex subproblems).
    """

    lam: float = 1e-4
    tau: float | None = None
    max_iters: int = 200
    tolerance: float = 1e-6
    inner_iters: int = 20

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.max_iters < 1 or self.inner_iters < 1:
            raise ValueError("max_iters and inner_iters must be >= 1")


@dataclass
class SolverResult:
    """Outcome of a classical solve.

    Attributes:
        solution: Final iterate.
        objective: Objective value after every iteration.
        iterations: Number of iterations performed.
        converged: Whether the relative-change criterion was met.
        reason: Why the solver stopped (``tolerance``, ``max_iters`` or ``diverging``).
    """

    solution: NDArray[np.float64]
    objective: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reason: str = "max_iters"


def write_trace(path: Path | str, objective: Sequence[float]) -> None:
    """Write a per-iteration objective trace as CSV."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "objective"])
        for iteration, value in enumerate(objective, start=1):
            writer.writerow([iteration, repr(float(value))])


def project_simplex_scaled(beta: ArrayLike, lengths: ArrayLike) -> SinogramStack:
    """Project every ray's material vector onto ``{v >= 0, sum(v) = |L|}``.

    Args:
        beta: Material projections, shape (N, ...).
        lengths: Ray lengths |L|, shape (...).

    Returns:
        The Euclidean projection, same shape as ``beta``; rays with zero length map to zero.

    Raises:
        ValueError: On negative lengths or mismatched ray axes.
    """
    beta = np.asarray(beta, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    if beta.shape[1:] != lengths.shape:
        raise ValueError(f"ray axes {beta.shape[1:]} do not match lengths {lengths.shape}")
    if np.any(lengths < 0):
        raise ValueError("ray lengths must be non-negative")
    n = beta.shape[0]
    v = beta.reshape(n, -1).T
    radius = lengths.reshape(-1)
    u = -np.sort(-v, axis=1)
    shifted = (np.cumsum(u, axis=1) - radius[:, None]) / np.arange(1, n + 1)
    rho = np.maximum(np.count_nonzero(u > shifted, axis=1) - 1, 0)
    theta = shifted[np.arange(v.shape[0]), rho]
    out = np.maximum(v - theta[:, None], 0.0)
    out[radius == 0] = 0.0
    return out.T.reshape(beta.shape)


def _gradient(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Forward differences over the last two axes with Neumann boundary, shape (2, ...)."""
    grad = np.zeros((2, *x.shape))
    grad[0, ..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    grad[1, ..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return grad


def _divergence(p: NDArray[np.float64]) -> NDArray[np.float64]:
    """Negative adjoint of ``_gradient``."""
    div = np.zeros(p.shape[1:])
    div[..., :-1, :] += p[0, ..., :-1, :]
    div[..., 1:, :] -= p[0, ..., :-1, :]
    div[..., :, :-1] += p[1, ..., :, :-1]
    div[..., :, 1:] -= p[1, ..., :, :-1]
    return div


def total_variation(x: ArrayLike) -> float:
    """Isotropic total variation summed over the last two axes of every slice."""
    grad = _gradient(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(grad[0] ** 2 + grad[1] ** 2)))


def tv_prox(
    image: ArrayLike,
    weight: float,
    inner_iters: int = 20,
    *,
    dual: NDArray[np.float64] | None = None,
) -> NDArray[np.float64]:
    """Approximate ``argmin_x 1/2 ||x - image||^2 + weight * TV(x)``.

    Chambolle's dual projection iterations on the last two axes; leading axes are independent
    channels.

    Args:
        image: Array of shape (..., H, W).
        weight: TV weight (>= 0); zero returns the input unchanged.
        inner_iters: Number of dual iterations.
        dual: Optional starting dual field of shape (2, ..., H, W), updated in place.
    """
    image = np.asarray(image, dtype=np.float64)
    if weight < 0:
        raise ValueError(f"TV weight must be >= 0, got {weight}")
    if weight == 0:
        return image.copy()
    step = 0.125
    if dual is not None and dual.shape != (2, *image.shape):
        raise ValueError(f"dual shape {dual.shape} does not match (2, *{image.shape})")
    p = np.zeros((2, *image.shape)) if dual is None else dual.copy()
    for _ in range(inner_iters):
        grad = _gradient(_divergence(p) - image / weight)
        norm = np.sqrt(grad[0] ** 2 + grad[1] ** 2)
        p = (p + step * grad) / (1.0 + step * norm)
    if dual is not None:
        dual[...] = p
    return image - weight * _divergence(p)


def kl_prox(v: ArrayLike, y: ArrayLike, step: float) -> NDArray[np.float64]:
    """Closed-form ``argmin_z step * (z - y log z) + 1/2 (z - v)^2``, elementwise.

    The positive root of ``z^2 + (step - v) z - step * y = 0``.
    """
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b = v - step
    return 0.5 * (b + np.sqrt(b * b + 4.0 * step * y))


def _relative_change(new: NDArray[np.float64], old: NDArray[np.float64]) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(new), 1e-300))


def _finish(
    result: SolverResult, name: str, trace_path: Path | str | None
) -> SolverResult:
    if result.reason == "diverging":
        logger.warning(
            "%s stopped after %d iterations: objective diverging", name, result.iterations
        )
    else:
        logger.info(
            "%s stopped after %d iterations (%s), objective %.6g",
            name,
            result.iterations,
            result.reason,
            result.objective[-1] if result.objective else math.nan,
        )
    if trace_path is not None:
        write_trace(trace_path, result.objective)
    return result


class _DivergenceMonitor:
    def __init__(self, patience: int = DIVERGENCE_PATIENCE) -> None:
        self.patience = patience
        self.increases = 0
        self.last = math.inf

    def update(self, value: float) -> bool:
        """Record an objective value; True once it rose ``patience`` times in a row."""
        self.increases = self.increases + 1 if value > self.last else 0
        self.last = value
        return self.increases >= self.patience


def admm_imaging(
    geom: ScanGeometry,
    beta: ArrayLike,
    cfg: SolverConfig,
    *,
    initial: ArrayLike | None = None,
    trace_path: Path | str | None = None,
) -> SolverResult:
    """Linearised ADMM for TV-regularised, non-negative least-squares tomography.

    All materials are solved simultaneously but independently.

    Args:
        geom: Scan geometry.
        beta: Material sinograms, shape (N, N_theta, N_d).
        cfg: Solver parameters; ``tau`` must satisfy tau ||R||^2 <= 1.
        initial: Optional starting image (zeros otherwise).
        trace_path: Optional CSV file for the objective trace.

    Raises:
        ValueError: If tau violates the step bound (the message includes the estimated ||R||).
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-2:] != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {beta.shape} does not match geometry")
    norm = operator_norm(geom)
    tau = 0.99 / norm**2 if cfg.tau is None else cfg.tau
    if tau * norm**2 > 1.0 + 1e-9:
        raise ValueError(
            f"step size tau={tau:g} violates tau*||R||^2 <= 1 (||R|| ~ {norm:.6g}, "
            f"use tau <= {1.0 / norm**2:.6g})"
        )

    x = (
        np.zeros((*beta.shape[:-2], *geom.image_shape))
        if initial is None
        else np.array(initial, dtype=np.float64)
    )
    ax = project(geom, x)
    z = ax.copy()
    u = np.zeros_like(ax)
    tv_dual = np.zeros((2, *x.shape))
    result = SolverResult(solution=x)
    monitor = _DivergenceMonitor()
    for iteration in range(1, cfg.max_iters + 1):
        x_new = tv_prox(
            x - tau * backproject(geom, ax - z + u), tau * cfg.lam, cfg.inner_iters, dual=tv_dual
        )
        np.maximum(x_new, 0.0, out=x_new)
        ax = project(geom, x_new)
        z_new = 0.5 * (ax + u + beta)
        u += ax - z_new
        change = max(_relative_change(x_new, x), _relative_change(z_new, z))
        z = z_new
        x = x_new
        objective = 0.5 * float(np.sum((ax - beta) ** 2)) + cfg.lam * total_variation(x)
        result.objective.append(objective)
        result.iterations = iteration
        logger.debug("imaging iter %d: objective %.8g change %.3g", iteration, objective, change)
        if change < cfg.tolerance:
            result.converged, result.reason = True, "tolerance"
            break
        if monitor.update(objective):
            result.reason = "diverging"
            break
    result.solution = x
    return _finish(result, "admm_imaging", trace_path)


def _simplex_least_squares(
    jtj: NDArray[np.float64],
    jtr: NDArray[np.float64],
    anchor: NDArray[np.float64],
    lengths: NDArray[np.float64],
    iterations: int,
) -> NDArray[np.float64]:
    """Per-ray ``min 1/2 ||J (b - anchor) + r||^2`` over the scaled simplex (accelerated PG).

    Shapes: jtj (R, N, N), jtr (R, N), anchor (R, N), lengths (R,). The step uses the curvature
    restricted to the simplex hyperplane, which is all projected gradient ever sees.
    """
    n = anchor.shape[1]
    centring = np.eye(n) - 1.0 / n
    curvature = np.linalg.eigvalsh(centring @ jtj @ centring)[:, -1]
    step = 1.0 / np.maximum(curvature, 1e-300)

    def project_rows(b: NDArray[np.float64]) -> NDArray[np.float64]:
        return project_simplex_scaled(b.T, lengths).T

    b = project_rows(anchor)
    momentum = b.copy()
    t = 1.0
    for _ in range(iterations):
        grad = np.einsum("rkl,rl->rk", jtj, momentum - anchor) + jtr
        b_next = project_rows(momentum - step[:, None] * grad)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        momentum = b_next + ((t - 1.0) / t_next) * (b_next - b)
        b, t = b_next, t_next
    return b


def admm_unmixing(
    sys: SpectralSystem,
    geom: ScanGeometry,
    y: ArrayLike,
    cfg: SolverConfig,
    *,
    initial: ArrayLike | None = None,
    trace_path: Path | str | None = None,
) -> SolverResult:
    """ADMM with a linearised nonlinear operator constraint for material unmixing.

    Counts are scaled by 1/y0 internally, which leaves the minimiser unchanged. ``tau`` is the
    step of the KL proximal map (the inverse ADMM penalty) and defaults to 1.

    Args:
        sys: Spectral system.
        geom: Scan geometry (provides |L| for the simplex constraint).
        y: Measured counts, shape (N_b, N_theta, N_d).
        cfg: Solver parameters; ``lam > 0`` adds TV smoothing of each material sinogram.
        initial: Optional starting projections; the simplex centroid otherwise.
        trace_path: Optional CSV file for the objective trace.

    Returns:
        A SolverResult whose solution lies in the scaled simplex for every ray.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (sys.n_bins, *geom.sinogram_shape):
        raise ValueError(f"counts shape {y.shape} does not match (N_b, N_theta, N_d)")
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    n = sys.n_materials
    lengths = ray_lengths(geom)
    flat_lengths = lengths.reshape(-1)
    tau = 1.0 if cfg.tau is None else cfg.tau
    scale = 1.0 / sys.intensity
    data = (y * scale).reshape(sys.n_bins, -1)

    if initial is None:
        beta = np.broadcast_to(lengths / n, (n, *lengths.shape)).copy()
    else:
        beta = project_simplex_scaled(initial, lengths)

    def model(b: NDArray[np.float64]) -> NDArray[np.float64]:
        return (forward_counts(sys, b) * scale).reshape(sys.n_bins, -1)

    def objective_of(prediction: NDArray[np.float64], b: NDArray[np.float64]) -> float:
        value = float(np.sum(kl_div(data, np.maximum(prediction, 1e-300)))) / scale
        return value + cfg.lam * total_variation(b) if cfg.lam > 0 else value

    prediction = model(beta)
    z = prediction.copy()
    u = np.zeros_like(z)
    result = SolverResult(solution=beta)
    monitor = _DivergenceMonitor()
    for iteration in range(1, cfg.max_iters + 1):
        z_prev = z
        z = kl_prox(prediction + u, data, tau)
        jac = ray_jacobians(sys, beta) * scale
        residual = (prediction - z + u).T
        anchor = beta.reshape(n, -1).T
        solved = _simplex_least_squares(
            np.einsum("rbk,rbl->rkl", jac, jac),
            np.einsum("rbk,rb->rk", jac, residual),
            anchor,
            flat_lengths,
            cfg.inner_iters,
        )
        beta_new = solved.T.reshape(beta.shape)
        if cfg.lam > 0:
            beta_new = project_simplex_scaled(
                tv_prox(beta_new, cfg.lam * tau, cfg.inner_iters), lengths
            )
        prediction = model(beta_new)
        u += prediction - z
        change = max(_relative_change(beta_new, beta), _relative_change(z, z_prev))
        beta = beta_new
        objective = objective_of(prediction, beta)
        result.objective.append(objective)
        result.iterations = iteration
        logger.debug("unmixing iter %d: objective %.8g change %.3g", iteration, objective, change)
        if change < cfg.tolerance:
            result.converged, result.reason = True, "tolerance"
            break
        if monitor.update(objective):
            result.reason = "diverging"
            break
    result.solution = project_simplex_scaled(beta, lengths)
    return _finish(result, "admm_unmixing", trace_path)


def classical_pipeline(
    sys: SpectralSystem,
    geom: ScanGeometry,
    y: BinnedCounts,
    unmixing: SolverConfig,
    imaging: SolverConfig,
) -> tuple[MaterialImage, SinogramStack]:
    """Reference two-step reconstruction: ADMM unmixing followed by ADMM imaging.

    Returns:
        (volume fractions q, unmixed projections beta).
    """
    beta = admm_unmixing(sys, geom, y, unmixing).solution
    q = admm_imaging(geom, beta, imaging).solution
    return q, beta
