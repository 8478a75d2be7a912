"""Image-quality metrics per material and the evaluation report.

SSIM uses scikit-image with an 11x11 Gaussian window (sigma 1.5, K1 = 0.01, K2 = 0.03) and the
ground-truth maximum as dynamic range. NRMSE is normalised by the reference L2 norm and PSNR uses
the ground-truth maximum as peak.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from skimage.metrics import normalized_root_mse, peak_signal_noise_ratio, structural_similarity

from learned_spectral_ct.phantoms import Sample
from learned_spectral_ct.tomo import MaterialImage

logger = logging.getLogger(__name__)

#: Number of test samples in the reference evaluation protocol.
PROTOCOL_SAMPLES = 100
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRICS = ("SSIM", "NRMSE", "PSNR")

_LABELS = {
    "bone": "Bone",
    "soft_tissue": "Tissue",
    "calcium": "Calc.",
    "adipose": "Adip.",
    "blood": "Blood",
    "omnipaque": "Omni.",
    "water": "Water",
    "air": "Air",
}


def _pair(
    estimate: ArrayLike, reference: ArrayLike
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {reference.shape}")
    return estimate, reference


def _peak(reference: NDArray[np.float64]) -> float:
    peak = float(reference.max()) if reference.size else 0.0
    return peak if peak > 0 else 1.0


def ssim(estimate: ArrayLike, reference: ArrayLike, data_range: float | None = None) -> float:
    """Structural similarity of two 2-D images (each side at least 11 pixels).

    Args:
        estimate: Reconstructed image.
        reference: Ground truth.
        data_range: Dynamic range; defaults to the reference maximum (1 if that is not positive).
    """
    estimate, reference = _pair(estimate, reference)
    data_range = _peak(reference) if data_range is None else data_range
    if not data_range > 0:
        raise ValueError(f"data range must be positive, got {data_range}")
    return float(
        structural_similarity(
            reference,
            estimate,
            data_range=data_range,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def nrmse(estimate: ArrayLike, reference: ArrayLike) -> float:
    """``||estimate - reference|| / ||reference||``.

    For an all-zero reference the error is reported as ``||estimate|| / sqrt(numel)`` instead.
    """
    estimate, reference = _pair(estimate, reference)
    if not np.any(reference):
        return float(np.linalg.norm(estimate) / math.sqrt(max(estimate.size, 1)))
    return float(normalized_root_mse(reference, estimate, normalization="euclidean"))


def psnr(estimate: ArrayLike, reference: ArrayLike, peak: float | None = None) -> float:
    """``20 log10(peak / RMSE)`` in dB; ``inf`` when the images are identical."""
    estimate, reference = _pair(estimate, reference)
    peak = _peak(reference) if peak is None else peak
    if np.array_equal(estimate, reference):
        return math.inf
    return float(peak_signal_noise_ratio(reference, estimate, data_range=peak))


def _format(value: float) -> str | float:
    return "inf" if math.isinf(value) else value


@dataclass
class EvalReport:
    """Per-material metric means over a set of samples.

    Attributes:
        materials: Material names in column order.
        values: ``values[metric][material]`` mean over samples.
        n_samples: Number of samples scored.
        zero_reference: Per material, the number of samples in which it was absent.
        title: Optional heading for the table.
    """

    materials: list[str]
    values: dict[str, dict[str, float]]
    n_samples: int
    zero_reference: dict[str, int] = field(default_factory=dict)
    title: str = ""

    def average(self, metric: str) -> float:
        """Arithmetic mean of ``metric`` over materials."""
        return float(np.mean([self.values[metric][m] for m in self.materials]))

    def to_dict(self) -> dict[str, object]:
        return {
            "title": self.title,
            "n_samples": self.n_samples,
            "materials": self.materials,
            "metrics": {
                metric: {
                    **{m: _format(self.values[metric][m]) for m in self.materials},
                    "avg.": _format(self.average(metric)),
                }
                for metric in METRICS
            },
            "zero_reference": self.zero_reference,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Aligned text table: one row per metric, one column per material plus ``avg.``."""
        headers = ["", *(material_label(m) for m in self.materials), "avg."]
        rows = [headers]
        for metric in METRICS:
            cells = [*(self.values[metric][m] for m in self.materials), self.average(metric)]
            rows.append([metric, *(f"{v:.3f}" if math.isfinite(v) else "inf" for v in cells)])
        widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
        lines = [self.title] if self.title else []
        for row in rows:
            pairs = zip(row, widths, strict=True)
            lines.append("  ".join(cell.rjust(width) for cell, width in pairs))
        lines.append(f"({self.n_samples} samples)")
        return "\n".join(lines)


def material_label(name: str) -> str:
    """Short column label of a material."""
    return _LABELS.get(name, name.replace("_", " ").title())


def evaluate(
    reconstruct: Callable[[Sample], MaterialImage],
    samples: Sequence[Sample],
    materials: Sequence[str],
    *,
    densities: ArrayLike | None = None,
    n_samples: int = PROTOCOL_SAMPLES,
    title: str = "",
) -> EvalReport:
    """Score a reconstruction function on up to ``n_samples`` samples.

    Args:
        reconstruct: Maps a sample to estimated volume fractions (N, Y, X).
        samples: Test samples (not used for training).
        materials: Material names in the order of the material axis.
        densities: If given, score density images rho_k * q_k instead of volume fractions.
        n_samples: Number of samples to use.
        title: Heading of the report table.

    Raises:
        ValueError: If there are no samples.
    """
    count = min(n_samples, len(samples))
    if count == 0:
        raise ValueError("evaluation needs at least one sample")
    if count < PROTOCOL_SAMPLES:
        logger.warning(
            "Evaluating on %d samples; the reference protocol averages over %d",
            count,
            PROTOCOL_SAMPLES,
        )
    weights = (
        np.ones(len(materials))
        if densities is None
        else np.asarray(densities, dtype=np.float64)
    )
    sums = {metric: np.zeros(len(materials)) for metric in METRICS}
    absent = np.zeros(len(materials), dtype=int)
    for index in range(count):
        sample = samples[index]
        estimate = np.asarray(reconstruct(sample), dtype=np.float64)
        if estimate.shape != sample.q.shape:
            raise ValueError(
                f"reconstruction shape {estimate.shape} != ground truth {sample.q.shape}"
            )
        for k in range(len(materials)):
            est, ref = weights[k] * estimate[k], weights[k] * sample.q[k]
            absent[k] += not np.any(ref)
            sums["SSIM"][k] += ssim(est, ref)
            sums["NRMSE"][k] += nrmse(est, ref)
            sums["PSNR"][k] += psnr(est, ref)
    for k in np.flatnonzero(absent):
        logger.warning(
            "%s is absent from %d of %d references; NRMSE uses the zero-reference fallback",
            materials[k],
            absent[k],
            count,
        )
    return EvalReport(
        materials=list(materials),
        values={
            metric: {m: float(sums[metric][k] / count) for k, m in enumerate(materials)}
            for metric in METRICS
        },
        n_samples=count,
        zero_reference={materials[k]: int(absent[k]) for k in np.flatnonzero(absent)},
        title=title,
    )


def mean_ssim(estimate: ArrayLike, reference: ArrayLike) -> float:
    """SSIM averaged over materials and batch, for arrays of shape (..., N, Y, X)."""
    estimate, reference = _pair(estimate, reference)
    flat_est = estimate.reshape(-1, *estimate.shape[-2:])
    flat_ref = reference.reshape(-1, *reference.shape[-2:])
    return float(np.mean([ssim(e, r) for e, r in zip(flat_est, flat_ref, strict=True)]))
