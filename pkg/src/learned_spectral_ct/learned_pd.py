"""Unrolled learned primal-dual networks for unmixing and imaging.

One ``LearnedPrimalDual`` unrolls a fixed number of iterations; every iteration owns a dual
block fed with ``[z, A(u_2), d]`` and a primal block fed with ``[u, dA*(u_1)(z_1)]``. Memory
tensors have shape (B, slots, *unit) where ``unit`` is the shape of one element of the primal
(or dual) space, e.g. (N, N_theta, N_d) for material projections.

Two concrete networks wrap it: ``UnmixingNetwork`` (counts -> material projections, nonlinear
spectral operator) and ``ReconstructionNetwork`` (projections -> volume fractions, ray
transform). ``IntegratedNetwork`` chains them through ``connect_unmix_to_reco``.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from learned_spectral_ct.errors import ConfigError
from learned_spectral_ct.nn import (
    BackprojectFunction,
    ProjectFunction,
    SpectralAdjointFunction,
    SpectralForwardFunction,
    make_conv,
    make_prelu,
    xavier_init_,
)
from learned_spectral_ct.spectral import SpectralSystem, open_beam_counts
from learned_spectral_ct.tomo import ScanGeometry, operator_norm, ray_lengths

logger = logging.getLogger(__name__)

Operator = Callable[[torch.Tensor], torch.Tensor]
AdjointDerivative = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class UnrollConfig:
    """Architecture of one unrolled network.

    Attributes:
        n_iter: Number of unrolled iterations.
        n_primal: Primal memory slots (>= 2).
        n_dual: Dual memory slots (>= 1).
        conv_dims: 2 folds the material/bin axis into channels, 3 convolves across it.
        filters: Filters of the hidden convolutions.
        material_axis: Imaging only: ``batch`` shares weights over materials processed as
            separate images, ``channels`` folds materials into the channel axis.
        memory_budget_mb: Activation budget for 3D convolutions; None disables the check.
    """

    n_iter: int = 10
    n_primal: int = 5
    n_dual: int = 5
    conv_dims: int = 2
    filters: int = 32
    material_axis: str = "batch"
    memory_budget_mb: float | None = 4096.0

    def __post_init__(self) -> None:
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")
        if self.n_primal < 2 or self.n_dual < 1:
            raise ValueError(
                f"need n_primal >= 2 and n_dual >= 1, got {self.n_primal}, {self.n_dual}"
            )
        if self.conv_dims not in (2, 3):
            raise ValueError(f"conv_dims must be 2 or 3, got {self.conv_dims}")
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")
        if self.material_axis not in ("batch", "channels"):
            raise ValueError(f"material_axis must be batch or channels, got {self.material_axis!r}")


class ResidualBlock(nn.Module):
    """``x[:, :out] + C3(s2(C2(s1(C1(x)))))`` over memory tensors (B, slots, *unit).

    With a three-axis unit and 2D convolutions the first unit axis is folded into the channels.
    """

    def __init__(
        self, in_slots: int, out_slots: int, unit_ndim: int, fold: int, conv_dims: int, filters: int
    ) -> None:
        super().__init__()
        self.in_slots = in_slots
        self.out_slots = out_slots
        self.fold = fold if unit_ndim == 3 and conv_dims == 2 else 1
        dims = 3 if unit_ndim == 3 and conv_dims == 3 else 2
        self.body = nn.Sequential(
            make_conv(in_slots * self.fold, filters, dims),
            make_prelu(filters),
            make_conv(filters, filters, dims),
            make_prelu(filters),
            make_conv(filters, out_slots * self.fold, dims),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_slots:
            raise ValueError(f"block expects {self.in_slots} slots, got {x.shape[1]}")
        if self.fold > 1:
            update = self.body(x.flatten(1, 2)).unflatten(1, (self.out_slots, self.fold))
        else:
            update = self.body(x)
        return x[:, : self.out_slots] + update


class LearnedPrimalDual(nn.Module):
    """Unrolled primal-dual scheme with iteration-specific residual blocks.

    Args:
        cfg: Architecture.
        primal_unit: Shape of one primal element.
        dual_unit: Shape of one dual element (the operator's range).
        operator: A, mapping (B, *primal_unit) to (B, *dual_unit).
        adjoint: (u_1, z_1) -> dA*(u_1) z_1, mapping into (B, *primal_unit).
    """

    def __init__(
        self,
        cfg: UnrollConfig,
        primal_unit: tuple[int, ...],
        dual_unit: tuple[int, ...],
        operator: Operator,
        adjoint: AdjointDerivative,
    ) -> None:
        super().__init__()
        if len(primal_unit) not in (2, 3) or len(dual_unit) != len(primal_unit):
            raise ValueError(f"unsupported unit shapes {primal_unit} / {dual_unit}")
        self.cfg = cfg
        self.primal_unit = tuple(primal_unit)
        self.dual_unit = tuple(dual_unit)
        self.operator = operator
        self.adjoint = adjoint
        ndim = len(primal_unit)
        self.dual_blocks = nn.ModuleList(
            ResidualBlock(
                cfg.n_dual + 2, cfg.n_dual, ndim, dual_unit[0], cfg.conv_dims, cfg.filters
            )
            for _ in range(cfg.n_iter)
        )
        self.primal_blocks = nn.ModuleList(
            ResidualBlock(
                cfg.n_primal + 1, cfg.n_primal, ndim, primal_unit[0], cfg.conv_dims, cfg.filters
            )
            for _ in range(cfg.n_iter)
        )

    def forward(
        self, data: torch.Tensor, return_iterates: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, list[torch.Tensor]]:
        """Run all iterations from zero memory.

        Args:
            data: Measured data d of shape (B, *dual_unit).
            return_iterates: Also return u_1 after every iteration.

        Returns:
            u_1 after the last iteration, shape (B, *primal_unit), and optionally the list of
            intermediate u_1.
        """
        if tuple(data.shape[1:]) != self.dual_unit:
            raise ValueError(f"data shape {tuple(data.shape[1:])} does not match {self.dual_unit}")
        batch = data.shape[0]
        u = data.new_zeros((batch, self.cfg.n_primal, *self.primal_unit))
        z = data.new_zeros((batch, self.cfg.n_dual, *self.dual_unit))
        d = data.unsqueeze(1)
        iterates = []
        for dual_block, primal_block in zip(self.dual_blocks, self.primal_blocks, strict=True):
            z = dual_block(torch.cat([z, self.operator(u[:, 1]).unsqueeze(1), d], dim=1))
            step = self.adjoint(u[:, 0], z[:, 0]).unsqueeze(1)
            u = primal_block(torch.cat([u, step], dim=1))
            if return_iterates:
                iterates.append(u[:, 0])
        if return_iterates:
            return u[:, 0], iterates
        return u[:, 0]


def activation_bytes(
    cfg: UnrollConfig, primal_unit: tuple[int, ...], dual_unit: tuple[int, ...], batch: int
) -> int:
    """Rough float32 activation memory retained for back-propagation."""

    def block(in_slots: int, out_slots: int, unit: tuple[int, ...]) -> int:
        spatial = int(np.prod(unit[-2:]))
        fold = unit[0] if len(unit) == 3 else 1
        if cfg.conv_dims == 3 and len(unit) == 3:
            return (in_slots + 4 * cfg.filters + out_slots) * fold * spatial
        return ((in_slots + out_slots) * fold + 4 * cfg.filters) * spatial

    per_iter = block(cfg.n_dual + 2, cfg.n_dual, dual_unit) + block(
        cfg.n_primal + 1, cfg.n_primal, primal_unit
    )
    return 4 * batch * cfg.n_iter * per_iter


class UnmixingNetwork(nn.Module):
    """Learned unmixing: photon counts (B, N_b, N_theta, N_d) -> projections (B, N, N_theta, N_d).

    Counts are divided by the per-bin open-beam counts and projections are expressed in units of
    the longest ray, so that the network works on O(1) quantities; the embedded operator and its
    adjoint derivative are scaled accordingly.
    """

    def __init__(
        self,
        sys: SpectralSystem,
        geom: ScanGeometry,
        cfg: UnrollConfig,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        self.sys = sys
        self.geom = geom
        self.cfg = cfg
        self.bin_scale = 1.0 / open_beam_counts(sys)
        self.beta_scale = float(max(ray_lengths(geom).max(), geom.pixel_size))
        self.primal_unit = (sys.n_materials, *geom.sinogram_shape)
        self.dual_unit = (sys.n_bins, *geom.sinogram_shape)
        self.check_memory(1)
        self.pd = LearnedPrimalDual(
            cfg, self.primal_unit, self.dual_unit, self._forward_operator, self._adjoint
        )
        if generator is not None:
            xavier_init_(self, generator)

    def _forward_operator(self, u: torch.Tensor) -> torch.Tensor:
        return SpectralForwardFunction.apply(u * self.beta_scale, self.sys, self.bin_scale)

    def _adjoint(self, u: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        beta = u * self.beta_scale
        return self.beta_scale * SpectralAdjointFunction.apply(beta, z, self.sys, self.bin_scale)

    def memory_estimate_bytes(self, batch: int) -> int:
        """Estimated activation memory of one training step at ``batch``."""
        return activation_bytes(self.cfg, self.primal_unit, self.dual_unit, batch)

    def check_memory(self, batch: int) -> None:
        """Reject 3D convolutions whose activations exceed the configured budget.

        Raises:
            ConfigError: If the estimate exceeds ``memory_budget_mb``.
        """
        budget = self.cfg.memory_budget_mb
        if self.cfg.conv_dims != 3 or budget is None:
            return
        needed = self.memory_estimate_bytes(batch)
        if needed > budget * 2**20:
            raise ConfigError(
                f"3D unmixing convolutions need ~{needed / 2**20:.0f} MiB at batch {batch}, "
                f"over the {budget:.0f} MiB budget; use conv_dims=2 or raise memory_budget_mb"
            )

    def forward(
        self, counts: torch.Tensor, return_iterates: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, list[torch.Tensor]]:
        scale = torch.as_tensor(self.bin_scale, dtype=counts.dtype).reshape(1, -1, 1, 1)
        result = self.pd(counts * scale, return_iterates)
        if return_iterates:
            u, iterates = result
            return u * self.beta_scale, [it * self.beta_scale for it in iterates]
        return result * self.beta_scale


def connect_unmix_to_reco(beta: torch.Tensor) -> torch.Tensor:
    """Flatten the material axis into the batch: (B, N, N_theta, N_d) -> (B * N, N_theta, N_d)."""
    if beta.ndim != 4:
        raise ValueError(f"expected (B, N, N_theta, N_d), got shape {tuple(beta.shape)}")
    return beta.flatten(0, 1)


def split_materials(images: torch.Tensor, n_materials: int) -> torch.Tensor:
    """Inverse of ``connect_unmix_to_reco``: (B * N, ...) -> (B, N, ...)."""
    if images.shape[0] % n_materials:
        raise ValueError(f"batch {images.shape[0]} is not a multiple of {n_materials} materials")
    return images.unflatten(0, (-1, n_materials))


class ReconstructionNetwork(nn.Module):
    """Learned imaging: projections (B, N, N_theta, N_d) -> volume fractions (B, N, Y, X).

    The ray transform is scaled by 1/||R|| (and the data with it).
    """

    def __init__(
        self,
        geom: ScanGeometry,
        n_materials: int,
        cfg: UnrollConfig,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        self.geom = geom
        self.n_materials = n_materials
        self.cfg = cfg
        self.scale = 1.0 / operator_norm(geom)
        if cfg.material_axis == "batch":
            primal_unit, dual_unit = geom.image_shape, geom.sinogram_shape
        else:
            primal_unit = (n_materials, *geom.image_shape)
            dual_unit = (n_materials, *geom.sinogram_shape)
        self.pd = LearnedPrimalDual(
            dataclasses.replace(cfg, conv_dims=2),
            primal_unit,
            dual_unit,
            self._forward_operator,
            self._adjoint,
        )
        if generator is not None:
            xavier_init_(self, generator)

    def _forward_operator(self, u: torch.Tensor) -> torch.Tensor:
        return self.scale * ProjectFunction.apply(u, self.geom)

    def _adjoint(self, _u: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.scale * BackprojectFunction.apply(z, self.geom)

    def forward(
        self, beta: torch.Tensor, return_iterates: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, list[torch.Tensor]]:
        if beta.ndim != 4 or beta.shape[1] != self.n_materials:
            raise ValueError(
                f"expected (B, {self.n_materials}, N_theta, N_d), got {tuple(beta.shape)}"
            )
        batched = self.cfg.material_axis == "batch"
        data = connect_unmix_to_reco(beta) if batched else beta
        result = self.pd(data * self.scale, return_iterates)
        q, iterates = result if return_iterates else (result, [])
        if batched:
            q = split_materials(q, self.n_materials)
            iterates = [split_materials(it, self.n_materials) for it in iterates]
        return (q, iterates) if return_iterates else q


class IntegratedNetwork(nn.Module):
    """Learned unmixing followed by learned imaging, trained end to end."""

    def __init__(self, unmix: UnmixingNetwork, reco: ReconstructionNetwork) -> None:
        super().__init__()
        if unmix.sys.n_materials != reco.n_materials:
            raise ValueError("unmixing and imaging networks disagree on the number of materials")
        self.unmix = unmix
        self.reco = reco

    def forward(self, counts: torch.Tensor) -> torch.Tensor:
        return self.reco(self.unmix(counts))


def t_unmix(network: UnmixingNetwork, y: np.ndarray) -> np.ndarray:
    """Apply a frozen unmixing network to counts (N_b, N_theta, N_d) or a batch of them."""
    return infer(network, y, 3)


def t_reco(network: ReconstructionNetwork, beta: np.ndarray) -> np.ndarray:
    """Apply a frozen imaging network to projections (N, N_theta, N_d) or a batch of them."""
    return infer(network, beta, 3)


def infer(network: nn.Module, array: np.ndarray, single_ndim: int = 3) -> np.ndarray:
    """Run a frozen network on one input (``single_ndim`` axes) or a batch of them."""
    single = np.ndim(array) == single_ndim
    dtype = next(network.parameters()).dtype
    tensor = torch.as_tensor(np.asarray(array)[None] if single else np.asarray(array), dtype=dtype)
    network.eval()
    with torch.no_grad():
        out = network(tensor).cpu().numpy().astype(np.float64)
    return out[0] if single else out
