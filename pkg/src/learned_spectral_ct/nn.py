"""Neural-network substrate: layers, initialisation, optimiser protocol and embedded physics.

Reverse-mode differentiation, convolutions, PReLU and ADAM come from torch. The tomographic and
spectral operators are numpy/scipy code; they enter the autograd graph through the
``torch.autograd.Function`` classes below, whose backward passes apply the exact adjoints.
Embedded operators compute in float64 and return tensors of the input dtype, so gradient
checks can run the whole network in double precision.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from numpy.typing import NDArray
from torch import nn

from learned_spectral_ct.errors import DatasetError
from learned_spectral_ct.spectral import (
    SpectralSystem,
    adjoint_derivative_apply,
    adjoint_derivative_base_gradient,
    derivative_apply,
    forward_counts,
)
from learned_spectral_ct.storage import read_f32, read_json, write_f32, write_json
from learned_spectral_ct.tomo import ScanGeometry, backproject, project

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25
ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-8
CHECKPOINT_FORMAT = "learned-spectral-ct/checkpoint"


def _to_numpy(tensor: torch.Tensor) -> NDArray[np.float64]:
    return tensor.detach().cpu().numpy().astype(np.float64)


def _to_tensor(array: NDArray[np.float64], like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array)).to(dtype=like.dtype, device=like.device)


def _material_leading(array: NDArray[np.float64]) -> NDArray[np.float64]:
    """(B, C, ...) -> (C, B, ...) for the leading-axis physics functions."""
    return np.moveaxis(array, 1, 0)


def _batch_leading(array: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.moveaxis(array, 0, 1)


class ProjectFunction(torch.autograd.Function):
    """R applied to (..., nPixY, nPixX); the backward pass is R^T."""

    @staticmethod
    def forward(ctx: Any, image: torch.Tensor, geom: ScanGeometry) -> torch.Tensor:
        ctx.geom = geom
        return _to_tensor(project(geom, _to_numpy(image)), image)

    @staticmethod
    def backward(ctx: Any, grad: torch.Tensor) -> tuple[torch.Tensor, None]:
        return _to_tensor(backproject(ctx.geom, _to_numpy(grad)), grad), None


class BackprojectFunction(torch.autograd.Function):
    """R^T applied to (..., N_theta, N_d); the backward pass is R."""

    @staticmethod
    def forward(ctx: Any, sinogram: torch.Tensor, geom: ScanGeometry) -> torch.Tensor:
        ctx.geom = geom
        return _to_tensor(backproject(geom, _to_numpy(sinogram)), sinogram)

    @staticmethod
    def backward(ctx: Any, grad: torch.Tensor) -> tuple[torch.Tensor, None]:
        return _to_tensor(project(ctx.geom, _to_numpy(grad)), grad), None


class SpectralForwardFunction(torch.autograd.Function):
    """Expected counts ybar(beta) scaled per bin: (B, N, ...) -> (B, N_b, ...)."""

    @staticmethod
    def forward(
        ctx: Any, beta: torch.Tensor, sys: SpectralSystem, bin_scale: NDArray[np.float64]
    ) -> torch.Tensor:
        beta_np = _material_leading(_to_numpy(beta))
        ctx.sys, ctx.bin_scale = sys, bin_scale
        ctx.save_for_backward(beta)
        counts = forward_counts(sys, beta_np) * _expand(bin_scale, beta_np.ndim)
        return _to_tensor(_batch_leading(counts), beta)

    @staticmethod
    def backward(ctx: Any, grad: torch.Tensor) -> tuple[torch.Tensor, None, None]:
        (beta,) = ctx.saved_tensors
        beta_np = _material_leading(_to_numpy(beta))
        g = _material_leading(_to_numpy(grad)) * _expand(ctx.bin_scale, beta_np.ndim)
        adjoint = adjoint_derivative_apply(ctx.sys, beta_np, g)
        return _to_tensor(_batch_leading(adjoint), grad), None, None


class SpectralAdjointFunction(torch.autograd.Function):
    """Adjoint derivative d ybar*(beta)(z * scale): differentiable in both beta and z."""

    @staticmethod
    def forward(
        ctx: Any,
        beta: torch.Tensor,
        z: torch.Tensor,
        sys: SpectralSystem,
        bin_scale: NDArray[np.float64],
    ) -> torch.Tensor:
        beta_np = _material_leading(_to_numpy(beta))
        z_np = _material_leading(_to_numpy(z)) * _expand(bin_scale, beta_np.ndim)
        ctx.sys, ctx.bin_scale = sys, bin_scale
        ctx.save_for_backward(beta, z)
        return _to_tensor(_batch_leading(adjoint_derivative_apply(sys, beta_np, z_np)), beta)

    @staticmethod
    def backward(
        ctx: Any, grad: torch.Tensor
    ) -> tuple[torch.Tensor | None, torch.Tensor | None, None, None]:
        beta, z = ctx.saved_tensors
        beta_np = _material_leading(_to_numpy(beta))
        scale = _expand(ctx.bin_scale, beta_np.ndim)
        g = _material_leading(_to_numpy(grad))
        grad_beta = grad_z = None
        if ctx.needs_input_grad[0]:
            z_np = _material_leading(_to_numpy(z)) * scale
            base = adjoint_derivative_base_gradient(ctx.sys, beta_np, z_np, g)
            grad_beta = _to_tensor(_batch_leading(base), grad)
        if ctx.needs_input_grad[1]:
            grad_z = _to_tensor(_batch_leading(derivative_apply(ctx.sys, beta_np, g) * scale), grad)
        return grad_beta, grad_z, None, None


def _expand(bin_scale: NDArray[np.float64], ndim: int) -> NDArray[np.float64]:
    return bin_scale.reshape((-1,) + (1,) * (ndim - 1))


def conv_forward(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, dims: int
) -> torch.Tensor:
    """Stride-1 cross-correlation with zero padding that preserves the spatial shape.

    Args:
        x: Input of shape (B, C, *spatial) with ``dims`` spatial axes.
        weight: Kernels of shape (filters, C, 3, ...).
        bias: Per-filter bias or None.
        dims: 2 or 3.

    Raises:
        ValueError: On a channel or dimensionality mismatch.
    """
    if dims not in (2, 3):
        raise ValueError(f"convolution dims must be 2 or 3, got {dims}")
    if x.ndim != dims + 2 or weight.ndim != dims + 2:
        raise ValueError(f"expected {dims + 2}-D input and kernel, got {x.ndim} and {weight.ndim}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    conv = F.conv2d if dims == 2 else F.conv3d
    return conv(x, weight, bias, padding="same")


def prelu(x: torch.Tensor, slopes: torch.Tensor) -> torch.Tensor:
    """``x`` where non-negative, ``c * x`` otherwise, with one slope per channel (axis 1)."""
    if slopes.numel() not in (1, x.shape[1]):
        raise ValueError(f"{slopes.numel()} slopes for {x.shape[1]} channels")
    return F.prelu(x, slopes)


def make_conv(in_channels: int, out_channels: int, dims: int) -> nn.Module:
    """3-wide kernel convolution with "same" zero padding."""
    conv = nn.Conv2d if dims == 2 else nn.Conv3d
    return conv(in_channels, out_channels, kernel_size=3, padding=1)


def make_prelu(channels: int) -> nn.PReLU:
    return nn.PReLU(num_parameters=channels, init=PRELU_INIT)


def xavier_uniform(shape: tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    """Kernel values uniform on +-sqrt(6 / (fan_in + fan_out))."""
    weight = torch.empty(shape)
    nn.init.xavier_uniform_(weight, generator=generator)
    return weight


def xavier_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Xavier-initialise every convolution kernel in ``module`` and zero the biases."""
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, (nn.Conv2d, nn.Conv3d)):
                nn.init.xavier_uniform_(layer.weight, generator=generator)
                if layer.bias is not None:
                    layer.bias.zero_()
            elif isinstance(layer, nn.PReLU):
                layer.weight.fill_(PRELU_INIT)


def make_optimizer(params: Iterable[nn.Parameter], lr: float) -> torch.optim.Adam:
    """ADAM with beta2 = 0.99 and otherwise standard settings."""
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine-annealed learning rate ``lr0 / 2 * (1 + cos(pi * step / total_steps))``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"need 0 <= step <= total_steps, got step={step}, total={total_steps}")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def cosine_schedule(
    optimizer: torch.optim.Optimizer, total_steps: int
) -> torch.optim.lr_scheduler.LambdaLR:
    """Scheduler that applies ``cosine_lr`` relative to each group's initial rate."""
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: cosine_lr(min(step, total_steps), total_steps, 1.0)
    )


def clip_global_norm(params: Iterable[nn.Parameter], max_norm: float = 1.0) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping.
    """
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared differences over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def save_checkpoint(
    path: Path | str,
    module: nn.Module,
    *,
    step: int,
    hyperparameters: Mapping[str, Any] | None = None,
) -> Path:
    """Write ``module``'s state as a directory of raw f32 blobs plus ``manifest.json``.

    Returns:
        The checkpoint directory.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    layers = []
    for name, tensor in module.state_dict().items():
        blob = f"{name}.f32"
        write_f32(out / blob, tensor.detach().cpu().numpy())
        layers.append({"name": name, "shape": list(tensor.shape), "file": blob})
    write_json(
        out / "manifest.json",
        {
            "format": CHECKPOINT_FORMAT,
            "step": step,
            "hyperparameters": dict(hyperparameters or {}),
            "layers": layers,
        },
    )
    logger.info("Saved checkpoint with %d tensors to %s (step %d)", len(layers), out, step)
    return out


def load_checkpoint(path: Path | str, module: nn.Module) -> dict[str, Any]:
    """Load a checkpoint written by ``save_checkpoint`` into ``module``.

    Returns:
        The checkpoint manifest.

    Raises:
        DatasetError: If the manifest is missing or does not match the module's parameters.
    """
    directory = Path(path)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DatasetError(f"{directory} is not a checkpoint")
    state = module.state_dict()
    recorded = {layer["name"]: layer for layer in manifest["layers"]}
    if set(recorded) != set(state):
        missing = sorted(set(state) ^ set(recorded))
        raise DatasetError(f"{directory}: checkpoint does not match the network ({missing[:5]})")
    loaded = {}
    for name, tensor in state.items():
        layer = recorded[name]
        if tuple(layer["shape"]) != tuple(tensor.shape):
            raise DatasetError(
                f"{directory}: {name} has shape {layer['shape']}, "
                f"network expects {list(tensor.shape)}"
            )
        data = read_f32(directory / layer["file"], layer["shape"])
        loaded[name] = torch.from_numpy(data.copy()).to(dtype=tensor.dtype)
    module.load_state_dict(loaded)
    logger.debug("Loaded checkpoint %s (step %s)", directory, manifest.get("step"))
    return manifest
