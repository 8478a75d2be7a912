"""Training of the learned networks: separate (SL) and integrated (IL) schemes.

SL trains the unmixing network on (y, beta) pairs and then the imaging network on
(beta_hat, q), where beta_hat is either the frozen unmixing network's output or the simulated
projections with additive Gaussian noise. IL trains both networks end to end on (y, q).
Every stage uses ADAM with cosine annealing and global-norm gradient clipping, and is a pure
function of the dataset, the configuration and the seed.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
import torch
from torch import nn

from learned_spectral_ct.dataset import Dataset
from learned_spectral_ct.errors import NumericalError
from learned_spectral_ct.learned_pd import (
    IntegratedNetwork,
    ReconstructionNetwork,
    UnmixingNetwork,
    UnrollConfig,
)
from learned_spectral_ct.metrics import mean_ssim
from learned_spectral_ct.nn import clip_global_norm, cosine_schedule, make_optimizer, mse_loss
from learned_spectral_ct.spectral import SpectralSystem
from learned_spectral_ct.tomo import ScanGeometry

logger = logging.getLogger(__name__)

T = TypeVar("T")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainingConfig:
    """Optimisation protocol.

    Attributes:
        method: ``sl`` or ``il``.
        steps: Optimiser steps (per stage for SL).
        batch_size: Batch of the unmixing stage and of IL.
        reco_batch_size: Batch of the SL imaging stage.
        learning_rate: Initial learning rate of the cosine schedule.
        clip_norm: Maximum global gradient norm.
        validation_every: Validation cadence in steps.
        validation_size: Samples held out (the dataset tail) for validation.
        seed: Seed of initialisation, batch sampling and simulated noise.
        stage2_source: SL imaging input, ``recovered`` (unmixing output) or ``simulated``.
        simulated_noise: Standard deviation of the Gaussian noise added to simulated beta.
        dtype: ``float32`` for training, ``float64`` for gradient checks.
    """

    method: str = "il"
    steps: int = 1500
    batch_size: int = 3
    reco_batch_size: int = 15
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    validation_every: int = 500
    validation_size: int = 0
    seed: int = 0
    stage2_source: str = "recovered"
    simulated_noise: float = 0.0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.method not in ("sl", "il"):
            raise ValueError(f"method must be sl or il, got {self.method!r}")
        if self.steps < 1 or self.batch_size < 1 or self.reco_batch_size < 1:
            raise ValueError("steps and batch sizes must be >= 1")
        if not self.learning_rate > 0 or not self.clip_norm > 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if self.validation_every < 1 or self.validation_size < 0:
            raise ValueError("validation_every must be >= 1 and validation_size >= 0")
        if self.stage2_source not in ("recovered", "simulated"):
            raise ValueError(
                f"stage2_source must be recovered or simulated, got {self.stage2_source!r}"
            )
        if self.simulated_noise < 0:
            raise ValueError("simulated_noise must be >= 0")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


@dataclass(frozen=True)
class HistoryRow:
    step: int
    stage: str
    lr: float
    loss: float
    validation_ssim: float | None = None


@dataclass
class TrainingHistory:
    """Per-step record of a training run."""

    rows: list[HistoryRow] = field(default_factory=list)

    def losses(self, stage: str | None = None) -> list[float]:
        return [row.loss for row in self.rows if stage is None or row.stage == stage]

    def write_csv(self, path: Path | str) -> None:
        """Write ``step,stage,lr,loss,validation_ssim`` rows."""
        with Path(path).open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "stage", "lr", "loss", "validation_ssim"])
            for row in self.rows:
                ssim = "" if row.validation_ssim is None else repr(row.validation_ssim)
                writer.writerow([row.step, row.stage, repr(row.lr), repr(row.loss), ssim])


@dataclass
class TrainingResult:
    """A trained network with its history and best-validation weights (if validated)."""

    model: nn.Module
    history: TrainingHistory
    best_state: dict[str, torch.Tensor] | None = None
    best_ssim: float | None = None


@dataclass
class SLResult:
    unmix: TrainingResult
    reco: TrainingResult
    history: TrainingHistory


def build_networks(
    sys: SpectralSystem,
    geom: ScanGeometry,
    unmix_cfg: UnrollConfig,
    reco_cfg: UnrollConfig,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> IntegratedNetwork:
    """Freshly initialised unmixing and imaging networks (deterministic in ``seed``)."""
    generator = torch.Generator().manual_seed(seed)
    unmix = UnmixingNetwork(sys, geom, unmix_cfg, generator)
    reco = ReconstructionNetwork(geom, sys.n_materials, reco_cfg, generator)
    return IntegratedNetwork(unmix, reco).to(dtype)


def timed_inference(fn: Callable[..., T], *args: Any) -> tuple[T, float]:
    """Call ``fn(*args)`` and return (result, wall-clock seconds)."""
    start = time.perf_counter()
    result = fn(*args)
    return result, time.perf_counter() - start


class _Batches:
    """Seeded batch loader over dataset indices."""

    def __init__(self, dataset: Dataset, indices: Sequence[int], seed: int, dtype: torch.dtype):
        if not indices:
            raise ValueError("training needs at least one sample")
        self.dataset = dataset
        self.indices = np.asarray(indices)
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def draw(self, size: int) -> dict[str, torch.Tensor]:
        chosen = self.rng.choice(self.indices, size=size, replace=size > self.indices.size)
        return self.tensors(chosen.tolist())

    def tensors(self, indices: Sequence[int]) -> dict[str, torch.Tensor]:
        arrays = self.dataset.stack(indices)
        return {name: torch.as_tensor(a, dtype=self.dtype) for name, a in arrays.items()}


def _optimise(
    model: nn.Module,
    stage: str,
    loss_fn: Callable[[], torch.Tensor],
    validate: Callable[[], float] | None,
    cfg: TrainingConfig,
    history: TrainingHistory,
) -> TrainingResult:
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, cfg.learning_rate)
    schedule = cosine_schedule(optimizer, cfg.steps)
    result = TrainingResult(model=model, history=history)
    logger.info("Training stage %s: %d steps", stage, cfg.steps)
    model.train()
    for step in range(1, cfg.steps + 1):
        lr = optimizer.param_groups[0]["lr"]
        optimizer.zero_grad()
        loss = loss_fn()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at step {step} of stage {stage}")
        loss.backward()
        grad_norm = clip_global_norm(params, cfg.clip_norm)
        optimizer.step()
        schedule.step()
        validation = None
        if validate is not None and (step % cfg.validation_every == 0 or step == cfg.steps):
            model.eval()
            with torch.no_grad():
                validation = validate()
            model.train()
            if result.best_ssim is None or validation > result.best_ssim:
                result.best_ssim = validation
                result.best_state = copy.deepcopy(model.state_dict())
            logger.info(
                "%s step %d: loss %.6g validation SSIM %.4f", stage, step, value, validation
            )
        history.rows.append(HistoryRow(step, stage, lr, value, validation))
        logger.debug(
            "%s step %d: loss %.6g lr %.3g grad norm %.3g", stage, step, value, lr, grad_norm
        )
    model.eval()
    logger.info("Finished stage %s: final loss %.6g", stage, history.losses(stage)[-1])
    return result


def _split(dataset: Dataset, cfg: TrainingConfig) -> tuple[list[int], list[int]]:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return dataset.split(cfg.validation_size)


def train_il(
    dataset: Dataset,
    sys: SpectralSystem,
    geom: ScanGeometry,
    unmix_cfg: UnrollConfig,
    reco_cfg: UnrollConfig,
    cfg: TrainingConfig,
) -> TrainingResult:
    """Train unmixing and imaging end to end on MSE(q, T_reco(T_unmix(y)))."""
    torch.manual_seed(cfg.seed)
    train_idx, val_idx = _split(dataset, cfg)
    model = build_networks(sys, geom, unmix_cfg, reco_cfg, cfg.seed, cfg.torch_dtype)
    model.unmix.check_memory(cfg.batch_size)
    batches = _Batches(dataset, train_idx, cfg.seed, cfg.torch_dtype)

    def loss_fn() -> torch.Tensor:
        batch = batches.draw(cfg.batch_size)
        return mse_loss(model(batch["y"]), batch["q"])

    held_out = batches.tensors(val_idx) if val_idx else None

    def validate() -> float:
        assert held_out is not None
        return mean_ssim(model(held_out["y"]).numpy(), held_out["q"].numpy())

    return _optimise(
        model, "il", loss_fn, validate if held_out else None, cfg, TrainingHistory()
    )


def train_sl(
    dataset: Dataset,
    sys: SpectralSystem,
    geom: ScanGeometry,
    unmix_cfg: UnrollConfig,
    reco_cfg: UnrollConfig,
    cfg: TrainingConfig,
) -> SLResult:
    """Train the unmixing network on MSE(beta, T_unmix(y)), then imaging on MSE(q, T_reco(.))."""
    torch.manual_seed(cfg.seed)
    train_idx, val_idx = _split(dataset, cfg)
    model = build_networks(sys, geom, unmix_cfg, reco_cfg, cfg.seed, cfg.torch_dtype)
    unmix, reco = model.unmix, model.reco
    unmix.check_memory(cfg.batch_size)
    batches = _Batches(dataset, train_idx, cfg.seed, cfg.torch_dtype)
    held_out = batches.tensors(val_idx) if val_idx else None
    history = TrainingHistory()

    def unmix_loss() -> torch.Tensor:
        batch = batches.draw(cfg.batch_size)
        return mse_loss(unmix(batch["y"]), batch["beta"])

    def unmix_validate() -> float:
        assert held_out is not None
        return mean_ssim(unmix(held_out["y"]).numpy(), held_out["beta"].numpy())

    unmix_result = _optimise(
        unmix, "sl-unmix", unmix_loss, unmix_validate if held_out else None, cfg, history
    )
    unmix.requires_grad_(False)

    noise = torch.Generator().manual_seed(cfg.seed + 1)

    def stage2_input(batch: dict[str, torch.Tensor]) -> torch.Tensor:
        if cfg.stage2_source == "recovered":
            with torch.no_grad():
                return unmix(batch["y"])
        jitter = torch.randn(batch["beta"].shape, generator=noise, dtype=batch["beta"].dtype)
        return batch["beta"] + cfg.simulated_noise * jitter

    def reco_loss() -> torch.Tensor:
        batch = batches.draw(cfg.reco_batch_size)
        return mse_loss(reco(stage2_input(batch)), batch["q"])

    def reco_validate() -> float:
        assert held_out is not None
        return mean_ssim(reco(unmix(held_out["y"])).numpy(), held_out["q"].numpy())

    reco_result = _optimise(
        reco, "sl-reco", reco_loss, reco_validate if held_out else None, cfg, history
    )
    return SLResult(unmix=unmix_result, reco=reco_result, history=history)
