"""Command-line interface: dataset generation, training, reconstruction and evaluation.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import logging
import sys
import time
from collections.abc import Callable
from pathlib import Path

import numpy as np
import torch

from learned_spectral_ct import __version__
from learned_spectral_ct.classical import classical_pipeline
from learned_spectral_ct.config import (
    RESOLVED_NAME,
    ExperimentConfig,
    build_geometry,
    build_spectral_system,
    config_to_dict,
    load_config,
    phantom_config,
    save_resolved,
)
from learned_spectral_ct.dataset import Dataset, generate_dataset
from learned_spectral_ct.errors import ConfigError, DatasetError, NumericalError
from learned_spectral_ct.learned_pd import IntegratedNetwork, infer
from learned_spectral_ct.metrics import EvalReport, evaluate
from learned_spectral_ct.nn import load_checkpoint, save_checkpoint
from learned_spectral_ct.phantoms import Sample, shepp_logan_material, synthesize_sample
from learned_spectral_ct.spectral import SpectralSystem
from learned_spectral_ct.storage import (
    output_lock,
    prepare_output_dir,
    read_f32,
    write_f32,
    write_pgm,
)
from learned_spectral_ct.tomo import MaterialImage, ScanGeometry
from learned_spectral_ct.training import (
    TrainingResult,
    build_networks,
    timed_inference,
    train_il,
    train_sl,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

Reconstructor = Callable[[np.ndarray], MaterialImage]


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", help="bundled configuration (e_5, e_5_small, structured)")
    common.add_argument("-c", "--config", type=Path, help="YAML configuration file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a configuration key, e.g. --set training.steps=100",
    )
    common.add_argument("--seed", type=int, help="seed of the command (default: from config)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="number of torch/BLAS threads")
    common.add_argument(
        "--overwrite", action="store_true", help="replace the contents of a non-empty --out"
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    return common


def build_parser() -> argparse.ArgumentParser:
    """Create the ``spectral-ct`` argument parser."""
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="spectral-ct",
        description="Spectral CT material unmixing and imaging with classical and learned methods",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--count", type=int, required=True, help="number of samples")
    gen.add_argument("--workers", type=int, default=1, help="generator threads")

    train = sub.add_parser("train", parents=[common], help="train learned networks")
    train.add_argument("--data", type=Path, required=True, help="training dataset directory")
    train.add_argument("--method", choices=("sl", "il"), help="separate or integrated learning")
    train.add_argument("--steps", type=int, help="optimiser steps (per stage for sl)")
    train.add_argument("--batch", type=int, help="batch size")
    train.add_argument(
        "--conv3d-unmix", action="store_true", help="3D convolutions in the unmixing network"
    )

    reco = sub.add_parser("reconstruct", parents=[common], help="reconstruct material images")
    _add_method(reco, oracle=False)
    reco.add_argument("--input", type=Path, required=True, help="counts y as raw f32")

    ev = sub.add_parser("evaluate", parents=[common], help="score a method on a test set")
    _add_method(ev, oracle=True)
    ev.add_argument("--data", type=Path, required=True, help="test dataset directory")
    ev.add_argument("--n", type=int, help="number of test samples (default: from config)")
    ev.add_argument("--shepp-logan", action="store_true", help="also score a Shepp-Logan phantom")
    ev.add_argument("--density", action="store_true", help="score density images rho_k q_k")
    return parser


def _add_method(parser: argparse.ArgumentParser, oracle: bool) -> None:
    method = parser.add_mutually_exclusive_group(required=True)
    method.add_argument("--checkpoint", type=Path, help="directory written by train")
    method.add_argument("--classical", action="store_true", help="ADMM unmixing then imaging")
    if oracle:
        method.add_argument(
            "--oracle", action="store_true", help="return the ground truth (harness self-test)"
        )


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True
    )


def _load(args: argparse.Namespace, extra: list[str] | None = None) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"training.seed={args.seed}"]
    overrides += extra or []
    path = args.config
    checkpoint = getattr(args, "checkpoint", None)
    if path is None and args.preset is None and checkpoint is not None:
        resolved = checkpoint / RESOLVED_NAME
        if resolved.is_file():
            path = resolved
    return load_config(args.preset, path, overrides)


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    return args.out


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = _require_out(args)
    geom, spectral = build_geometry(cfg), build_spectral_system(cfg)
    manifest = generate_dataset(
        phantom_config(cfg),
        geom,
        spectral,
        args.count,
        cfg.seed,
        out,
        overwrite=args.overwrite,
        workers=args.workers,
        metadata=config_to_dict(cfg),
    )
    save_resolved(cfg, out)
    print(
        f"wrote {args.count} samples (seed {cfg.seed}) to {out}: "
        f"q {(spectral.n_materials, *geom.image_shape)}, "
        f"beta {(spectral.n_materials, *geom.sinogram_shape)}, "
        f"y {(spectral.n_bins, *geom.sinogram_shape)}; manifest {manifest}"
    )
    return EXIT_OK


def _check_dataset(dataset: Dataset, cfg: ExperimentConfig) -> None:
    if tuple(dataset.materials) != tuple(cfg.spectral.materials):
        raise ConfigError(
            f"dataset materials {dataset.materials} differ from configured "
            f"{list(cfg.spectral.materials)}"
        )


def _save_result(result: TrainingResult, directory: Path, name: str, cfg: ExperimentConfig) -> None:
    step = cfg.training.steps
    hyper = {"method": cfg.training.method, "networks": config_to_dict(cfg)["networks"]}
    save_checkpoint(directory / name, result.model, step=step, hyperparameters=hyper)
    if result.best_state is not None:
        best = copy.deepcopy(result.model)
        best.load_state_dict(result.best_state)
        save_checkpoint(
            directory / f"{name}-best",
            best,
            step=step,
            hyperparameters={**hyper, "validation_ssim": result.best_ssim},
        )


def cmd_train(args: argparse.Namespace) -> int:
    extra = []
    if args.method:
        extra.append(f"training.method={args.method}")
    if args.steps is not None:
        extra.append(f"training.steps={args.steps}")
    if args.batch is not None:
        extra.append(f"training.batch_size={args.batch}")
    if args.conv3d_unmix:
        extra.append("networks.unmix.conv_dims=3")
    cfg = _load(args, extra)
    out = _require_out(args)
    dataset = Dataset.load(args.data)
    _check_dataset(dataset, cfg)
    geom, spectral = build_geometry(cfg), build_spectral_system(cfg)
    nets, training = cfg.networks, cfg.training
    with output_lock(out):
        prepare_output_dir(out, args.overwrite)
        if training.method == "il":
            result = train_il(dataset, spectral, geom, nets.unmix, nets.reco, training)
            _save_result(result, out, "model", cfg)
            history = result.history
        else:
            sl = train_sl(dataset, spectral, geom, nets.unmix, nets.reco, training)
            _save_result(sl.unmix, out, "unmix", cfg)
            _save_result(sl.reco, out, "reco", cfg)
            history = sl.history
        history.write_csv(out / "history.csv")
        save_resolved(cfg, out)
    print(f"trained {training.method} for {training.steps} steps; outputs in {out}")
    return EXIT_OK


def load_trained(
    checkpoint: Path, cfg: ExperimentConfig, spectral: SpectralSystem, geom: ScanGeometry
) -> IntegratedNetwork:
    """Rebuild the networks of a ``train`` output directory and load their weights."""
    model = build_networks(spectral, geom, cfg.networks.unmix, cfg.networks.reco, seed=0)
    if (checkpoint / "model").is_dir():
        load_checkpoint(checkpoint / "model", model)
    elif (checkpoint / "unmix").is_dir() and (checkpoint / "reco").is_dir():
        load_checkpoint(checkpoint / "unmix", model.unmix)
        load_checkpoint(checkpoint / "reco", model.reco)
    else:
        raise DatasetError(f"{checkpoint} holds no model/ or unmix/ + reco/ checkpoints")
    model.eval()
    return model


def _reconstructor(
    args: argparse.Namespace, cfg: ExperimentConfig, spectral: SpectralSystem, geom: ScanGeometry
) -> Reconstructor:
    if args.classical:
        solver = cfg.solver

        def classical(y: np.ndarray) -> MaterialImage:
            return classical_pipeline(spectral, geom, y, solver.unmixing, solver.imaging)[0]

        return classical
    model = load_trained(args.checkpoint, cfg, spectral, geom)
    return lambda y: infer(model, y)


def cmd_reconstruct(args: argparse.Namespace) -> int:
    start = time.perf_counter()
    cfg = _load(args)
    out = _require_out(args)
    geom, spectral = build_geometry(cfg), build_spectral_system(cfg)
    y = read_f32(args.input, (spectral.n_bins, *geom.sinogram_shape)).astype(np.float64)
    reconstruct = _reconstructor(args, cfg, spectral, geom)
    q, inference_time = timed_inference(reconstruct, y)
    with output_lock(out):
        prepare_output_dir(out, args.overwrite)
        peak = float(spectral.densities.max())
        for k, name in enumerate(spectral.materials):
            write_f32(out / f"q_{name}.f32", q[k])
            write_pgm(out / f"q_{name}.pgm", q[k] * spectral.densities[k], 0.0, peak)
        save_resolved(cfg, out)
    total = time.perf_counter() - start
    method = "classical" if args.classical else "learned"
    print(f"timing: {method} inference {inference_time:.3f} s, total {total:.3f} s")
    return EXIT_OK


def _write_report(report: EvalReport, out: Path | None, stem: str) -> None:
    print(report.to_table())
    if out is not None:
        (out / f"{stem}.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / f"{stem}.txt").write_text(report.to_table() + "\n", encoding="utf-8")


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    geom, spectral = build_geometry(cfg), build_spectral_system(cfg)
    dataset = Dataset.load(args.data)
    _check_dataset(dataset, cfg)
    if args.oracle:

        def score(sample: Sample) -> MaterialImage:
            return sample.q

        label = "oracle"
    else:
        reconstruct = _reconstructor(args, cfg, spectral, geom)

        def score(sample: Sample) -> MaterialImage:
            return reconstruct(sample.y)

        label = "classical" if args.classical else "learned"
    densities = spectral.densities if args.density or cfg.evaluation.density_mode else None
    n_samples = cfg.evaluation.n_samples if args.n is None else args.n
    materials = list(spectral.materials)
    out = args.out
    with output_lock(out) if out is not None else contextlib.nullcontext():
        if out is not None:
            prepare_output_dir(out, args.overwrite)
        report = evaluate(
            score, dataset, materials, densities=densities, n_samples=n_samples, title=label
        )
        _write_report(report, out, "report")
        if args.shepp_logan:
            try:
                phantom = shepp_logan_material(geom, materials)
            except ValueError as exc:
                raise ConfigError(f"--shepp-logan: {exc}") from exc
            sample = synthesize_sample(phantom, geom, spectral, cfg.seed)
            sl_report = evaluate(
                score,
                [sample],
                materials,
                densities=densities,
                n_samples=1,
                title=f"{label}, Shepp-Logan",
            )
            _write_report(sl_report, out, "report_shepp_logan")
        if out is not None:
            save_resolved(cfg, out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    """Entry point for the ``spectral-ct`` command."""
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (DatasetError, OSError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except (KeyError, ValueError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
