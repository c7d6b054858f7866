import logging
from functools import wraps
from pathlib import Path
from typing import List
from typing import Optional

import numpy as np
import typer
from pydantic import ValidationError

from repos import ArtifactRepository
from repos import Storage
from repos import TrajectoryRepository
from settings import Settings
from settings import settings
from structnode import ablate as run_ablation
from structnode import AblationAxis
from structnode import build
from structnode import evaluate_ekf
from structnode import evaluate_rmse
from structnode import ExperimentConfig
from structnode import generate as generate_dataset
from structnode import MissingArtifactError
from structnode import predict_outputs
from structnode import reports_table
from structnode import StructNodeError
from structnode import train as train_model
from structnode import training_config
from structnode import UsageError

cli = typer.Typer()

TRAIN = "train"
TEST = "test"

ConfigOption = typer.Option(None, "--config", help="experiment config JSON")
PresetOption = typer.Option(None, "--preset", help="named preset, used when no config file is given")
SeedOption = typer.Option(None, "--seed")
ThreadsOption = typer.Option(None, "--threads")
DeterministicOption = typer.Option(False, "--deterministic", help="serial gradient reduction")
OutOption = typer.Option(None, "--out", help="run directory")


def handle_errors(command):
    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ValidationError as e:
            typer.echo(f"config error:\n{e}", err=True)
            raise typer.Exit(code=2)
        except StructNodeError as e:
            typer.echo(f"{type(e).__name__}: {e}", err=True)
            raise typer.Exit(code=e.exit_code)

    return wrapper


def load_config(
    config: Optional[Path],
    preset: Optional[str],
    seed: Optional[int],
    threads: Optional[int],
    deterministic: bool,
    out: Optional[Path],
) -> ExperimentConfig:
    if config is not None:
        if not config.exists():
            raise MissingArtifactError(f"config file {config} does not exist")
        cfg = ExperimentConfig.parse_file(config)
    elif preset is not None:
        cfg = ExperimentConfig(preset=preset)
    else:
        raise UsageError("give either --config or --preset")

    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if threads is not None:
        changes["threads"] = threads
    if deterministic:
        changes["threads"] = 1
    if out is not None:
        changes["out"] = str(out)
    return cfg.variant(**changes) if changes else cfg


@cli.command()
@handle_errors
def generate(
    config: Optional[Path] = ConfigOption,
    preset: Optional[str] = PresetOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    deterministic: bool = DeterministicOption,
    out: Optional[Path] = OutOption,
):
    """Simulate the training and test datasets"""
    cfg = load_config(config, preset, seed, threads, deterministic, out)
    trajectories = TrajectoryRepository(Storage.init(cfg.out))
    for name, test in ((TRAIN, False), (TEST, True)):
        dataset = generate_dataset(cfg, test=test)
        manifest = {
            "schema_version": cfg.schema_version,
            "system": cfg.system.value,
            "seed": cfg.seed,
            "sigma2": cfg.noise_variance,
            "dt": cfg.dt,
            "n": dataset[0].n,
            "N": len(dataset),
        }
        files = trajectories.write_dataset(name, dataset, manifest)
        typer.echo(f"{name}: {len(files)} trajectories in {Path(cfg.out) / name}")


@cli.command()
@handle_errors
def train(
    config: Optional[Path] = ConfigOption,
    preset: Optional[str] = PresetOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    deterministic: bool = DeterministicOption,
    out: Optional[Path] = OutOption,
):
    """Train the structured model and its recognition model on the generated training set"""
    cfg = load_config(config, preset, seed, threads, deterministic, out)
    storage = Storage.init(cfg.out)
    dataset = TrajectoryRepository(storage).read_dataset(TRAIN)
    artifacts = ArtifactRepository(storage)

    result = build(cfg)
    _, _, report = train_model(result.model, result.recog, dataset, training_config(cfg))
    artifacts.save_parameters(result)
    artifacts.save_metrics(TRAIN, report)
    typer.echo(report.table())


@cli.command("eval")
@handle_errors
def evaluate(
    config: Optional[Path] = ConfigOption,
    preset: Optional[str] = PresetOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    deterministic: bool = DeterministicOption,
    out: Optional[Path] = OutOption,
):
    """Prediction RMSE of the trained models on the test set"""
    cfg = load_config(config, preset, seed, threads, deterministic, out)
    storage = Storage.init(cfg.out)
    dataset = TrajectoryRepository(storage).read_dataset(TEST)
    artifacts = ArtifactRepository(storage)

    result = artifacts.load_parameters(cfg)
    report = evaluate_rmse(result.model, result.recog, dataset, cfg.t_c, substeps=cfg.substeps, label=TEST)
    artifacts.save_metrics(TEST, report)

    predictions = predict_outputs(result.model, result.recog, dataset, cfg.substeps)
    for j, tr in enumerate(dataset):
        artifacts.save_prediction(j, tr.t, predictions[:, j, :], tr.y)
    typer.echo(report.table())


@cli.command()
@handle_errors
def ablate(
    axis: AblationAxis = typer.Option(..., "--axis"),
    values: List[float] = typer.Option(..., "--value", help="repeat for every value"),
    config: Optional[Path] = ConfigOption,
    preset: Optional[str] = PresetOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    deterministic: bool = DeterministicOption,
    out: Optional[Path] = OutOption,
):
    """Train and evaluate once per value of t_c (grid steps) or of the noise variance"""
    cfg = load_config(config, preset, seed, threads, deterministic, out)
    reports = run_ablation(axis, values, cfg)
    ArtifactRepository(Storage.init(cfg.out)).save_metrics_list(f"ablate_{axis.value}", reports)
    typer.echo(reports_table(reports))


@cli.command()
@handle_errors
def ekf(
    true_model: bool = typer.Option(False, "--true-model", help="filter with the true dynamics"),
    config: Optional[Path] = ConfigOption,
    preset: Optional[str] = PresetOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    deterministic: bool = DeterministicOption,
    out: Optional[Path] = OutOption,
):
    """Run the extended Kalman filter on fresh output streams and compare with open-loop rollouts"""
    cfg = load_config(config, preset, seed, threads, deterministic, out)
    storage = Storage.init(cfg.out)
    artifacts = ArtifactRepository(storage)
    model = build(cfg).model if true_model else artifacts.load_parameters(cfg).model

    report, estimates = evaluate_ekf(cfg, model, use_true_model=true_model)
    storage.set_json("metrics/ekf.json", report.dict())
    for j, means in enumerate(estimates):
        artifacts.save_ekf_estimate(j, cfg.dt * np.arange(len(means)), means)
    typer.echo(f"EKF median {report.coordinates} RMSE {report.ekf_median:.4g}, open loop {report.open_loop_median:.4g}")


def startup(settings: Settings):
    logging.basicConfig(
        level=settings.STRUCTNODE_LOG.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


if __name__ == "__main__":
    startup(settings)
    cli()
