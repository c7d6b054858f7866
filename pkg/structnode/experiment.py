"""Experiment configuration and the generate / train / evaluate / ablate / EKF pipeline"""
from __future__ import annotations

import logging
from enum import Enum
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from pydantic import BaseModel
from pydantic import root_validator
from pydantic import validator

from .benchsys import BenchmarkSystem
from .benchsys import DEFAULT_SIGMA2
from .benchsys import generate_dataset
from .benchsys import NoiseSpec
from .benchsys import SystemKind
from .benchsys import Trajectory
from .benchsys import true_field
from .benchsys import TRUE_PARAMETERS
from .benchsys import x0_uniform
from .diffcore import no_tape
from .ekf import EKFConfig
from .ekf import run_filter
from .errors import ConfigurationError
from .observers import RecognitionKind
from .observers import RecognitionVariant
from .odesolve import integrate
from .odesolve import SampledSignal
from .odesolve import TimeGrid
from .priors import ModelSpec
from .priors import StructureKind
from .trainer import evaluate_rmse
from .trainer import MetricsReport
from .trainer import train
from .trainer import TrainingConfig


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TEST_SEED_OFFSET = 1_000_003
EKF_SEED_OFFSET = 2_000_003

PRESETS: Dict[str, Dict] = {
    "harmonic_oscillator": {
        "system": "harmonic_oscillator",
        "N": 20,
        "n": 101,
        "N_test": 100,
        "n_test": 301,
        "dt": 0.03,
        "t_c": 1.2,
        "sigma2": 1e-4,
    },
    "harmonic_oscillator_coarse": {
        "system": "harmonic_oscillator",
        "N": 50,
        "n": 51,
        "N_test": 100,
        "n_test": 151,
        "dt": 0.06,
        "t_c": 1.2,
        "sigma2": 1e-4,
    },
    "van_der_pol": {
        "system": "van_der_pol",
        "N": 50,
        "n": 100,
        "N_test": 100,
        "dt": 0.03,
        "t_c": 1.2,
        "sigma2": 1e-3,
    },
    "fitzhugh_nagumo": {
        "system": "fitzhugh_nagumo",
        "N": 50,
        "n": 100,
        "N_test": 100,
        "dt": 0.03,
        "t_c": 1.2,
        "sigma2": 5e-4,
    },
    "earthquake": {
        "system": "earthquake",
        "N": 50,
        "n": 100,
        "N_test": 100,
        "dt": 0.03,
        "t_c": 1.2,
        "sigma2": 1e-4,
    },
}


class ExperimentConfig(BaseModel):
    schema_version: int = SCHEMA_VERSION
    preset: Optional[str] = None
    system: SystemKind = SystemKind.HARMONIC_OSCILLATOR
    structure: StructureKind = StructureKind.FREE
    recognition: RecognitionKind = RecognitionKind.KKL

    N: int = 50
    n: int = 100
    N_test: int = 100
    n_test: Optional[int] = None
    dt: float = 0.03
    t_c: float = 1.2
    sigma2: Optional[float] = None
    x0_low: float = -1.0
    x0_high: float = 1.0
    data_substeps: int = 10

    lr: float = 0.005
    decay: bool = False
    epochs: int = 100
    batch_size: int = 10
    patience: Optional[int] = None
    substeps: int = 1
    hidden: List[int] = [50, 50]
    d_z: Optional[int] = None
    omega_c: float = 1.0
    d_omega: int = 3
    gain_init: str = "butterworth"
    lam_res: float = 5e-7
    train_D: bool = True

    ekf_trajectories: int = 10
    ekf_n: Optional[int] = None
    ekf_x0_std: float = 0.3
    ekf_q: float = 1e-4

    seed: int = 0
    threads: int = 1
    out: str = "runs/default"

    class Config:
        extra = "forbid"
        use_enum_values = False

    @root_validator(pre=True)
    def merge_preset(cls, values):
        name = values.get("preset")
        if name is None:
            return values
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name}, expected one of {sorted(PRESETS)}")
        return {**PRESETS[name], **values}

    @validator("schema_version")
    def validate_schema(cls, version: int):
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {version}, expected {SCHEMA_VERSION}")
        return version

    @validator("N", "N_test", "epochs", "batch_size", "threads", "substeps", "data_substeps", "ekf_trajectories")
    def validate_count(cls, v: int, field):
        least = 0 if field.name == "epochs" else 1
        if v < least:
            raise ValueError(f"must be at least {least}")
        return v

    @validator("n", "n_test", "ekf_n")
    def validate_length(cls, n: Optional[int]):
        if n is not None and n < 2:
            raise ValueError("a trajectory needs at least two samples")
        return n

    @validator("dt")
    def validate_step(cls, dt: float):
        if not dt > 0:
            raise ValueError("dt must be positive")
        return dt

    @validator("t_c")
    def validate_window(cls, t_c: float, values):
        dt = values.get("dt")
        if t_c < 0:
            raise ValueError("t_c must be non-negative")
        if dt is not None:
            steps = t_c / dt
            if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
                raise ValueError(f"t_c={t_c} is not a multiple of dt={dt}")
        return t_c

    @validator("sigma2", "lam_res", "ekf_x0_std", "ekf_q")
    def validate_non_negative(cls, v: Optional[float]):
        if v is not None and v < 0:
            raise ValueError("must be non-negative")
        return v

    @validator("lr", "omega_c")
    def validate_positive(cls, v: float):
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @validator("gain_init")
    def validate_gain_init(cls, init: str):
        if init not in ("butterworth", "diagonal"):
            raise ValueError("gain_init is butterworth or diagonal")
        return init

    @validator("x0_high")
    def validate_box(cls, high: float, values):
        low = values.get("x0_low")
        if low is not None and not high > low:
            raise ValueError("x0_high must exceed x0_low")
        return high

    @property
    def noise_variance(self) -> float:
        return DEFAULT_SIGMA2[self.system] if self.sigma2 is None else self.sigma2

    @property
    def test_length(self) -> int:
        return self.n_test or self.n

    @property
    def window_steps(self) -> int:
        return int(round(self.t_c / self.dt))

    def variant(self, **changes) -> "ExperimentConfig":
        data = self.dict()
        data.update(changes)
        data.pop("preset")
        return ExperimentConfig(**data)


def build_system(cfg: ExperimentConfig) -> BenchmarkSystem:
    return BenchmarkSystem.preset(cfg.system)


def default_prior(system: BenchmarkSystem) -> Tuple[np.ndarray, np.ndarray]:
    """Linear prior fields (A, B); the earthquake prior has a detuned stiffness"""
    kind = system.kind
    if kind == SystemKind.HARMONIC_OSCILLATOR:
        return np.array([[0.0, 1.0], [-1.0, 0.0]]), np.zeros((2, 0))
    if kind == SystemKind.VAN_DER_POL:
        mu = TRUE_PARAMETERS[kind]["mu"]
        return np.array([[0.0, 1.0], [-1.0, mu]]), np.array([[0.0], [1.0]])
    if kind == SystemKind.FITZHUGH_NAGUMO:
        p = TRUE_PARAMETERS[kind]
        A = np.array([[1.0 / p["eps_fhn"], -1.0 / p["eps_fhn"]], [p["gamma"], -1.0]])
        return A, np.array([[1.0], [0.0]])
    k = 9.0
    A = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [-2.0 * k, 0.0, k, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [k, 0.0, -k, 0.0],
        ]
    )
    return A, np.array([[0.0], [1.0], [0.0], [1.0]])


def build_model(cfg: ExperimentConfig, system: BenchmarkSystem, rng: np.random.Generator) -> ModelSpec:
    prior = default_prior(system) if cfg.structure == StructureKind.RESIDUAL_ON_PRIOR else None
    return ModelSpec.create(cfg.structure, system, rng, hidden=cfg.hidden, prior=prior, lam_res=cfg.lam_res)


def recognition_inputs(system: BenchmarkSystem) -> int:
    """Input channels the recognition model may read"""
    return system.d_u if system.input_observed else 0


def build_recognition(
    cfg: ExperimentConfig,
    system: BenchmarkSystem,
    model: ModelSpec,
    rng: np.random.Generator,
) -> RecognitionVariant:
    return RecognitionVariant.create(
        cfg.recognition,
        d_x=model.d_x,
        d_y=system.d_y,
        d_u=recognition_inputs(system),
        t_c=cfg.t_c,
        dt=cfg.dt,
        rng=rng,
        d_z=cfg.d_z,
        d_omega=cfg.d_omega,
        omega_c=cfg.omega_c,
        gain_init=cfg.gain_init,
        hidden=cfg.hidden,
        train_D=cfg.train_D,
    )


def training_config(cfg: ExperimentConfig) -> TrainingConfig:
    return TrainingConfig(
        t_c=cfg.t_c,
        lr=cfg.lr,
        decay=cfg.decay,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        train_D=cfg.train_D,
        lam_res=cfg.lam_res,
        patience=cfg.patience,
        seed=cfg.seed,
        threads=cfg.threads,
        substeps=cfg.substeps,
    )


def generate(cfg: ExperimentConfig, test: bool = False) -> List[Trajectory]:
    system = build_system(cfg)
    grid = TimeGrid(dt=cfg.dt, n=cfg.test_length if test else cfg.n)
    noise = NoiseSpec(sigma2=cfg.noise_variance, seed=cfg.seed + (TEST_SEED_OFFSET if test else 0))
    return generate_dataset(
        system,
        system.inputs,
        noise,
        cfg.N_test if test else cfg.N,
        grid,
        x0_uniform(system.d_x, cfg.x0_low, cfg.x0_high),
        substeps=cfg.data_substeps,
    )


class ExperimentResult:
    def __init__(self, cfg: ExperimentConfig, model: ModelSpec, recog: RecognitionVariant):
        self.cfg = cfg
        self.model = model
        self.recog = recog
        self.train_report: Optional[MetricsReport] = None
        self.test_report: Optional[MetricsReport] = None


def build(cfg: ExperimentConfig) -> ExperimentResult:
    system = build_system(cfg)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, system, rng)
    recog = build_recognition(cfg, system, model, rng)
    return ExperimentResult(cfg, model, recog)


def run_experiment(
    cfg: ExperimentConfig,
    training: Optional[Sequence[Trajectory]] = None,
    testing: Optional[Sequence[Trajectory]] = None,
    label: str = "",
) -> ExperimentResult:
    """Generate (unless given), train and evaluate in memory"""
    training = training if training is not None else generate(cfg)
    testing = testing if testing is not None else generate(cfg, test=True)

    result = build(cfg)
    _, _, result.train_report = train(result.model, result.recog, training, training_config(cfg))
    result.test_report = evaluate_rmse(
        result.model,
        result.recog,
        testing,
        cfg.t_c,
        substeps=cfg.substeps,
        label=label or f"{cfg.system.value} {cfg.structure.value}/{cfg.recognition.value}",
    )
    result.test_report.train_loss = result.train_report.train_loss
    result.test_report.val_loss = result.train_report.val_loss
    result.test_report.epochs_run = result.train_report.epochs_run
    logger.info("median test RMSE %.4g (IQR %.4g)", result.test_report.median, result.test_report.iqr)
    return result


class AblationAxis(str, Enum):
    T_C = "t_c"
    SIGMA2 = "sigma2"


def _lengths_for_window(base: ExperimentConfig, steps: int) -> Dict[str, Optional[int]]:
    """Trajectory lengths stretched so a window of `steps` grid steps fits"""
    lengths = {"n": max(base.n, steps + 1)}
    if base.n_test is not None:
        lengths["n_test"] = max(base.n_test, steps + 1)
    return lengths


def ablate(axis: AblationAxis, values: Sequence[float], base: ExperimentConfig) -> List[MetricsReport]:
    """One train + evaluate per value; t_c values are in grid steps, sigma2 values are variances"""
    axis = AblationAxis(axis)
    if not values:
        raise ConfigurationError("ablation needs at least one value")

    reports = []
    for value in values:
        if axis == AblationAxis.T_C:
            steps = int(value)
            cfg = base.variant(t_c=steps * base.dt, **_lengths_for_window(base, steps))
            label = f"t_c={steps} steps"
        else:
            cfg = base.variant(sigma2=float(value))
            label = f"sigma2={float(value):.3g}"
        logger.info("ablation %s", label)
        reports.append(run_experiment(cfg, label=label).test_report)
    return reports


class EKFReport(BaseModel):
    """EKF against open-loop rollout from the same perturbed initial state"""

    coordinates: str
    ekf_rmse: List[float]
    open_loop_rmse: List[float]

    @property
    def ekf_median(self) -> float:
        return float(np.median(self.ekf_rmse))

    @property
    def open_loop_median(self) -> float:
        return float(np.median(self.open_loop_rmse))


def physical_coordinates(model: ModelSpec) -> bool:
    """Whether the model state is the physical state, so state errors are meaningful"""
    return model.kind in (StructureKind.PARAMETRIC, StructureKind.EXTENDED_STATE)


def _initial_guess(
    model: Optional[ModelSpec], x0: np.ndarray, rng: np.random.Generator, std: float
) -> np.ndarray:
    guess = x0 + rng.normal(0.0, std, size=x0.shape)
    if model is not None and model.extended:
        guess = np.concatenate([guess, [model.system.params[name] for name in model.extended]])
    return guess


def evaluate_ekf(
    cfg: ExperimentConfig,
    model: ModelSpec,
    streams: Optional[Sequence[Trajectory]] = None,
    use_true_model: bool = False,
) -> Tuple[EKFReport, List[np.ndarray]]:
    """Filter noisy output streams with the model; returns the report and the estimated means"""
    system = build_system(cfg)
    if streams is None:
        streams = generate(
            cfg.variant(
                N_test=cfg.ekf_trajectories,
                n_test=cfg.ekf_n or cfg.test_length,
                seed=cfg.seed + EKF_SEED_OFFSET,
            ),
            test=True,
        )

    if use_true_model:

        def field(t: float, x, u):
            return true_field(system, t, x, u)

        d_x, state_rmse = system.d_x, True
    else:
        field = model.field
        d_x, state_rmse = model.d_x, physical_coordinates(model)

    ekf_cfg = EKFConfig.default(d_x, system.measured, cfg.noise_variance, cfg.dt, q=cfg.ekf_q)
    rng = np.random.default_rng(cfg.seed + EKF_SEED_OFFSET)
    ekf_rmse, open_rmse, estimates = [], [], []

    for tr in streams:
        x0 = _initial_guess(None if use_true_model else model, tr.x[0], rng, cfg.ekf_x0_std)
        P0 = max(cfg.ekf_x0_std**2, 1e-8) * np.eye(d_x)
        means, _ = run_filter(field, ekf_cfg, x0, P0, tr.y, tr.u, t0=float(tr.t[0]))
        with no_tape():
            u_sig = SampledSignal(grid=tr.grid, values=tr.u) if tr.u is not None else None
            rollout = integrate(field, x0, tr.grid, u_sig).value

        if state_rmse:
            truth = tr.x
            ekf_err = means[:, : system.d_x] - truth
            open_err = rollout[:, : system.d_x] - truth
        else:
            truth = system.output(tr.x)
            ekf_err = means[:, system.measured] - truth
            open_err = rollout[:, system.measured] - truth
        ekf_rmse.append(float(np.sqrt(np.mean(ekf_err**2))))
        open_rmse.append(float(np.sqrt(np.mean(open_err**2))))
        estimates.append(means)

    report = EKFReport(
        coordinates="state" if state_rmse else "output",
        ekf_rmse=ekf_rmse,
        open_loop_rmse=open_rmse,
    )
    logger.info(
        "EKF median %s RMSE %.4g, open loop %.4g", report.coordinates, report.ekf_median, report.open_loop_median
    )
    return report, estimates
