"""Joint training of the vector field and the recognition model, and its evaluation"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from pydantic import BaseModel
from pydantic import validator
from terminaltables import AsciiTable

from .benchsys import stack_trajectories
from .benchsys import Trajectory
from .diffcore import ArrayLike
from .diffcore import as_node
from .diffcore import backward
from .diffcore import Gradients
from .diffcore import no_tape
from .diffcore import Node
from .errors import ConfigurationError
from .errors import IntegrationError
from .errors import PreconditionError
from .errors import TrainingError
from .errors import UsageError
from .nets import adam_update
from .nets import AdamState
from .nets import StateDict
from .observers import estimate_x0
from .observers import RecognitionVariant
from .odesolve import integrate
from .odesolve import SampledSignal
from .odesolve import TimeGrid
from .priors import ModelSpec
from .priors import residual_penalty
from .priors import StructureKind


logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


def _as_array(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1)


class Scaler(BaseModel):
    """Per-channel moments of y and u; state channels borrow them from y"""

    y_mean: np.ndarray
    y_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        json_encoders = {np.ndarray: lambda a: a.tolist()}

    @validator("*", pre=True)
    def validate_moments(cls, v):
        return _as_array(v)

    @validator("y_std", "u_std", "x_std")
    def validate_floor(cls, v: np.ndarray):
        return np.maximum(v, STD_FLOOR)

    def scale_y(self, y: ArrayLike):
        return (y - self.y_mean) / self.y_std

    def unscale_y(self, y: ArrayLike):
        return self.y_mean + self.y_std * y

    def scale_u(self, u: ArrayLike):
        return (u - self.u_mean) / self.u_std

    def unscale_u(self, u: ArrayLike):
        return self.u_mean + self.u_std * u

    def scale_x(self, x: ArrayLike):
        return (x - self.x_mean) / self.x_std

    def unscale_x(self, x: ArrayLike):
        return self.x_mean + self.x_std * x


def fit_scaler(dataset: Sequence[Trajectory], measured: Sequence[int], d_x: int) -> Scaler:
    if not dataset:
        raise PreconditionError("cannot fit a scaler on an empty dataset")
    Y = np.concatenate([tr.y for tr in dataset], axis=0)
    y_mean = Y.mean(axis=0)
    y_std = np.maximum(Y.std(axis=0), STD_FLOOR)

    if dataset[0].u is not None:
        U = np.concatenate([tr.u for tr in dataset], axis=0)
        u_mean, u_std = U.mean(axis=0), U.std(axis=0)
    else:
        u_mean, u_std = np.zeros(0), np.ones(0)

    x_mean = np.full(d_x, y_mean.mean())
    x_std = np.full(d_x, y_std.mean())
    for channel, coordinate in enumerate(measured):
        x_mean[coordinate] = y_mean[channel]
        x_std[coordinate] = y_std[channel]

    return Scaler(y_mean=y_mean, y_std=y_std, u_mean=u_mean, u_std=u_std, x_mean=x_mean, x_std=x_std)


class TrainingConfig(BaseModel):
    t_c: float
    lr: float = 0.005
    decay: bool = False
    decay_factor: float = 0.99
    epochs: int = 100
    batch_size: int = 10
    train_D: bool = True
    lam_res: Optional[float] = None
    patience: Optional[int] = None
    val_fraction: float = 0.1
    seed: int = 0
    threads: int = 1
    substeps: int = 1

    @validator("lr")
    def validate_lr(cls, lr: float):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        return lr

    @validator("t_c")
    def validate_window(cls, t_c: float):
        if t_c < 0:
            raise ValueError("t_c must be non-negative")
        return t_c

    @validator("decay_factor")
    def validate_decay(cls, factor: float):
        if not 0 < factor <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        return factor

    @validator("epochs")
    def validate_epochs(cls, epochs: int):
        if epochs < 0:
            raise ValueError("epoch count must be non-negative")
        return epochs

    @validator("batch_size", "threads", "substeps")
    def validate_positive(cls, v: int):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @validator("lam_res")
    def validate_penalty(cls, lam: Optional[float]):
        if lam is not None and lam < 0:
            raise ValueError("residual penalty weight must be non-negative")
        return lam

    @validator("val_fraction")
    def validate_fraction(cls, f: float):
        if not 0 <= f < 1:
            raise ValueError("validation fraction must lie in [0, 1)")
        return f


class MetricsReport(BaseModel):
    label: str = ""
    rmse: List[float] = []
    median: float = float("nan")
    iqr: float = float("nan")
    train_loss: List[float] = []
    val_loss: List[float] = []
    parameters: Dict[str, float] = {}
    epochs_run: int = 0

    @validator("rmse")
    def validate_rmse(cls, rmse: List[float]):
        if any(not r >= 0 for r in rmse):
            raise ValueError("RMSE values must be non-negative")
        return rmse

    @classmethod
    def from_rmse(cls, rmse: Sequence[float], **kwargs) -> "MetricsReport":
        rmse = [float(r) for r in rmse]
        if rmse:
            q1, med, q3 = np.percentile(rmse, [25, 50, 75])
            kwargs.update(median=float(med), iqr=float(q3 - q1))
        return cls(rmse=rmse, **kwargs)

    def table(self) -> str:
        rows = [
            ["label", "trajectories", "median RMSE", "IQR"],
            [self.label, len(self.rmse), f"{self.median:.4g}", f"{self.iqr:.4g}"],
        ]
        for name, value in self.parameters.items():
            rows.append([name, "", f"{value:.6g}", ""])
        return AsciiTable(rows).table


def reports_table(reports: Sequence[MetricsReport]) -> str:
    rows = [["label", "trajectories", "median RMSE", "IQR", "epochs"]]
    for r in reports:
        rows.append([r.label, len(r.rmse), f"{r.median:.4g}", f"{r.iqr:.4g}", r.epochs_run])
    return AsciiTable(rows).table


def output_loss(pred: ArrayLike, measured: ArrayLike, d_y: int, n: int, N: int) -> Node:
    """1/(2 d_y n N) times the summed squared output residuals"""
    pred = as_node(pred)
    measured = np.asarray(measured.value if isinstance(measured, Node) else measured, dtype=np.float64)
    if pred.shape != measured.shape:
        raise UsageError(f"prediction shape {pred.shape} does not match measurement shape {measured.shape}")
    if pred.value.size != d_y * n * N:
        raise UsageError(f"{pred.value.size} residuals for d_y={d_y}, n={n}, N={N}")
    r = pred - measured
    return (r * r).sum() / float(2 * d_y * n * N)


def output_rmse(pred: np.ndarray, measured: np.ndarray) -> np.ndarray:
    """RMSE over time and output channels, one value per trajectory; axis 1 is the batch"""
    pred, measured = np.asarray(pred), np.asarray(measured)
    if pred.shape != measured.shape:
        raise UsageError(f"prediction shape {pred.shape} does not match measurement shape {measured.shape}")
    return np.sqrt(np.mean((pred - measured) ** 2, axis=(0, 2)))


def window_steps(t_c: float, dt: float) -> int:
    steps = t_c / dt
    if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
        raise ConfigurationError(f"t_c={t_c} is not a multiple of dt={dt}")
    return int(round(steps))


class Batch(BaseModel):
    """Stacked trajectories, raw and scaled, with time on axis 0 and the batch on axis 1"""

    grid: TimeGrid
    Y: np.ndarray
    Y_scaled: np.ndarray
    U: Optional[np.ndarray]
    U_scaled: Optional[np.ndarray]

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def build(cls, trajectories: Sequence[Trajectory], scaler: Scaler) -> "Batch":
        grid, Y, U, _ = stack_trajectories(trajectories)
        return cls(
            grid=grid,
            Y=Y,
            Y_scaled=scaler.scale_y(Y),
            U=U,
            U_scaled=None if U is None else scaler.scale_u(U),
        )

    @property
    def size(self) -> int:
        return self.Y.shape[1]


def predict(model: ModelSpec, recog: RecognitionVariant, batch: Batch, substeps: int = 1) -> Node:
    """States over the whole horizon, rolled out from the recognised x(0); shape (n, B, d_x)"""
    scaler = model.scaler
    if scaler is None:
        raise PreconditionError("model has no fitted scaler")
    n_c = recog.n_c
    if batch.grid.n < n_c:
        raise PreconditionError(f"trajectories of {batch.grid.n} samples are shorter than the {n_c}-sample window")

    head = batch.grid.head(n_c)
    y_win = SampledSignal(grid=head, values=batch.Y_scaled[:n_c])
    u_win = SampledSignal(grid=head, values=batch.U_scaled[:n_c]) if recog.d_u else None
    x0 = scaler.unscale_x(estimate_x0(recog, y_win, u_win))

    u_sig = SampledSignal(grid=batch.grid, values=batch.U) if model.d_u else None
    return integrate(model.field, x0, batch.grid, u_sig, substeps=substeps)


def _batch_loss(
    model: ModelSpec, recog: RecognitionVariant, batch: Batch, N: int, substeps: int
) -> Tuple[Node, Node]:
    states = predict(model, recog, batch, substeps)
    y_pred = model.scaler.scale_y(states[..., model.measured])
    # weighted so chunk losses add up to the loss of the N-trajectory mini-batch
    weight = batch.size / N
    fit = output_loss(y_pred, batch.Y_scaled, len(model.measured), batch.grid.n, batch.size) * weight
    if model.kind == StructureKind.RESIDUAL_ON_PRIOR and model.lam_res > 0:
        return fit + residual_penalty(model, states, batch.U) * weight, fit
    return fit, fit


def _chunks(trajectories: Sequence[Trajectory], parts: int) -> List[List[Trajectory]]:
    parts = max(1, min(parts, len(trajectories)))
    return [[trajectories[i] for i in c] for c in np.array_split(np.arange(len(trajectories)), parts)]


def _loss_and_gradients(
    model: ModelSpec,
    recog: RecognitionVariant,
    trajectories: Sequence[Trajectory],
    params: Sequence,
    threads: int,
    substeps: int,
    pool: Optional[ThreadPoolExecutor],
) -> Tuple[float, Gradients]:
    N = len(trajectories)
    chunks = _chunks(trajectories, threads)

    def run(chunk: List[Trajectory]) -> Tuple[float, Gradients]:
        loss, _ = _batch_loss(model, recog, Batch.build(chunk, model.scaler), N, substeps)
        return float(loss.value), backward(loss)

    results = list(pool.map(run, chunks)) if pool is not None and len(chunks) > 1 else [run(c) for c in chunks]

    # chunk order is fixed, so the reduction is deterministic
    total = 0.0
    grads: Gradients = {}
    for loss, chunk_grads in results:
        total += loss
        for p in params:
            g = chunk_grads.get(p)
            if g is not None:
                grads[p] = g if p not in grads else grads[p] + g
    return total, grads


def dataset_loss(
    model: ModelSpec, recog: RecognitionVariant, trajectories: Sequence[Trajectory], substeps: int = 1
) -> float:
    with no_tape():
        loss, _ = _batch_loss(model, recog, Batch.build(trajectories, model.scaler), len(trajectories), substeps)
    return float(loss.value)


def _snapshot(model: ModelSpec, recog: RecognitionVariant) -> Tuple[StateDict, StateDict]:
    return model.state_dict(), recog.state_dict()


def _restore(model: ModelSpec, recog: RecognitionVariant, snapshot: Tuple[StateDict, StateDict]) -> None:
    model.load_state_dict(snapshot[0])
    recog.load_state_dict(snapshot[1])


def _check_compatible(model: ModelSpec, recog: RecognitionVariant, dataset: Sequence[Trajectory], t_c: float):
    if not dataset:
        raise PreconditionError("training needs at least one trajectory")
    if recog.d_x != model.d_x:
        raise ConfigurationError(f"recognition estimates {recog.d_x} states, the model has {model.d_x}")
    if recog.d_y != len(model.measured):
        raise ConfigurationError(f"recognition reads {recog.d_y} outputs, the model measures {len(model.measured)}")
    grid = dataset[0].grid
    steps = window_steps(t_c, grid.dt)
    if abs(recog.dt - grid.dt) > 1e-12 or steps + 1 != recog.n_c:
        raise ConfigurationError(f"recognition window of {recog.n_c} samples does not match t_c={t_c}")
    for j, tr in enumerate(dataset):
        if tr.t.shape[0] < steps + 1:
            raise PreconditionError(f"trajectory {j} lasts {tr.duration:.6g} s, shorter than t_c={t_c:.6g} s")


def validation_size(N: int, cfg: TrainingConfig) -> int:
    """Trajectories held out for early stopping; at least one whenever patience is set and N allows"""
    if cfg.patience is None:
        return 0
    if N < 2 or cfg.val_fraction == 0:
        logger.warning("early stopping off: cannot hold out any of %d trajectories at fraction %g", N, cfg.val_fraction)
        return 0
    return max(1, int(N * cfg.val_fraction))


def train(
    model: ModelSpec,
    recog: RecognitionVariant,
    dataset: Sequence[Trajectory],
    cfg: TrainingConfig,
) -> Tuple[ModelSpec, RecognitionVariant, MetricsReport]:
    _check_compatible(model, recog, dataset, cfg.t_c)
    if cfg.lam_res is not None:
        model.lam_res = cfg.lam_res
    if recog.gains is not None:
        recog.gains.trainable = cfg.train_D

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    n_val = validation_size(len(dataset), cfg)
    validation = [dataset[i] for i in order[:n_val]]
    training = [dataset[i] for i in order[n_val:]]

    model.attach_scaler(fit_scaler(training, model.measured, model.d_x))
    params = model.parameters() + recog.parameters()
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ConfigurationError("parameter names of the model and the recognition overlap")

    state = AdamState()
    lr = cfg.lr
    train_loss: List[float] = []
    val_loss: List[float] = []
    best: Optional[Tuple[float, Tuple[StateDict, StateDict]]] = None
    stale = 0
    epochs_run = 0

    logger.info(
        "training %s/%s on %d trajectories (%d validation), %d parameters",
        model.kind.value,
        recog.kind.value,
        len(training),
        len(validation),
        sum(p.value.size for p in params),
    )
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            batches = rng.permutation(len(training))
            epoch_losses = []
            for b, start in enumerate(range(0, len(training), cfg.batch_size)):
                members = [training[i] for i in batches[start : start + cfg.batch_size]]
                try:
                    loss, grads = _loss_and_gradients(model, recog, members, params, cfg.threads, cfg.substeps, pool)
                except IntegrationError as e:
                    raise TrainingError(str(e), epoch=epoch, batch=b) from e
                if not np.isfinite(loss):
                    raise TrainingError("non-finite loss", epoch=epoch, batch=b)
                try:
                    adam_update(state, params, grads, lr)
                except TrainingError as e:
                    raise TrainingError("non-finite gradient", epoch=epoch, batch=b, parameter=e.parameter) from e
                recog.project()
                epoch_losses.append(loss)

            epochs_run = epoch + 1
            train_loss.append(float(np.mean(epoch_losses)))
            if cfg.decay:
                lr *= cfg.decay_factor

            if validation:
                v = dataset_loss(model, recog, validation, cfg.substeps)
                val_loss.append(v)
                logger.debug("epoch %d: train %.6g, validation %.6g", epoch, train_loss[-1], v)
                if best is None or v < best[0]:
                    best = (v, _snapshot(model, recog))
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        logger.info("early stopping after epoch %d, best validation loss %.6g", epoch, best[0])
                        break
            else:
                logger.debug("epoch %d: train %.6g", epoch, train_loss[-1])
    finally:
        if pool is not None:
            pool.shutdown()

    if best is not None:
        _restore(model, recog, best[1])

    with no_tape():
        rmse = output_rmse(*_scaled_outputs(model, recog, Batch.build(training, model.scaler), cfg.substeps))
    report = MetricsReport.from_rmse(
        rmse,
        label=f"{model.kind.value}/{recog.kind.value} (train)",
        train_loss=train_loss,
        val_loss=val_loss,
        parameters=model.physical_parameters(),
        epochs_run=epochs_run,
    )
    if train_loss:
        logger.info("trained %d epochs, final loss %.6g", epochs_run, train_loss[-1])
    return model, recog, report


def _scaled_outputs(
    model: ModelSpec, recog: RecognitionVariant, batch: Batch, substeps: int
) -> Tuple[np.ndarray, np.ndarray]:
    states = predict(model, recog, batch, substeps).value
    return model.scaler.scale_y(states[..., model.measured]), batch.Y_scaled


def evaluate_rmse(
    model: ModelSpec,
    recog: RecognitionVariant,
    trajectories: Sequence[Trajectory],
    t_c: float,
    substeps: int = 1,
    label: str = "",
) -> MetricsReport:
    """Recognise x(0) from the first window, roll out the whole horizon, report output RMSE"""
    _check_compatible(model, recog, trajectories, t_c)
    if model.scaler is None:
        raise PreconditionError("model has no fitted scaler; train or load it first")
    with no_tape():
        pred, measured = _scaled_outputs(model, recog, Batch.build(trajectories, model.scaler), substeps)
    return MetricsReport.from_rmse(
        output_rmse(pred, measured),
        label=label or f"{model.kind.value}/{recog.kind.value}",
        parameters=model.physical_parameters(),
    )


def predict_outputs(
    model: ModelSpec,
    recog: RecognitionVariant,
    trajectories: Sequence[Trajectory],
    substeps: int = 1,
) -> np.ndarray:
    """Predicted outputs in measurement units, shape (n, N, d_y)"""
    if model.scaler is None:
        raise PreconditionError("model has no fitted scaler; train or load it first")
    with no_tape():
        states = predict(model, recog, Batch.build(trajectories, model.scaler), substeps).value
    return states[..., model.measured]
