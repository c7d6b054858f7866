"""Discrete-time extended Kalman filter around any vector field"""
from __future__ import annotations

import logging
from typing import Callable
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
from pydantic import BaseModel
from pydantic import validator
from scipy import linalg

from .diffcore import jacobian
from .diffcore import no_tape
from .diffcore import Node
from .errors import ConfigurationError
from .errors import FilterDivergenceError
from .errors import IntegrationError
from .errors import NumericalError
from .errors import UsageError
from .odesolve import rk4_step
from .priors import ModelSpec


logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-10
FD_STEP = 1e-6
R_FLOOR = 1e-8

VectorField = Callable[[float, Node, Optional[np.ndarray]], object]


def _square(name: str, M: np.ndarray) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got {M.shape}")
    if not np.allclose(M, M.T, atol=SYMMETRY_TOLERANCE):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) < -SYMMETRY_TOLERANCE:
        raise ValueError(f"{name} must be positive semidefinite")
    return M


class EKFState(BaseModel):
    mean: np.ndarray
    covariance: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @validator("mean", pre=True)
    def validate_mean(cls, mean):
        return np.asarray(mean, dtype=np.float64).reshape(-1)

    @validator("covariance", pre=True)
    def validate_covariance(cls, P, values):
        P = _square("covariance", P)
        mean = values.get("mean")
        if mean is not None and P.shape[0] != mean.size:
            raise ValueError(f"covariance of size {P.shape[0]} for a state of size {mean.size}")
        return P


class EKFConfig(BaseModel):
    Q: np.ndarray
    R: np.ndarray
    dt: float
    measured: List[int]

    class Config:
        arbitrary_types_allowed = True

    @validator("Q", "R", pre=True)
    def validate_noise(cls, M, field):
        return _square(field.name, M)

    @validator("R")
    def validate_invertible(cls, R: np.ndarray):
        if np.linalg.matrix_rank(R) < R.shape[0]:
            raise ValueError("measurement-noise covariance must be invertible")
        return R

    @validator("dt")
    def validate_step(cls, dt: float):
        if not dt > 0:
            raise ValueError("time step must be positive")
        return dt

    @validator("measured")
    def validate_selector(cls, measured: List[int], values):
        R = values.get("R")
        if R is not None and R.shape[0] != len(measured):
            raise ValueError(f"R is {R.shape[0]}x{R.shape[0]} for {len(measured)} measured coordinates")
        return measured

    @classmethod
    def default(cls, d_x: int, measured: List[int], sigma2: float, dt: float, q: float = 1e-4) -> "EKFConfig":
        r = max(sigma2, R_FLOOR)
        return cls(Q=q * np.eye(d_x), R=r * np.eye(len(measured)), dt=dt, measured=measured)

    @property
    def d_x(self) -> int:
        return self.Q.shape[0]

    @property
    def H(self) -> np.ndarray:
        return np.eye(self.d_x)[self.measured]


def _field_of(model: Union[ModelSpec, VectorField]) -> VectorField:
    return model.field if isinstance(model, ModelSpec) else model


def _finite_difference(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    base = np.asarray(fn(x), dtype=np.float64).reshape(-1)
    J = np.empty((base.size, x.size))
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = FD_STEP
        J[:, i] = (np.asarray(fn(x + step)).reshape(-1) - np.asarray(fn(x - step)).reshape(-1)) / (2 * FD_STEP)
    return J


def field_jacobian(field: VectorField, t: float, x: np.ndarray, u: Optional[np.ndarray]) -> np.ndarray:
    """A = df/dx at x, by autodiff, or central differences for fields off the tape"""
    try:
        return jacobian(lambda leaf: field(t, leaf, u), x)
    except UsageError:
        logger.debug("vector field is not on the tape; using finite differences")

        def values(v: np.ndarray) -> np.ndarray:
            out = field(t, Node(v), u)
            return out.value if isinstance(out, Node) else out

        with no_tape():
            return _finite_difference(values, x)


def ekf_predict(
    model: Union[ModelSpec, VectorField],
    state: EKFState,
    u: Optional[np.ndarray],
    cfg: EKFConfig,
    t: float = 0.0,
) -> EKFState:
    field = _field_of(model)
    x = state.mean
    if x.size != cfg.d_x:
        raise ConfigurationError(f"filter configured for {cfg.d_x} states, got {x.size}")

    try:
        A = field_jacobian(field, t, x, u)
        with no_tape():
            mean = rk4_step(lambda s, z: field(s, z, u), t, x, cfg.dt).value
    except IntegrationError as e:
        raise FilterDivergenceError(f"non-finite propagation at t={e.t:.6g}") from e

    Phi = np.eye(cfg.d_x) + A * cfg.dt
    P = Phi @ state.covariance @ Phi.T + cfg.Q * cfg.dt
    P = 0.5 * (P + P.T)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(P))):
        logger.warning("filter diverged at t=%.6g", t)
        raise FilterDivergenceError(f"non-finite prediction at t={t:.6g}")
    return EKFState(mean=mean, covariance=P)


def ekf_update(state: EKFState, y: np.ndarray, cfg: EKFConfig) -> EKFState:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != len(cfg.measured):
        raise ConfigurationError(f"measurement has {y.size} channels, selector measures {len(cfg.measured)}")

    H = cfg.H
    P = state.covariance
    S = H @ P @ H.T + cfg.R
    try:
        factor = linalg.cho_factor(S)
    except linalg.LinAlgError as e:
        raise NumericalError("singular innovation covariance") from e
    K = linalg.cho_solve(factor, H @ P).T

    mean = state.mean + K @ (y - H @ state.mean)
    I_KH = np.eye(cfg.d_x) - K @ H
    # Joseph form of (I - KH) P, symmetric by construction
    P = I_KH @ P @ I_KH.T + K @ cfg.R @ K.T
    P = 0.5 * (P + P.T)
    return EKFState(mean=mean, covariance=P)


def run_filter(
    model: Union[ModelSpec, VectorField],
    cfg: EKFConfig,
    x0: np.ndarray,
    P0: np.ndarray,
    Y: np.ndarray,
    U: Optional[np.ndarray] = None,
    t0: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Filter a whole output stream; returns the means (n, d_x) and covariances (n, d_x, d_x)"""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if U is not None and len(U) != len(Y):
        raise ConfigurationError("inputs and outputs have different lengths")

    state = ekf_update(EKFState(mean=x0, covariance=P0), Y[0], cfg)
    means, covariances = [state.mean], [state.covariance]
    for k in range(1, len(Y)):
        u = None if U is None else U[k - 1]
        state = ekf_predict(model, state, u, cfg, t=t0 + (k - 1) * cfg.dt)
        state = ekf_update(state, Y[k], cfg)
        means.append(state.mean)
        covariances.append(state.covariance)
    return np.stack(means), np.stack(covariances)
