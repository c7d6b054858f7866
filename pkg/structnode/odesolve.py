"""Fixed-step Runge-Kutta integration, forward and reversed in time"""
from __future__ import annotations

from typing import Callable
from typing import Optional
from typing import Union

import numpy as np
from pydantic import BaseModel
from pydantic import validator

from .diffcore import ArrayLike
from .diffcore import as_node
from .diffcore import Node
from .diffcore import stack
from .errors import ConfigurationError
from .errors import IntegrationError
from .errors import OutOfDomainError


Field = Callable[[float, Node, Optional[np.ndarray]], ArrayLike]
Exogenous = Union["SampledSignal", Callable[[float], np.ndarray], None]

SLACK = 1e-9


class TimeGrid(BaseModel):
    t0: float = 0.0
    dt: float
    n: int

    @validator("dt")
    def validate_step(cls, dt: float):
        if not dt > 0:
            raise ValueError("time step must be positive")
        return dt

    @validator("n")
    def validate_count(cls, n: int):
        if n < 2:
            raise ValueError("a time grid needs at least two samples")
        return n

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def t_end(self) -> float:
        return self.t0 + (self.n - 1) * self.dt

    def head(self, n: int) -> "TimeGrid":
        return TimeGrid(t0=self.t0, dt=self.dt, n=n)

    def refine(self, substeps: int) -> "TimeGrid":
        return TimeGrid(t0=self.t0, dt=self.dt / substeps, n=(self.n - 1) * substeps + 1)


class SampledSignal(BaseModel):
    """Samples on a grid; axis 0 is time, trailing axes are (batch, channel)"""

    grid: TimeGrid
    values: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @validator("values", pre=True)
    def validate_values(cls, v, values):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        grid = values.get("grid")
        if grid is not None and v.shape[0] != grid.n:
            raise ValueError(f"signal has {v.shape[0]} rows for a grid of {grid.n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("signal values must be finite")
        return v

    def head(self, n: int) -> "SampledSignal":
        return SampledSignal(grid=self.grid.head(n), values=self.values[:n])

    def __call__(self, t: float) -> np.ndarray:
        return interpolate(self, t)


def interpolate(sig: SampledSignal, t: float) -> np.ndarray:
    grid = sig.grid
    if t < grid.t0 - SLACK or t > grid.t_end + SLACK:
        raise OutOfDomainError(f"t={t} outside [{grid.t0}, {grid.t_end}]")

    position = (t - grid.t0) / grid.dt
    i = int(np.clip(np.floor(position), 0, grid.n - 2))
    frac = float(np.clip(position - i, 0.0, 1.0))
    if frac == 0.0:
        return sig.values[i]
    if frac == 1.0:
        return sig.values[i + 1]
    return (1.0 - frac) * sig.values[i] + frac * sig.values[i + 1]


def _exogenous_at(u: Exogenous, t: float) -> Optional[np.ndarray]:
    if u is None:
        return None
    if isinstance(u, SampledSignal):
        return interpolate(u, t)
    return np.asarray(u(t), dtype=np.float64)


def _checked(k: ArrayLike, t: float) -> Node:
    k = as_node(k)
    if not np.all(np.isfinite(k.value)):
        raise IntegrationError("non-finite vector field", t)
    return k


def rk4_step(field: Callable[[float, Node], ArrayLike], t: float, x: ArrayLike, dt: float) -> Node:
    if dt == 0:
        raise ConfigurationError("RK4 step of zero length")
    x = as_node(x)
    half = 0.5 * dt
    k1 = _checked(field(t, x), t)
    k2 = _checked(field(t + half, x + half * k1), t + half)
    k3 = _checked(field(t + half, x + half * k2), t + half)
    k4 = _checked(field(t + dt, x + dt * k3), t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    field: Field,
    x0: ArrayLike,
    grid: TimeGrid,
    u: Exogenous = None,
    substeps: int = 1,
) -> Node:
    """Rows of the result are the states at the grid times; row 0 is x0"""
    x = as_node(x0)
    if not np.all(np.isfinite(x.value)):
        raise ConfigurationError("initial state must be finite")

    def with_input(t: float, state: Node) -> ArrayLike:
        return field(t, state, _exogenous_at(u, t))

    h = grid.dt / substeps
    states = [x]
    for i in range(grid.n - 1):
        t = grid.t0 + i * grid.dt
        for k in range(substeps):
            x = rk4_step(with_input, t + k * h, x, h)
        states.append(x)
    return stack(states, axis=0)


def integrate_backward(
    field: Field,
    x_end: ArrayLike,
    grid: TimeGrid,
    driver: Exogenous = None,
    substeps: int = 1,
) -> Node:
    """Integrate dz/ds = field(t_end - s, z) in the reversed time s

    The driver is read at t_end - s. Rows of the result are aligned with the
    original grid (row i at t_i), the last row being ``x_end``.
    """
    z = as_node(x_end)
    if not np.all(np.isfinite(z.value)):
        raise ConfigurationError("terminal state must be finite")
    t_end = grid.t_end

    def reversed_field(s: float, state: Node) -> ArrayLike:
        t = t_end - s
        return field(t, state, _exogenous_at(driver, t))

    h = grid.dt / substeps
    states = [z]
    for i in range(grid.n - 1):
        s = i * grid.dt
        for k in range(substeps):
            z = rk4_step(reversed_field, s + k * h, z, h)
        states.append(z)
    return stack(states[::-1], axis=0)
