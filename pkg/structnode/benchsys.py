"""Ground-truth benchmark systems and synthetic datasets"""
from __future__ import annotations

import logging
from enum import Enum
from typing import Callable
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from pydantic import BaseModel
from pydantic import validator

from .diffcore import ArrayLike
from .diffcore import as_node
from .diffcore import no_tape
from .diffcore import Node
from .diffcore import stack
from .errors import ConfigurationError
from .odesolve import integrate
from .odesolve import SampledSignal
from .odesolve import TimeGrid


logger = logging.getLogger(__name__)

Scalar = Union[float, Node]
X0Sampler = Callable[[np.random.Generator], np.ndarray]


class SystemKind(str, Enum):
    HARMONIC_OSCILLATOR = "harmonic_oscillator"
    VAN_DER_POL = "van_der_pol"
    FITZHUGH_NAGUMO = "fitzhugh_nagumo"
    EARTHQUAKE = "earthquake"


TRUE_PARAMETERS: Dict[SystemKind, Dict[str, float]] = {
    SystemKind.HARMONIC_OSCILLATOR: {"omega2": 1.0},
    SystemKind.VAN_DER_POL: {"mu": 1.0},
    SystemKind.FITZHUGH_NAGUMO: {"eps_fhn": 0.1, "gamma": 1.5, "beta": 0.8},
    SystemKind.EARTHQUAKE: {"k_m": 10.0},
}

DEFAULT_SIGMA2: Dict[SystemKind, float] = {
    SystemKind.HARMONIC_OSCILLATOR: 1e-4,
    SystemKind.VAN_DER_POL: 1e-3,
    SystemKind.FITZHUGH_NAGUMO: 5e-4,
    SystemKind.EARTHQUAKE: 1e-4,
}


def _input_channel(u: Optional[ArrayLike]) -> ArrayLike:
    if u is None:
        return 0.0
    if isinstance(u, Node):
        return u[..., 0]
    u = np.asarray(u, dtype=np.float64)
    return u[..., 0] if u.shape and u.shape[-1] > 0 else 0.0


def physical_field(
    kind: SystemKind,
    params: Mapping[str, Scalar],
    x: ArrayLike,
    u: Optional[ArrayLike] = None,
) -> Node:
    """Published dynamics, written with tape operations so parameters can be trained"""
    x = as_node(x)

    def c(i: int) -> Node:
        return x[..., i]

    u0 = _input_channel(u)

    if kind == SystemKind.HARMONIC_OSCILLATOR:
        return stack([c(1), -params["omega2"] * c(0)], axis=-1)

    if kind == SystemKind.VAN_DER_POL:
        x1, x2 = c(0), c(1)
        return stack([x2, params["mu"] * (1.0 - x1**2) * x2 - x1 + u0], axis=-1)

    if kind == SystemKind.FITZHUGH_NAGUMO:
        v, w = c(0), c(1)
        return stack(
            [
                (v - v**3 - w) / params["eps_fhn"] + u0,
                params["gamma"] * v - w + params["beta"],
            ],
            axis=-1,
        )

    if kind == SystemKind.EARTHQUAKE:
        k_m = params["k_m"]
        x1, x2, x3, x4 = c(0), c(1), c(2), c(3)
        return stack([x2, k_m * (x3 - 2.0 * x1) + u0, x4, k_m * (x1 - x3) + u0], axis=-1)

    raise ConfigurationError(f"unknown system {kind}")


class InputKind(str, Enum):
    NONE = "none"
    CONSTANT = "constant"
    SINUSOID = "sinusoid"
    GROUND_ACCELERATION = "ground_acceleration"


class InputSpec(BaseModel):
    """One concrete exogenous signal"""

    kind: InputKind = InputKind.NONE
    value: float = 0.0
    amplitude: float = 0.0
    omega: float = 0.0
    F0: float = 0.0

    @property
    def d_u(self) -> int:
        return 0 if self.kind == InputKind.NONE else 1

    @property
    def d_omega(self) -> int:
        return 3 if self.kind == InputKind.SINUSOID else 0

    def value_at(self, t: Union[float, np.ndarray]) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.kind == InputKind.NONE:
            return np.zeros(t.shape + (0,))
        if self.kind == InputKind.CONSTANT:
            v = np.full(t.shape, self.value)
        elif self.kind == InputKind.SINUSOID:
            v = self.amplitude * np.sin(self.omega * t)
        else:
            v = -self.F0 * self.omega**2 * np.cos(self.omega * t)
        return v[..., None]

    def generator_state(self) -> np.ndarray:
        """Initial state of the sinusoid generator, u = w1"""
        if self.kind != InputKind.SINUSOID:
            raise ConfigurationError(f"{self.kind.value} input has no sinusoid generator")
        return np.array([0.0, self.amplitude * self.omega, self.omega**2])

    def summary(self) -> Dict[str, float]:
        fields = {
            InputKind.NONE: (),
            InputKind.CONSTANT: ("value",),
            InputKind.SINUSOID: ("amplitude", "omega"),
            InputKind.GROUND_ACCELERATION: ("F0", "omega"),
        }[self.kind]
        return {name: getattr(self, name) for name in fields}


def sinusoid_generator_field(t: float, w: ArrayLike, u: Optional[np.ndarray] = None) -> Node:
    w = as_node(w)
    return stack([w[..., 1], -w[..., 2] * w[..., 0], 0.0 * w[..., 2]], axis=-1)


def input_signal(spec: InputSpec, grid: TimeGrid) -> SampledSignal:
    return SampledSignal(grid=grid, values=spec.value_at(grid.times))


Range = Tuple[float, float]


class InputRanges(BaseModel):
    """Distribution of per-trajectory input parameters"""

    kind: InputKind = InputKind.NONE
    value: Range = (0.0, 0.0)
    amplitude: Range = (0.0, 0.0)
    omega: Range = (0.0, 0.0)
    F0: Range = (0.0, 0.0)

    @validator("value", "amplitude", "omega", "F0")
    def validate_range(cls, r: Range):
        if r[0] > r[1]:
            raise ValueError(f"empty range {r}")
        return r

    def draw(self, rng: np.random.Generator) -> InputSpec:
        def pick(r: Range) -> float:
            return float(rng.uniform(*r)) if r[1] > r[0] else float(r[0])

        if self.kind == InputKind.NONE:
            return InputSpec()
        if self.kind == InputKind.CONSTANT:
            return InputSpec(kind=self.kind, value=pick(self.value))
        if self.kind == InputKind.SINUSOID:
            return InputSpec(kind=self.kind, amplitude=pick(self.amplitude), omega=pick(self.omega))
        return InputSpec(kind=self.kind, F0=pick(self.F0), omega=pick(self.omega))


class NoiseSpec(BaseModel):
    sigma2: float = 0.0
    seed: int = 0

    @validator("sigma2")
    def validate_variance(cls, sigma2: float):
        if sigma2 < 0:
            raise ValueError("noise variance must be non-negative")
        return sigma2


class BenchmarkSystem(BaseModel):
    kind: SystemKind
    params: Dict[str, float]
    d_x: int
    d_y: int
    d_u: int
    measured: List[int]
    inputs: InputRanges = InputRanges()
    # the earthquake forcing is a disturbance the recognition model never sees
    input_observed: bool = True

    @validator("measured")
    def validate_measured(cls, measured: List[int], values):
        d_x = values.get("d_x")
        if d_x is not None and any(i < 0 or i >= d_x for i in measured):
            raise ValueError(f"measured coordinates {measured} outside state of size {d_x}")
        return measured

    @classmethod
    def preset(cls, kind: SystemKind, **params: float) -> "BenchmarkSystem":
        kind = SystemKind(kind)
        merged = {**TRUE_PARAMETERS[kind], **params}
        if kind == SystemKind.HARMONIC_OSCILLATOR:
            return cls(kind=kind, params=merged, d_x=2, d_y=1, d_u=0, measured=[0])
        if kind == SystemKind.VAN_DER_POL:
            inputs = InputRanges(kind=InputKind.SINUSOID, amplitude=(1.2, 1.2), omega=(0.5, 1.5))
            return cls(kind=kind, params=merged, d_x=2, d_y=1, d_u=1, measured=[0], inputs=inputs)
        if kind == SystemKind.FITZHUGH_NAGUMO:
            inputs = InputRanges(kind=InputKind.CONSTANT, value=(0.0, 1.0))
            return cls(kind=kind, params=merged, d_x=2, d_y=1, d_u=1, measured=[0], inputs=inputs)
        inputs = InputRanges(kind=InputKind.GROUND_ACCELERATION, F0=(0.5, 1.5), omega=(1.0, 3.0))
        return cls(
            kind=kind,
            params=merged,
            d_x=4,
            d_y=1,
            d_u=1,
            measured=[0],
            inputs=inputs,
            input_observed=False,
        )

    @property
    def C(self) -> np.ndarray:
        """Output selector as a matrix"""
        return np.eye(self.d_x)[self.measured]

    def output(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.measured]


def true_field(sys: BenchmarkSystem, t: float, x: ArrayLike, u: Optional[ArrayLike] = None) -> Node:
    if as_node(x).shape[-1] != sys.d_x:
        raise ConfigurationError(f"{sys.kind.value} state has {sys.d_x} coordinates")
    if u is not None and np.shape(u)[-1] not in (0, sys.d_u):
        raise ConfigurationError(f"{sys.kind.value} takes {sys.d_u} input channels")
    return physical_field(sys.kind, sys.params, x, u)


class Trajectory(BaseModel):
    t: np.ndarray
    y: np.ndarray
    u: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    inputs: Dict[str, float] = {}

    class Config:
        arbitrary_types_allowed = True

    @validator("y", "u", "x")
    def validate_rows(cls, v: Optional[np.ndarray], values):
        if v is None:
            return v
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        t = values.get("t")
        if t is not None and v.shape[0] != len(t):
            raise ValueError(f"{v.shape[0]} rows for {len(t)} time stamps")
        return v

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(t0=float(self.t[0]), dt=float(self.t[1] - self.t[0]), n=self.n)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])


def x0_uniform(d_x: int, low: float = -1.0, high: float = 1.0) -> X0Sampler:
    def sample(rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(low, high, size=d_x)

    return sample


def generate_dataset(
    sys: BenchmarkSystem,
    inputs: InputRanges,
    noise: NoiseSpec,
    N: int,
    grid: TimeGrid,
    x0_sampler: Optional[X0Sampler] = None,
    substeps: int = 10,
) -> List[Trajectory]:
    if N < 1:
        raise ConfigurationError("a dataset needs at least one trajectory")
    sampler = x0_sampler or x0_uniform(sys.d_x)

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(noise.seed).spawn(N)]
    specs = [inputs.draw(rng) for rng in rngs]
    x0 = np.stack([sampler(rng) for rng in rngs])
    if not np.all(np.isfinite(x0)):
        raise ConfigurationError("initial-state sampler returned non-finite values")

    def exogenous(t: float) -> Optional[np.ndarray]:
        if sys.d_u == 0:
            return None
        return np.stack([spec.value_at(t) for spec in specs])

    def field(t: float, x: Node, u: Optional[np.ndarray]) -> Node:
        return true_field(sys, t, x, u)

    with no_tape():
        states = integrate(field, x0, grid, exogenous, substeps=substeps).value

    logger.info("generated %d %s trajectories of %d samples", N, sys.kind.value, grid.n)
    std = np.sqrt(noise.sigma2)
    times = grid.times
    trajectories = []
    for j, (rng, spec) in enumerate(zip(rngs, specs)):
        x = states[:, j, :]
        y = sys.output(x)
        if std > 0:
            y = y + rng.normal(0.0, std, size=y.shape)
        u = spec.value_at(times) if sys.d_u else None
        trajectories.append(Trajectory(t=times.copy(), y=y, u=u, x=x, inputs=spec.summary()))
    return trajectories


def stack_trajectories(
    trajectories: Sequence[Trajectory],
) -> Tuple[TimeGrid, np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """(grid, Y, U, X) with a batch axis after time"""
    if not trajectories:
        raise ConfigurationError("no trajectories to stack")
    grid = trajectories[0].grid
    if any(tr.n != grid.n for tr in trajectories):
        raise ConfigurationError("trajectories of different lengths cannot share a batch")
    Y = np.stack([tr.y for tr in trajectories], axis=1)
    U = np.stack([tr.u for tr in trajectories], axis=1) if trajectories[0].u is not None else None
    has_x = all(tr.x is not None for tr in trajectories)
    X = np.stack([tr.x for tr in trajectories], axis=1) if has_x else None
    return grid, Y, U, X
