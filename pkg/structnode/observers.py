"""KKL observer gains and the recognition models that estimate x(0)"""
from __future__ import annotations

import logging
from enum import Enum
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from pydantic import BaseModel
from scipy import linalg

from .diffcore import as_node
from .diffcore import concat
from .diffcore import Node
from .diffcore import Parameter
from .diffcore import reshape
from .errors import ConfigurationError
from .errors import SingularSystemError
from .nets import GRU
from .nets import MLP
from .nets import Module
from .odesolve import integrate
from .odesolve import integrate_backward
from .odesolve import SampledSignal


logger = logging.getLogger(__name__)

HURWITZ_MARGIN = 1e-3
RANK_TOLERANCE = 1e-8
IMAG_TOLERANCE = 1e-12


def butterworth_poles(order: int, omega_c: float) -> np.ndarray:
    """Poles of an analog Butterworth filter of cut-off frequency omega_c (Hz)"""
    if order < 1:
        raise ConfigurationError("Butterworth order must be at least 1")
    if omega_c <= 0:
        raise ConfigurationError("cut-off frequency must be positive")
    omega0 = 2.0 * np.pi * omega_c
    k = np.arange(1, order + 1)
    poles = omega0 * np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    # snap the real pole of odd orders
    poles.imag[np.abs(poles.imag) < IMAG_TOLERANCE * omega0] = 0.0
    return poles


Block = Tuple[str, float, float]


def _realify(poles: Sequence[complex]) -> List[Block]:
    poles = [complex(p) for p in poles]
    used = [False] * len(poles)
    blocks: List[Block] = []

    for i, p in enumerate(poles):
        if used[i]:
            continue
        used[i] = True
        if abs(p.imag) <= IMAG_TOLERANCE * max(1.0, abs(p)):
            blocks.append(("real", p.real, 0.0))
            continue
        mate = next(
            (
                j
                for j in range(i + 1, len(poles))
                if not used[j] and abs(poles[j] - p.conjugate()) <= 1e-9 * max(1.0, abs(p))
            ),
            None,
        )
        if mate is None:
            raise ConfigurationError(f"complex pole {p} has no conjugate")
        used[mate] = True
        blocks.append(("pair", p.real, abs(p.imag)))

    return blocks


def build_D(poles: Sequence[complex]) -> np.ndarray:
    """Block-diagonal real matrix whose eigenvalues are ``poles``"""
    blocks = _realify(poles)
    return KKLGains(blocks, np.ones((_dimension(blocks), 1)), trainable=False).D_value


def _dimension(blocks: Sequence[Block]) -> int:
    return sum(1 if kind == "real" else 2 for kind, _, _ in blocks)


class KKLGains(Module):
    """Block-diagonal D parametrised by real poles and (Re, Im) pairs, and a fixed F"""

    def __init__(self, blocks: Sequence[Block], F: np.ndarray, trainable: bool = True, name: str = "D"):
        self.blocks = list(blocks)
        self.d_z = _dimension(self.blocks)
        self.F = np.asarray(F, dtype=np.float64)
        if self.F.ndim != 2 or self.F.shape[0] != self.d_z:
            raise ConfigurationError(f"F must have {self.d_z} rows, got shape {self.F.shape}")
        self.trainable = trainable

        theta: List[float] = []
        self.re_index: List[int] = []
        basis = np.zeros((2 * len(self.blocks), self.d_z * self.d_z))
        start = 0
        for kind, re, im in self.blocks:
            self.re_index.append(len(theta))
            basis[len(theta), start * self.d_z + start] = 1.0
            theta.append(re)
            if kind == "pair":
                basis[len(theta) - 1, (start + 1) * self.d_z + start + 1] = 1.0
                basis[len(theta), start * self.d_z + start + 1] = 1.0
                basis[len(theta), (start + 1) * self.d_z + start] = -1.0
                theta.append(im)
                start += 2
            else:
                start += 1

        self.basis = basis[: len(theta)]
        self.theta = Parameter(np.array(theta), name=f"{name}.theta")

    @classmethod
    def butterworth(cls, d_z: int, d_in: int, omega_c: float = 1.0, trainable: bool = True) -> "KKLGains":
        return cls(_realify(butterworth_poles(d_z, omega_c)), np.ones((d_z, d_in)), trainable=trainable)

    @classmethod
    def diagonal(cls, d_z: int, d_in: int, trainable: bool = True) -> "KKLGains":
        blocks = [("real", -float(i), 0.0) for i in range(1, d_z + 1)]
        return cls(blocks, np.ones((d_z, d_in)), trainable=trainable)

    @classmethod
    def from_matrix(cls, D: np.ndarray, F: np.ndarray, trainable: bool = False) -> "KKLGains":
        D = np.atleast_2d(np.asarray(D, dtype=np.float64))
        F = np.asarray(F, dtype=np.float64)
        if F.ndim == 1:
            F = F[:, None]
        d_z = D.shape[0]
        blocks: List[Block] = []
        i = 0
        while i < d_z:
            if i + 1 < d_z and (D[i, i + 1] != 0 or D[i + 1, i] != 0):
                re, im = D[i, i], D[i, i + 1]
                if D[i + 1, i + 1] != re or D[i + 1, i] != -im:
                    raise ConfigurationError(f"block at {i} is not of the form [[a, b], [-b, a]]")
                blocks.append(("pair", re, im))
                i += 2
            else:
                blocks.append(("real", D[i, i], 0.0))
                i += 1
        gains = cls(blocks, F, trainable=trainable)
        if not np.allclose(gains.D_value, D):
            raise ConfigurationError("D is not block diagonal")
        return gains

    @property
    def D(self) -> Node:
        return reshape(self.theta @ self.basis, (self.d_z, self.d_z))

    @property
    def D_value(self) -> np.ndarray:
        return (self.theta.value @ self.basis).reshape(self.d_z, self.d_z)

    @property
    def real_parts(self) -> np.ndarray:
        return self.theta.value[self.re_index]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.D_value)

    @property
    def lambda_min(self) -> float:
        return float(np.min(np.abs(self.real_parts)))

    def parameters(self) -> List[Parameter]:
        return [self.theta] if self.trainable else []

    def project(self, margin: float = HURWITZ_MARGIN) -> None:
        """Clamp every real part to at most -margin"""
        theta = self.theta.value.copy()
        clamped = np.minimum(theta[self.re_index], -margin)
        if np.any(clamped != theta[self.re_index]):
            logger.info("Hurwitz projection on %s", self.theta.name)
        theta[self.re_index] = clamped
        self.theta.assign(theta)


class GainCheck(BaseModel):
    hurwitz: bool
    controllable: bool


def numerical_rank(M: np.ndarray, tolerance: float = RANK_TOLERANCE) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tolerance * s[0]))


def uncontrollable_modes(D: np.ndarray, F: np.ndarray) -> List[complex]:
    """Eigenvalues lambda of D at which [lambda I - D, F] loses rank

    Same answer as the rank of [F, DF, ..., D^(d_z-1) F], without the powers of D.
    """
    d_z = D.shape[0]
    modes = []
    for lam in np.linalg.eigvals(D):
        pencil = np.hstack([lam * np.eye(d_z) - D, F.astype(complex)])
        if numerical_rank(pencil) < d_z:
            modes.append(complex(lam))
    return modes


def check_gains(gains: KKLGains) -> GainCheck:
    hurwitz = bool(np.all(gains.real_parts < 0))
    return GainCheck(hurwitz=hurwitz, controllable=not uncontrollable_modes(gains.D_value, gains.F))


def _observer_field(gains: KKLGains):
    D = gains.D
    FT = gains.F.T

    def field(t: float, z: Node, drive: Optional[np.ndarray]) -> Node:
        return z @ D.T + drive @ FT

    return field


def _window_length(signal: SampledSignal, t_c: float) -> int:
    n_c = int(round(t_c / signal.grid.dt)) + 1
    if n_c > signal.grid.n:
        raise ConfigurationError(
            f"driver covers {signal.grid.t_end - signal.grid.t0:.6g} s, shorter than t_c={t_c:.6g} s"
        )
    return n_c


def simulate_observer_backward(gains: KKLGains, driver: SampledSignal, t_c: float) -> Node:
    """z(0) of dz/dt = Dz + F driver run from z(t_c) = 0 backward to 0"""
    if driver.values.shape[-1] != gains.F.shape[1]:
        raise ConfigurationError(f"driver has {driver.values.shape[-1]} channels, F expects {gains.F.shape[1]}")
    window = driver.head(_window_length(driver, t_c))
    z_end = np.zeros(window.values.shape[1:-1] + (gains.d_z,))
    states = integrate_backward(_observer_field(gains), z_end, window.grid, window)
    return states[0]


def simulate_observer(gains: KKLGains, driver: SampledSignal, z0: Optional[np.ndarray] = None) -> Node:
    """Forward-time observer over the whole driver grid"""
    if z0 is None:
        z0 = np.zeros(driver.values.shape[1:-1] + (gains.d_z,))
    return integrate(_observer_field(gains), z0, driver.grid, driver)


class RecognitionKind(str, Enum):
    DIRECT = "direct"
    RNN_PLUS = "rnn_plus"
    KKL = "kkl"
    KKLU = "kklu"


def kkl_dimension(d_x: int, d_y: int) -> int:
    return d_y * (d_x + 1)


def kklu_dimension(d_x: int, d_y: int, d_u: int, d_omega: int) -> int:
    return (d_y + d_u) * (d_x + d_omega + 1)


class RecognitionVariant(Module):
    """psi maps the summary of the window [0, t_c] to x(0)"""

    def __init__(
        self,
        kind: RecognitionKind,
        t_c: float,
        dt: float,
        d_x: int,
        d_y: int,
        d_u: int,
        psi: MLP,
        gains: Optional[KKLGains] = None,
        gru: Optional[GRU] = None,
        d_omega: int = 0,
    ):
        self.kind = RecognitionKind(kind)
        self.t_c = t_c
        self.dt = dt
        self.n_c = int(round(t_c / dt)) + 1
        self.d_x, self.d_y, self.d_u = d_x, d_y, d_u
        self.psi = psi
        self.gains = gains
        self.gru = gru
        self.d_omega = d_omega

        if self.kind in (RecognitionKind.KKL, RecognitionKind.KKLU) and gains is None:
            raise ConfigurationError(f"{self.kind.value} recognition needs KKL gains")
        if self.kind == RecognitionKind.RNN_PLUS and gru is None:
            raise ConfigurationError("rnn_plus recognition needs a GRU")
        if psi.sizes[0] != self.input_width:
            raise ConfigurationError(
                f"psi expects {psi.sizes[0]} inputs, {self.kind.value} assembles {self.input_width}"
            )
        if psi.sizes[-1] != d_x:
            raise ConfigurationError(f"psi outputs {psi.sizes[-1]} values for d_x={d_x}")

    @classmethod
    def create(
        cls,
        kind: RecognitionKind,
        d_x: int,
        d_y: int,
        d_u: int,
        t_c: float,
        dt: float,
        rng: np.random.Generator,
        d_z: Optional[int] = None,
        d_omega: int = 3,
        omega_c: float = 1.0,
        gain_init: str = "butterworth",
        hidden: Sequence[int] = (50, 50),
        train_D: bool = True,
    ) -> "RecognitionVariant":
        kind = RecognitionKind(kind)
        n_c = int(round(t_c / dt)) + 1
        gains, gru = None, None

        if kind == RecognitionKind.KKL:
            d_z = d_z or kkl_dimension(d_x, d_y)
            gains = _make_gains(gain_init, d_z, d_y, omega_c, train_D)
            width = d_z + n_c * d_u
        elif kind == RecognitionKind.KKLU:
            # without inputs the functional observer is driven by y alone
            d_z = d_z or kklu_dimension(d_x, d_y, d_u, d_omega)
            gains = _make_gains(gain_init, d_z, d_y + d_u, omega_c, train_D)
            width = d_z
        elif kind == RecognitionKind.RNN_PLUS:
            if d_z is None:
                d_z = kklu_dimension(d_x, d_y, d_u, d_omega) if d_u else kkl_dimension(d_x, d_y)
            gru = GRU(d_y + d_u, d_z, name="gru", rng=rng)
            width = d_z
        else:
            width = n_c * (d_y + d_u)

        psi = MLP.create([width, *hidden, d_x], name="psi", rng=rng)
        return cls(kind, t_c, dt, d_x, d_y, d_u, psi, gains=gains, gru=gru, d_omega=d_omega)

    @property
    def d_z(self) -> Optional[int]:
        if self.gains is not None:
            return self.gains.d_z
        if self.gru is not None:
            return self.gru.d_z
        return None

    @property
    def input_width(self) -> int:
        if self.kind == RecognitionKind.DIRECT:
            return self.n_c * (self.d_y + self.d_u)
        if self.kind == RecognitionKind.KKL:
            return self.gains.d_z + self.n_c * self.d_u
        return self.d_z

    def parameters(self) -> List[Parameter]:
        params = list(self.psi.parameters())
        if self.gains is not None:
            params += self.gains.parameters()
        if self.gru is not None:
            params += self.gru.parameters()
        return params

    def project(self) -> None:
        if self.gains is not None and self.gains.trainable:
            self.gains.project()


def _make_gains(init: str, d_z: int, d_in: int, omega_c: float, trainable: bool) -> KKLGains:
    if init == "butterworth":
        return KKLGains.butterworth(d_z, d_in, omega_c=omega_c, trainable=trainable)
    if init == "diagonal":
        return KKLGains.diagonal(d_z, d_in, trainable=trainable)
    raise ConfigurationError(f"unknown gain initialisation {init}")


def _flatten_window(values: np.ndarray) -> np.ndarray:
    # (n_c, [batch,] channels) -> ([batch,] n_c * channels), time major
    moved = np.moveaxis(values, 0, -2)
    return moved.reshape(moved.shape[:-2] + (-1,))


def assemble_recognition_input(
    variant: RecognitionVariant,
    y_win: SampledSignal,
    u_win: Optional[SampledSignal] = None,
) -> Node:
    if variant.d_u and u_win is None:
        raise ConfigurationError(f"{variant.kind.value} recognition expects an input window")
    if y_win.values.shape[-1] != variant.d_y:
        raise ConfigurationError(f"expected {variant.d_y} output channels, got {y_win.values.shape[-1]}")

    n_c = variant.n_c
    if y_win.grid.n < n_c or (variant.d_u and u_win.grid.n < n_c):
        raise ConfigurationError(f"recognition window needs {n_c} samples")
    y = y_win.values[:n_c]
    u = u_win.values[:n_c] if variant.d_u else None

    if variant.kind == RecognitionKind.DIRECT:
        parts = [y] if u is None else [y, u]
        return as_node(np.concatenate([_flatten_window(p) for p in parts], axis=-1))

    if variant.kind == RecognitionKind.RNN_PLUS:
        stacked = y if u is None else np.concatenate([y, u], axis=-1)
        return variant.gru.run(stacked[::-1])

    if variant.kind == RecognitionKind.KKL:
        z = simulate_observer_backward(variant.gains, y_win.head(n_c), variant.t_c)
        if u is None:
            return z
        return concat([z, _flatten_window(u)], axis=-1)

    grid = y_win.grid.head(n_c)
    driver = SampledSignal(grid=grid, values=y if u is None else np.concatenate([y, u], axis=-1))
    return simulate_observer_backward(variant.gains, driver, variant.t_c)


def estimate_x0(
    variant: RecognitionVariant,
    y_win: SampledSignal,
    u_win: Optional[SampledSignal] = None,
) -> Node:
    return variant.psi(assemble_recognition_input(variant, y_win, u_win))


class SylvesterSolution(BaseModel):
    T: np.ndarray
    T_star: Optional[np.ndarray]
    A: np.ndarray
    C: np.ndarray
    residual: float

    class Config:
        arbitrary_types_allowed = True

    @property
    def injective(self) -> bool:
        return self.T_star is not None


def solve_sylvester(A: np.ndarray, C: np.ndarray, gains: KKLGains) -> SylvesterSolution:
    """T solving T A - D T = F C for a linear plant (A, C)"""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    D, F = gains.D_value, gains.F
    d_x = A.shape[0]
    if C.shape != (F.shape[1], d_x):
        raise ConfigurationError(f"C must have shape {(F.shape[1], d_x)}, got {C.shape}")

    gap = np.min(np.abs(np.linalg.eigvals(A)[:, None] - np.linalg.eigvals(D)[None, :]))
    if gap < 1e-9:
        raise SingularSystemError("A and D share an eigenvalue")

    try:
        T = linalg.solve_sylvester(-D, A, F @ C)
    except linalg.LinAlgError as e:
        raise SingularSystemError(str(e)) from e

    residual = float(np.linalg.norm(T @ A - D @ T - F @ C))
    T_star = None
    if numerical_rank(T) == d_x:
        T_star = np.linalg.solve(T.T @ T, T.T)
    return SylvesterSolution(T=T, T_star=T_star, A=A, C=C, residual=residual)
