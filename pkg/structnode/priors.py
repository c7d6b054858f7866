"""Structural priors for the vector field, from a free NODE to known physics"""
from __future__ import annotations

from enum import Enum
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from .benchsys import BenchmarkSystem
from .benchsys import physical_field
from .benchsys import SystemKind
from .benchsys import TRUE_PARAMETERS
from .diffcore import ArrayLike
from .diffcore import as_node
from .diffcore import concat
from .diffcore import grad
from .diffcore import is_taping
from .diffcore import Node
from .diffcore import Parameter
from .diffcore import stack
from .diffcore import tape
from .diffcore import transpose
from .errors import ConfigurationError
from .errors import UsageError
from .nets import MLP
from .nets import Module


class StructureKind(str, Enum):
    FREE = "free"
    HAMILTONIAN_GENERAL = "hamiltonian_general"
    HAMILTONIAN_SECOND_ORDER = "hamiltonian_second_order"
    SECOND_ORDER_PAIRS = "second_order_pairs"
    PARAMETRIC = "parametric"
    EXTENDED_STATE = "extended_state"
    RESIDUAL_ON_PRIOR = "residual_on_prior"


HAMILTONIAN_KINDS = (StructureKind.HAMILTONIAN_GENERAL, StructureKind.HAMILTONIAN_SECOND_ORDER)

DEFAULT_PAIRS: Dict[SystemKind, List[Tuple[int, int]]] = {
    SystemKind.HARMONIC_OSCILLATOR: [(0, 1)],
    SystemKind.VAN_DER_POL: [(0, 1)],
    SystemKind.EARTHQUAKE: [(0, 1), (2, 3)],
}


def draw_initial_parameters(kind: SystemKind, rng: np.random.Generator) -> Dict[str, float]:
    if kind == SystemKind.HARMONIC_OSCILLATOR:
        return {"omega2": float(rng.uniform(0.5, 2.0)) ** 2}
    if kind == SystemKind.VAN_DER_POL:
        return {"mu": float(rng.uniform(0.5, 1.5))}
    if kind == SystemKind.FITZHUGH_NAGUMO:
        return {
            "eps_fhn": float(rng.uniform(0.05, 0.15)),
            "gamma": float(rng.uniform(0.75, 2.25)),
            "beta": float(rng.uniform(0.4, 1.2)),
        }
    return {"k_m": float(rng.uniform(8.0, 12.0))}


class ModelSpec(Module):
    def __init__(
        self,
        kind: StructureKind,
        system: BenchmarkSystem,
        nets: Optional[Dict[str, MLP]] = None,
        params: Optional[Dict[str, Parameter]] = None,
        prior: Optional[Tuple[np.ndarray, np.ndarray]] = None,
        lam_res: float = 0.0,
        pair_map: Sequence[Tuple[int, int]] = (),
        input_map: Optional[Parameter] = None,
    ):
        self.kind = StructureKind(kind)
        self.system = system
        self.nets = nets or {}
        self.params = params or {}
        self.lam_res = lam_res
        self.pair_map = [tuple(p) for p in pair_map]
        self.input_map = input_map
        self.prior = None
        self.scaler = None
        self.scaling: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = None

        self.extended = list(TRUE_PARAMETERS[system.kind]) if self.kind == StructureKind.EXTENDED_STATE else []
        self.d_x = system.d_x + len(self.extended)
        self.d_u = system.d_u

        if self.kind in HAMILTONIAN_KINDS:
            if self.d_x % 2:
                raise ConfigurationError(f"{self.kind.value} needs an even state dimension, got {self.d_x}")
            rows = self.d_x if self.kind == StructureKind.HAMILTONIAN_GENERAL else self.d_x // 2
            if self.d_u and (input_map is None or input_map.shape != (rows, self.d_u)):
                raise ConfigurationError(f"{self.kind.value} needs a {rows}x{self.d_u} input map")
        if lam_res < 0:
            raise ConfigurationError("residual penalty weight must be non-negative")
        if self.kind == StructureKind.RESIDUAL_ON_PRIOR:
            if prior is None:
                raise ConfigurationError("residual_on_prior needs prior matrices (A_prior, B_prior)")
            A, B = (np.asarray(m, dtype=np.float64) for m in prior)
            B = B.reshape(self.d_x, self.d_u)
            if A.shape != (self.d_x, self.d_x):
                raise ConfigurationError(f"A_prior must be {self.d_x}x{self.d_x}, got {A.shape}")
            self.prior = (A, B)
        for first, second in self.pair_map:
            if second != first + 1 or second >= self.d_x:
                raise ConfigurationError(f"invalid position/velocity pair {(first, second)}")

    @classmethod
    def create(
        cls,
        kind: StructureKind,
        system: BenchmarkSystem,
        rng: np.random.Generator,
        hidden: Sequence[int] = (50, 50),
        prior: Optional[Tuple[np.ndarray, np.ndarray]] = None,
        lam_res: float = 5e-7,
        pair_map: Optional[Sequence[Tuple[int, int]]] = None,
    ) -> "ModelSpec":
        kind = StructureKind(kind)
        d_x, d_u = system.d_x, system.d_u
        nets: Dict[str, MLP] = {}
        params: Dict[str, Parameter] = {}
        input_map = None

        if kind in (StructureKind.FREE, StructureKind.RESIDUAL_ON_PRIOR):
            nets["f"] = MLP.create([d_x + d_u, *hidden, d_x], name="f", rng=rng)
        elif kind == StructureKind.HAMILTONIAN_GENERAL:
            nets["H"] = MLP.create([d_x, *hidden, 1], name="H", rng=rng)
        elif kind == StructureKind.HAMILTONIAN_SECOND_ORDER:
            nets["H"] = MLP.create([d_x // 2, *hidden, 1], name="H", rng=rng)
        if kind in HAMILTONIAN_KINDS and d_u:
            rows = d_x if kind == StructureKind.HAMILTONIAN_GENERAL else d_x // 2
            input_map = Parameter(np.zeros((rows, d_u)), name="G")
        elif kind == StructureKind.SECOND_ORDER_PAIRS:
            if pair_map is None:
                if system.kind not in DEFAULT_PAIRS:
                    raise ConfigurationError(f"{system.kind.value} has no position/velocity pairs")
                pair_map = DEFAULT_PAIRS[system.kind]
            nets["f"] = MLP.create([d_x + d_u, *hidden, d_x - len(pair_map)], name="f", rng=rng)
        elif kind == StructureKind.PARAMETRIC:
            initial = draw_initial_parameters(system.kind, rng)
            params = {name: Parameter(value, name=f"param.{name}") for name, value in initial.items()}

        return cls(
            kind,
            system,
            nets=nets,
            params=params,
            prior=prior,
            lam_res=lam_res if kind == StructureKind.RESIDUAL_ON_PRIOR else 0.0,
            pair_map=pair_map or (),
            input_map=input_map,
        )

    @property
    def measured(self) -> List[int]:
        return self.system.measured

    def parameters(self) -> List[Parameter]:
        params = [p for net in self.nets.values() for p in net.parameters()]
        if self.input_map is not None:
            params.append(self.input_map)
        return params + list(self.params.values())

    def physical_parameters(self) -> Dict[str, float]:
        return {name: float(p.value) for name, p in self.params.items()}

    def attach_scaler(self, scaler) -> None:
        """Networks see standardised states and inputs; their outputs are in state units"""
        self.scaler = scaler
        self.scaling = tuple(
            np.asarray(v, dtype=np.float64) for v in (scaler.x_mean, scaler.x_std, scaler.u_mean, scaler.u_std)
        )

    def _scaled(self, x: Node, u: Optional[ArrayLike], index=slice(None)) -> Node:
        if self.scaling is None:
            inp = x
            u_in = u
        else:
            x_mean, x_std, u_mean, u_std = self.scaling
            inp = (x - x_mean[index]) / x_std[index]
            u_in = None if u is None else (u - u_mean) / u_std
        if self.d_u and u_in is not None and index == slice(None):
            return concat([inp, as_node(u_in)], axis=-1)
        return inp

    def _out_scale(self, index=slice(None)):
        return 1.0 if self.scaling is None else self.scaling[1][index]

    def residual(self, x: ArrayLike, u: Optional[ArrayLike]) -> Node:
        x = as_node(x)
        if self.d_u and u is None:
            u = np.zeros(x.shape[:-1] + (self.d_u,))
        return self.nets["f"](self._scaled(x, u)) * self._out_scale()

    def field(self, t: float, x: ArrayLike, u: Optional[ArrayLike] = None) -> Node:
        return eval_field(self, t, x, u)


def _hamiltonian_gradient(net: MLP, coords: Node, spec: ModelSpec, index) -> Node:
    """dH/dcoords through the tape; recorded again when the caller is taping"""
    outer = is_taping()
    with tape():
        leaf = coords if (outer and coords.requires_grad) else Node(coords.value, requires_grad=True)
        H = net(spec._scaled(leaf, None, index))
        total = H.sum()
    (g,) = grad(total, [leaf], create_graph=outer)
    return g


def _with_input(spec: ModelSpec, rows: Node, u: Optional[ArrayLike]) -> Node:
    """Port term G u on the rows a Hamiltonian field drives; absent u means no forcing"""
    if spec.input_map is None or u is None:
        return rows
    return rows + as_node(u) @ transpose(spec.input_map)


def eval_field(spec: ModelSpec, t: float, x: ArrayLike, u: Optional[ArrayLike] = None) -> Node:
    x = as_node(x)
    if x.shape[-1] != spec.d_x:
        raise ConfigurationError(f"{spec.kind.value} model expects {spec.d_x} state coordinates, got {x.shape[-1]}")
    kind = spec.kind

    if kind == StructureKind.FREE:
        return spec.residual(x, u)

    if kind == StructureKind.HAMILTONIAN_GENERAL:
        n = spec.d_x // 2
        g = _hamiltonian_gradient(spec.nets["H"], x, spec, slice(None))
        return _with_input(spec, concat([g[..., n:], -g[..., :n]], axis=-1), u)

    if kind == StructureKind.HAMILTONIAN_SECOND_ORDER:
        n = spec.d_x // 2
        q, p = x[..., :n], x[..., n:]
        g = _hamiltonian_gradient(spec.nets["H"], q, spec, slice(0, n))
        return concat([p, _with_input(spec, -g, u)], axis=-1)

    if kind == StructureKind.SECOND_ORDER_PAIRS:
        copied = {first: second for first, second in spec.pair_map}
        free_rows = [i for i in range(spec.d_x) if i not in copied]
        learned = _pairs_net(spec, x, u, free_rows)
        rows = []
        k = 0
        for i in range(spec.d_x):
            if i in copied:
                rows.append(x[..., copied[i]])
            else:
                rows.append(learned[..., k])
                k += 1
        return stack(rows, axis=-1)

    if kind == StructureKind.PARAMETRIC:
        return physical_field(spec.system.kind, spec.params, x, u)

    if kind == StructureKind.EXTENDED_STATE:
        d_phys = spec.system.d_x
        values = {name: x[..., d_phys + k] for k, name in enumerate(spec.extended)}
        base = physical_field(spec.system.kind, values, x[..., :d_phys], u)
        return concat([base, 0.0 * x[..., d_phys:]], axis=-1)

    A, B = spec.prior
    prior = x @ A.T
    if spec.d_u and u is not None:
        prior = prior + as_node(u) @ B.T
    return prior + spec.residual(x, u)


def _pairs_net(spec: ModelSpec, x: Node, u: Optional[ArrayLike], free_rows: List[int]) -> Node:
    if spec.d_u and u is None:
        u = np.zeros(x.shape[:-1] + (spec.d_u,))
    return spec.nets["f"](spec._scaled(x, u)) * spec._out_scale(free_rows)


def residual_penalty(spec: ModelSpec, states: ArrayLike, inputs: Optional[ArrayLike] = None) -> Node:
    """lam_res * mean over points of ||f_theta(x, u)||^2"""
    if spec.kind != StructureKind.RESIDUAL_ON_PRIOR:
        raise UsageError(f"residual penalty is defined for residual_on_prior, not {spec.kind.value}")
    r = spec.residual(states, inputs)
    points = int(np.prod(r.shape[:-1])) if r.ndim > 1 else 1
    return spec.lam_res * (r * r).sum() / float(points)
