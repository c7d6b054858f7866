"""Function approximators and the Adam optimizer built on the tape"""
from __future__ import annotations

import logging
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from .diffcore import ArrayLike
from .diffcore import as_node
from .diffcore import Gradients
from .diffcore import Node
from .diffcore import Parameter
from .diffcore import sigmoid
from .diffcore import silu
from .diffcore import tanh
from .errors import ConfigurationError
from .errors import TrainingError


logger = logging.getLogger(__name__)

StateDict = Dict[str, np.ndarray]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """Anything that owns named parameters"""

    def parameters(self) -> List[Parameter]:
        raise NotImplementedError

    def state_dict(self) -> StateDict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: StateDict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise ConfigurationError(f"missing parameter {p.name}")
            p.assign(state[p.name])

    @property
    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))


class MLP(Module):
    """Affine layers with SiLU between them and an identity output"""

    def __init__(self, layers: List[Tuple[Parameter, Parameter]]):
        for (w, b), (w_next, _) in zip(layers, layers[1:]):
            if w.shape[1] != w_next.shape[0]:
                raise ConfigurationError(f"layer {w.name} does not chain into {w_next.name}")
        for w, b in layers:
            if b.shape != (w.shape[1],):
                raise ConfigurationError(f"bias {b.name} does not match {w.name}")
        self.layers = layers

    @classmethod
    def create(cls, sizes: Sequence[int], name: str, rng: np.random.Generator) -> "MLP":
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least input and output sizes")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            w = Parameter(glorot_uniform(rng, fan_in, fan_out), name=f"{name}.{i}.W")
            b = Parameter(np.zeros(fan_out), name=f"{name}.{i}.b")
            layers.append((w, b))
        return cls(layers)

    @classmethod
    def from_weights(cls, weights: Sequence[Tuple[np.ndarray, np.ndarray]], name: str = "mlp") -> "MLP":
        layers = [
            (Parameter(w, name=f"{name}.{i}.W"), Parameter(b, name=f"{name}.{i}.b"))
            for i, (w, b) in enumerate(weights)
        ]
        return cls(layers)

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x: ArrayLike) -> Node:
        return mlp_forward(self, x)


def mlp_forward(params: MLP, x: ArrayLike) -> Node:
    h = as_node(x)
    if h.shape[-1] != params.sizes[0]:
        raise ConfigurationError(f"MLP expects input width {params.sizes[0]}, got {h.shape[-1]}")

    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = silu(h)
    return h


class GRU(Module):
    def __init__(self, d_in: int, d_z: int, name: str, rng: Optional[np.random.Generator] = None):
        self.d_in = d_in
        self.d_z = d_z
        self.weights: Dict[str, Parameter] = {}
        for gate in ("z", "r", "h"):
            W = glorot_uniform(rng, d_in, d_z) if rng is not None else np.zeros((d_in, d_z))
            U = glorot_uniform(rng, d_z, d_z) if rng is not None else np.zeros((d_z, d_z))
            self.weights[f"W_{gate}"] = Parameter(W, name=f"{name}.W_{gate}")
            self.weights[f"U_{gate}"] = Parameter(U, name=f"{name}.U_{gate}")
            self.weights[f"b_{gate}"] = Parameter(np.zeros(d_z), name=f"{name}.b_{gate}")

    def __getitem__(self, key: str) -> Parameter:
        return self.weights[key]

    def parameters(self) -> List[Parameter]:
        return list(self.weights.values())

    def run(self, inputs: Iterable[ArrayLike], h0: Optional[ArrayLike] = None) -> Node:
        h = h0
        for x_in in inputs:
            if h is None:
                x_node = as_node(x_in)
                h = np.zeros(x_node.shape[:-1] + (self.d_z,))
            h = gru_step(self, h, x_in)
        if h is None:
            raise ConfigurationError("GRU run over an empty sequence")
        return as_node(h)


def gru_step(params: GRU, h: ArrayLike, x_in: ArrayLike) -> Node:
    """h' = (1 - z) * candidate + z * h"""
    h, x_in = as_node(h), as_node(x_in)
    if h.shape[-1] != params.d_z or x_in.shape[-1] != params.d_in:
        raise ConfigurationError(
            f"GRU expects hidden {params.d_z} and input {params.d_in}, got {h.shape[-1]} and {x_in.shape[-1]}"
        )

    p = params
    z = sigmoid(x_in @ p["W_z"] + h @ p["U_z"] + p["b_z"])
    r = sigmoid(x_in @ p["W_r"] + h @ p["U_r"] + p["b_r"])
    candidate = tanh(x_in @ p["W_h"] + (r * h) @ p["U_h"] + p["b_h"])
    return (1.0 - z) * candidate + z * h


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0


def adam_update(
    state: AdamState,
    params: Sequence[Parameter],
    grads: Gradients,
    lr: float,
) -> Tuple[Sequence[Parameter], AdamState]:
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", parameter=p.name)

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step

    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.value)
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        if state.m[p.name].shape != p.shape:
            raise ConfigurationError(f"optimizer state for {p.name} has shape {state.m[p.name].shape}")

        m = state.m[p.name] = state.beta1 * state.m[p.name] + (1.0 - state.beta1) * g
        v = state.v[p.name] = state.beta2 * state.v[p.name] + (1.0 - state.beta2) * (g * g)
        p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    return params, state
