from test.utils import debug
from typing import List
from unittest import TestCase

import numpy as np

from structnode import BenchmarkSystem
from structnode import ConfigurationError
from structnode import draw_initial_parameters
from structnode import eval_field
from structnode import jacobian
from structnode import Module
from structnode import ModelSpec
from structnode import Node
from structnode import Parameter
from structnode import residual_penalty
from structnode import StructureKind
from structnode import SystemKind
from structnode import UsageError


class QuadraticEnergy(Module):
    """H = x.x / 2, standing in for a network"""

    def parameters(self) -> List[Parameter]:
        return []

    def __call__(self, x) -> Node:
        return 0.5 * (x * x).sum(axis=-1, keepdims=True)


def oscillator() -> BenchmarkSystem:
    return BenchmarkSystem.preset(SystemKind.HARMONIC_OSCILLATOR)


def zeroed(spec: ModelSpec, **biases) -> ModelSpec:
    state = {name: np.zeros_like(v) for name, v in spec.state_dict().items()}
    state.update({name: np.asarray(v, dtype=np.float64) for name, v in biases.items()})
    spec.load_state_dict(state)
    return spec


class StructureTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Structural Priors **********************")

    def setUp(self):
        debug()

    def test_hamiltonian_general(self):
        spec = ModelSpec(StructureKind.HAMILTONIAN_GENERAL, oscillator(), nets={"H": QuadraticEnergy()})
        assert np.allclose(eval_field(spec, 0.0, np.array([1.0, 0.0])).value, [0.0, -1.0])

    def test_hamiltonian_second_order(self):
        spec = ModelSpec(StructureKind.HAMILTONIAN_SECOND_ORDER, oscillator(), nets={"H": QuadraticEnergy()})
        assert np.allclose(eval_field(spec, 0.0, np.array([0.3, 0.7])).value, [0.7, -0.3])

    def test_parametric(self):
        spec = ModelSpec.create(StructureKind.PARAMETRIC, oscillator(), np.random.default_rng(0))
        spec.params["omega2"].assign(1.0)
        assert np.allclose(spec.field(0.0, np.array([0.5, -0.2])).value, [-0.2, -0.5])
        assert spec.physical_parameters() == {"omega2": 1.0}

    def test_parametric_initial_ranges(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert 0.25 <= draw_initial_parameters(SystemKind.HARMONIC_OSCILLATOR, rng)["omega2"] <= 4.0
            assert 8.0 <= draw_initial_parameters(SystemKind.EARTHQUAKE, rng)["k_m"] <= 12.0
            assert 0.5 <= draw_initial_parameters(SystemKind.VAN_DER_POL, rng)["mu"] <= 1.5

    def test_extended_state(self):
        spec = ModelSpec.create(StructureKind.EXTENDED_STATE, oscillator(), np.random.default_rng(0))
        assert spec.d_x == 3 and spec.parameters() == []
        assert np.allclose(spec.field(0.0, np.array([1.0, 0.0, 4.0])).value, [0.0, -4.0, 0.0])

    def test_residual_with_zero_network(self):
        A = np.array([[0.0, 1.0], [-0.8, -0.1]])
        spec = ModelSpec.create(
            StructureKind.RESIDUAL_ON_PRIOR,
            oscillator(),
            np.random.default_rng(0),
            hidden=(4,),
            prior=(A, np.zeros((2, 0))),
        )
        zeroed(spec)
        x = np.array([[0.3, -1.2], [2.0, 0.5]])
        assert np.array_equal(spec.field(0.0, x).value, x @ A.T)

    def test_residual_needs_prior(self):
        with self.assertRaises(ConfigurationError):
            ModelSpec.create(StructureKind.RESIDUAL_ON_PRIOR, oscillator(), np.random.default_rng(0), hidden=(4,))

    def test_second_order_pairs(self):
        system = BenchmarkSystem.preset(SystemKind.EARTHQUAKE)
        spec = ModelSpec.create(StructureKind.SECOND_ORDER_PAIRS, system, np.random.default_rng(0), hidden=(6,))
        assert spec.pair_map == [(0, 1), (2, 3)]
        x = np.random.default_rng(1).normal(size=(5, 4))
        f = spec.field(0.0, x, np.ones((5, 1))).value
        assert np.array_equal(f[:, 0], x[:, 1])
        assert np.array_equal(f[:, 2], x[:, 3])

    def test_pairs_without_default(self):
        with self.assertRaises(ConfigurationError):
            ModelSpec.create(
                StructureKind.SECOND_ORDER_PAIRS,
                BenchmarkSystem.preset(SystemKind.FITZHUGH_NAGUMO),
                np.random.default_rng(0),
            )

    def test_odd_dimension(self):
        system = BenchmarkSystem(
            kind=SystemKind.HARMONIC_OSCILLATOR, params={"omega2": 1.0}, d_x=3, d_y=1, d_u=0, measured=[0]
        )
        with self.assertRaises(ConfigurationError):
            ModelSpec.create(StructureKind.HAMILTONIAN_GENERAL, system, np.random.default_rng(0), hidden=(4,))

    def test_wrong_state_width(self):
        spec = ModelSpec.create(StructureKind.FREE, oscillator(), np.random.default_rng(0), hidden=(4,))
        with self.assertRaises(ConfigurationError):
            spec.field(0.0, np.zeros(3))


class ConservationTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Hamiltonian Conservation ***************")

    def setUp(self):
        debug()

    def test_energy_is_conserved_by_the_field(self):
        rng = np.random.default_rng(7)
        for kind in (StructureKind.HAMILTONIAN_GENERAL, StructureKind.HAMILTONIAN_SECOND_ORDER):
            spec = ModelSpec.create(kind, oscillator(), rng, hidden=(16, 16))
            net = spec.nets["H"]
            for x in rng.normal(size=(200, 2)):
                if kind == StructureKind.HAMILTONIAN_GENERAL:
                    dH = jacobian(lambda v: net(v).sum(), x)[0]
                else:
                    dH = np.concatenate([jacobian(lambda q: net(q).sum(), x[:1])[0], x[1:]])
                f = spec.field(0.0, x).value
                assert abs(dH @ f) < 1e-9

    def test_field_is_divergence_free(self):
        rng = np.random.default_rng(11)
        for kind in (StructureKind.HAMILTONIAN_GENERAL, StructureKind.HAMILTONIAN_SECOND_ORDER):
            spec = ModelSpec.create(kind, oscillator(), rng, hidden=(16, 16))
            for x in rng.normal(size=(50, 2)):
                J = jacobian(lambda v: spec.field(0.0, v), x)
                assert abs(np.trace(J)) < 1e-9

                step = 1e-5
                divergence = sum(
                    (spec.field(0.0, x + step * e).value[i] - spec.field(0.0, x - step * e).value[i]) / (2 * step)
                    for i, e in enumerate(np.eye(2))
                )
                assert abs(divergence) < 1e-4

    def test_forced_field_adds_input_map(self):
        system = BenchmarkSystem.preset(SystemKind.VAN_DER_POL)
        rng = np.random.default_rng(2)
        for kind, rows in ((StructureKind.HAMILTONIAN_GENERAL, 2), (StructureKind.HAMILTONIAN_SECOND_ORDER, 1)):
            spec = ModelSpec.create(kind, system, rng, hidden=(8,))
            assert spec.input_map.shape == (rows, 1)
            assert any(p is spec.input_map for p in spec.parameters())
            spec.input_map.assign(np.full((rows, 1), 0.5))
            x, u = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
            forced = spec.field(0.0, x, u).value - spec.field(0.0, x).value
            assert np.allclose(forced[:, 2 - rows :], 0.5 * u)
            assert np.allclose(forced[:, : 2 - rows], 0.0)


class PenaltyTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Residual Penalty ***********************")

    def setUp(self):
        debug()

    def spec(self, lam_res: float) -> ModelSpec:
        return ModelSpec.create(
            StructureKind.RESIDUAL_ON_PRIOR,
            oscillator(),
            np.random.default_rng(0),
            hidden=(4,),
            prior=(np.zeros((2, 2)), np.zeros((2, 0))),
            lam_res=lam_res,
        )

    def test_single_point(self):
        spec = zeroed(self.spec(0.5), **{"f.1.b": [1.0, 2.0]})
        assert abs(residual_penalty(spec, np.array([0.3, 0.4])).item() - 2.5) < 1e-12
        assert abs(residual_penalty(spec, np.ones((6, 2))).item() - 2.5) < 1e-12

    def test_zero_cases(self):
        assert residual_penalty(zeroed(self.spec(0.5)), np.ones((3, 2))).item() == 0.0
        assert residual_penalty(self.spec(0.0), np.ones((3, 2))).item() == 0.0

    def test_wrong_kind(self):
        spec = ModelSpec.create(StructureKind.FREE, oscillator(), np.random.default_rng(0), hidden=(4,))
        with self.assertRaises(UsageError):
            residual_penalty(spec, np.zeros(2))

    def test_negative_weight(self):
        with self.assertRaises(ConfigurationError):
            self.spec(-1.0)
