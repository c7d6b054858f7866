from test.mock import DT
from test.mock import mock_dataset
from test.mock import mock_pair
from test.utils import debug
from test.utils import relative_error
from unittest import TestCase

import numpy as np
from pydantic import ValidationError
from terminaltables import AsciiTable

from structnode import backward
from structnode import Batch
from structnode import BenchmarkSystem
from structnode import check_gains
from structnode import dataset_loss
from structnode import evaluate_rmse
from structnode import fit_scaler
from structnode import HURWITZ_MARGIN
from structnode import KKLGains
from structnode import MLP
from structnode import ModelSpec
from structnode import no_tape
from structnode import output_loss
from structnode import output_rmse
from structnode import PreconditionError
from structnode import predict
from structnode import RecognitionKind
from structnode import RecognitionVariant
from structnode import StructureKind
from structnode import SystemKind
from structnode import train
from structnode import TrainingConfig
from structnode import TrainingError
from structnode import Trajectory
from structnode import UsageError
from structnode import validation_size


def pipeline_loss(model, recog, dataset):
    batch = Batch.build(dataset, model.scaler)
    states = predict(model, recog, batch)
    y_pred = model.scaler.scale_y(states[..., model.measured])
    return output_loss(y_pred, batch.Y_scaled, 1, batch.grid.n, batch.size)


def oracle_pair(dataset, dt: float):
    """True oscillator and a linear psi that inverts the first two samples exactly"""
    system = BenchmarkSystem.preset(SystemKind.HARMONIC_OSCILLATOR)
    model = ModelSpec.create(StructureKind.PARAMETRIC, system, np.random.default_rng(0))
    model.params["omega2"].assign(1.0)
    scaler = fit_scaler(dataset, model.measured, model.d_x)
    model.attach_scaler(scaler)

    # y(0) = x1, y(dt) = cos(dt) x1 + sin(dt) x2
    M_inv = np.linalg.inv(np.array([[1.0, 0.0], [np.cos(dt), np.sin(dt)]]))
    m, s = scaler.y_mean[0], scaler.y_std[0]
    bias = (m / s) * (M_inv @ np.ones(2) - np.ones(2))
    psi = MLP.from_weights([(M_inv.T, bias)], name="psi")
    recog = RecognitionVariant(RecognitionKind.DIRECT, t_c=dt, dt=dt, d_x=2, d_y=1, d_u=0, psi=psi)
    return model, recog


class ScalerTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Scaling and Losses *********************")

    def setUp(self):
        debug()

    def test_symmetric_channel(self):
        tr = Trajectory(t=np.array([0.0, 1.0]), y=np.array([-1.0, 1.0]))
        scaler = fit_scaler([tr], [0], 2)
        assert scaler.y_mean[0] == 0.0 and scaler.y_std[0] == 1.0
        assert np.array_equal(scaler.scale_y(tr.y), tr.y)
        assert np.array_equal(scaler.x_std, [1.0, 1.0])

    def test_constant_channel(self):
        tr = Trajectory(t=np.arange(3.0), y=np.full(3, 2.5), u=np.zeros(3))
        scaler = fit_scaler([tr], [0], 2)
        assert scaler.y_std[0] == 1e-8 and scaler.u_std[0] == 1e-8
        assert np.array_equal(scaler.scale_y(tr.y), np.zeros((3, 1)))

    def test_round_trip(self):
        _, dataset = mock_dataset(SystemKind.VAN_DER_POL, sigma2=1e-3)
        scaler = fit_scaler(dataset, [0], 2)
        y = np.random.default_rng(0).normal(size=(10, 1))
        assert np.max(np.abs(scaler.unscale_y(scaler.scale_y(y)) - y)) < 1e-12

    def test_unmeasured_state_channels(self):
        tr = Trajectory(t=np.arange(4.0), y=np.array([[0.0, 10.0], [2.0, 10.0], [0.0, 14.0], [2.0, 14.0]]))
        scaler = fit_scaler([tr], [0, 2], 3)
        assert np.allclose(scaler.x_mean, [1.0, 6.5, 12.0])
        assert np.allclose(scaler.x_std, [1.0, 1.5, 2.0])

    def test_output_loss(self):
        pred = np.random.default_rng(0).normal(size=(5, 2, 1))
        assert output_loss(pred, pred, 1, 5, 2).item() == 0.0
        assert output_loss(np.ones((2, 1, 1)), np.zeros((2, 1, 1)), 1, 2, 1).item() == 0.5

        measured = np.zeros((5, 2, 1))
        one = output_loss(pred[:, :1], measured[:, :1], 1, 5, 1).item()
        doubled = np.concatenate([pred[:, :1], pred[:, :1]], axis=1)
        assert abs(output_loss(doubled, measured, 1, 5, 2).item() - one) < 1e-15

    def test_output_loss_shape(self):
        with self.assertRaises(UsageError):
            output_loss(np.zeros((2, 1, 1)), np.zeros((2, 2, 1)), 1, 2, 1)
        with self.assertRaises(UsageError):
            output_loss(np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), 1, 3, 1)

    def test_zero_predictor_rmse(self):
        y = np.random.default_rng(1).normal(size=(2000, 3, 1))
        assert np.allclose(output_rmse(np.zeros_like(y), y), 1.0, atol=0.05)

    def test_invalid_training_config(self):
        for bad in ({"lr": 0.0}, {"t_c": -1.0}, {"batch_size": 0}, {"decay_factor": 1.5}, {"val_fraction": 1.0}):
            with self.assertRaises(ValidationError):
                TrainingConfig(**{"t_c": 0.1, **bad})


class PipelineTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Training Pipeline **********************")

    def setUp(self):
        debug()

    def test_gradient_matches_differences(self):
        system, dataset = mock_dataset(SystemKind.VAN_DER_POL, N=2, n=6, sigma2=1e-3)
        model, recog = mock_pair(system, StructureKind.FREE, RecognitionKind.KKL, hidden=(5,), t_c=2 * DT)
        model.attach_scaler(fit_scaler(dataset, model.measured, model.d_x))
        gradients = backward(pipeline_loss(model, recog, dataset))

        rows = [["parameter", "relative error"]]
        for p in (model.nets["f"].layers[0][0], recog.psi.layers[1][1], recog.gains.theta):

            def loss(v):
                saved = p.value
                p.value = v
                with no_tape():
                    value = pipeline_loss(model, recog, dataset).item()
                p.value = saved
                return value

            reference = np.zeros_like(p.value)
            for i in np.ndindex(p.shape):
                up, down = p.value.copy(), p.value.copy()
                up[i] += 1e-6
                down[i] -= 1e-6
                reference[i] = (loss(up) - loss(down)) / 2e-6
            error = relative_error(gradients[p], reference)
            rows.append([p.name, f"{error:.2e}"])
            assert error < 1e-4
        print(AsciiTable(rows).table)

    def test_oracle_has_zero_loss(self):
        _, dataset = mock_dataset(SystemKind.HARMONIC_OSCILLATOR, N=3)
        model, recog = oracle_pair(dataset, DT)
        assert dataset_loss(model, recog, dataset) < 1e-12
        report = evaluate_rmse(model, recog, dataset, DT)
        assert report.median < 1e-4 and len(report.rmse) == 3

    def test_zero_epochs(self):
        system, dataset = mock_dataset()
        model, recog = mock_pair(system)
        before = (model.state_dict(), recog.state_dict())
        _, _, report = train(model, recog, dataset, TrainingConfig(t_c=0.25, epochs=0))
        for state, saved in zip((model.state_dict(), recog.state_dict()), before):
            assert all(np.array_equal(state[k], saved[k]) for k in saved)
        assert report.epochs_run == 0 and report.train_loss == []

    def test_seeded_determinism(self):
        system, dataset = mock_dataset(SystemKind.VAN_DER_POL, sigma2=1e-3)
        runs = []
        for threads in (1, 1, 2, 2):
            model, recog = mock_pair(system, hidden=(6,))
            cfg = TrainingConfig(t_c=0.25, epochs=3, batch_size=2, threads=threads, seed=5)
            _, _, report = train(model, recog, dataset, cfg)
            runs.append((report.train_loss, model.state_dict()))

        for a, b in (runs[:2], runs[2:]):
            assert a[0] == b[0]
            assert all(np.array_equal(a[1][k], b[1][k]) for k in a[1])
        assert np.allclose(runs[0][0], runs[2][0], rtol=1e-6)

    def test_loss_decreases(self):
        system, dataset = mock_dataset(N=6, sigma2=1e-4)
        model, recog = mock_pair(system, StructureKind.PARAMETRIC)
        _, _, report = train(model, recog, dataset, TrainingConfig(t_c=0.25, epochs=10, batch_size=6, lr=0.01))
        assert report.train_loss[-1] < report.train_loss[0]
        assert set(report.parameters) == {"omega2"}

    def test_trained_gains_stay_hurwitz(self):
        system, dataset = mock_dataset(N=4)
        model, recog = mock_pair(system)
        # poles just inside the margin, so updates push them against the clamp
        recog.gains = KKLGains([("real", -0.002, 0.0), ("pair", -0.002, 1.0)], np.ones((3, 1)))
        rows = [["epoch", "largest real part"]]
        for epoch in range(6):
            cfg = TrainingConfig(t_c=0.25, epochs=1, batch_size=2, lr=0.05, train_D=True, seed=epoch)
            before = recog.gains.theta.value.copy()
            train(model, recog, dataset, cfg)
            assert not np.array_equal(before, recog.gains.theta.value)
            rows.append([epoch, f"{recog.gains.real_parts.max():.5f}"])
            assert check_gains(recog.gains).hurwitz
            assert np.all(recog.gains.real_parts <= -HURWITZ_MARGIN)
        print(AsciiTable(rows).table)

    def test_early_stopping_restores_best(self):
        system, dataset = mock_dataset(N=8)
        model, recog = mock_pair(system)
        cfg = TrainingConfig(t_c=0.25, epochs=30, batch_size=4, lr=0.05, patience=2, val_fraction=0.25, seed=1)
        _, _, report = train(model, recog, dataset, cfg)

        assert len(report.val_loss) == report.epochs_run
        if report.epochs_run < cfg.epochs:
            assert min(report.val_loss[-cfg.patience :]) >= min(report.val_loss[: -cfg.patience])

        order = np.random.default_rng(cfg.seed).permutation(len(dataset))
        validation = [dataset[i] for i in order[:2]]
        assert abs(dataset_loss(model, recog, validation) - min(report.val_loss)) < 1e-12

    def test_small_dataset_keeps_validation(self):
        cfg = TrainingConfig(t_c=0.25, epochs=3, batch_size=2, lr=0.01, patience=2, seed=1)
        assert validation_size(4, cfg) == 1
        assert validation_size(40, cfg) == 4
        assert validation_size(4, TrainingConfig(t_c=0.25)) == 0

        system, dataset = mock_dataset(N=4)
        model, recog = mock_pair(system)
        _, _, report = train(model, recog, dataset, cfg)
        assert len(report.val_loss) == report.epochs_run > 0

    def test_single_trajectory_disables_early_stopping(self):
        cfg = TrainingConfig(t_c=0.25, epochs=1, patience=2)
        with self.assertLogs("structnode.trainer", "WARNING"):
            assert validation_size(1, cfg) == 0
        with self.assertLogs("structnode.trainer", "WARNING"):
            assert validation_size(10, TrainingConfig(t_c=0.25, patience=2, val_fraction=0.0)) == 0

        system, dataset = mock_dataset(N=1)
        model, recog = mock_pair(system)
        _, _, report = train(model, recog, dataset, cfg)
        assert report.val_loss == [] and report.epochs_run == 1

    def test_residual_penalty_enters_loss(self):
        system, dataset = mock_dataset()
        model, recog = mock_pair(system, StructureKind.RESIDUAL_ON_PRIOR)
        model.attach_scaler(fit_scaler(dataset, model.measured, model.d_x))
        model.lam_res = 0.0
        plain = dataset_loss(model, recog, dataset)
        model.lam_res = 1.0
        assert dataset_loss(model, recog, dataset) > plain

    def test_window_longer_than_trajectory(self):
        system, dataset = mock_dataset(n=6)
        model, recog = mock_pair(system, t_c=0.5)
        with self.assertRaises(PreconditionError):
            train(model, recog, dataset, TrainingConfig(t_c=0.5, epochs=1))
        model.attach_scaler(fit_scaler(dataset, model.measured, model.d_x))
        with self.assertRaises(PreconditionError):
            evaluate_rmse(model, recog, dataset, 0.5)

    def test_divergence_is_reported(self):
        system, dataset = mock_dataset()
        model, recog = mock_pair(system)
        bias = model.nets["f"].layers[-1][1]
        bias.assign(np.full(bias.shape, 1e200))
        with self.assertRaises(TrainingError) as ctx:
            train(model, recog, dataset, TrainingConfig(t_c=0.25, epochs=1, batch_size=4))
        assert ctx.exception.epoch == 0 and ctx.exception.batch == 0
