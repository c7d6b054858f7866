import json
from pathlib import Path
from tempfile import TemporaryDirectory
from test.mock import mock_config
from test.mock import mock_dataset
from test.utils import debug
from unittest import TestCase

import numpy as np
from pydantic import ValidationError
from typer.testing import CliRunner

from main import cli
from repos import ArtifactRepository
from repos import Storage
from repos import trajectory_from_csv
from repos import trajectory_to_csv
from repos import TrajectoryRepository
from structnode import ablate
from structnode import AblationAxis
from structnode import build
from structnode import ConfigurationError
from structnode import evaluate_ekf
from structnode import ExperimentConfig
from structnode import fit_scaler
from structnode import generate
from structnode import MissingArtifactError
from structnode import RecognitionKind
from structnode import run_experiment
from structnode import StructureKind
from structnode import SystemKind

runner = CliRunner()


class ConfigTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Experiment Config **********************")

    def setUp(self):
        debug()

    def test_preset_merge(self):
        cfg = ExperimentConfig(preset="van_der_pol")
        assert cfg.system == SystemKind.VAN_DER_POL and cfg.N == 50 and cfg.noise_variance == 1e-3
        assert cfg.window_steps == 40
        cfg = ExperimentConfig(preset="van_der_pol", N=5)
        assert cfg.N == 5 and cfg.dt == 0.03

    def test_default_noise(self):
        assert ExperimentConfig(system="fitzhugh_nagumo").noise_variance == 5e-4
        assert ExperimentConfig(system="earthquake", sigma2=0.0).noise_variance == 0.0

    def test_rejections(self):
        for bad in ({"N": 0}, {"bogus": 1}, {"preset": "nope"}, {"t_c": 0.1, "dt": 0.03}, {"schema_version": 2}):
            with self.assertRaises(ValidationError):
                ExperimentConfig(**bad)

    def test_variant(self):
        cfg = ExperimentConfig(preset="earthquake").variant(t_c=5 * 0.03, seed=3)
        assert cfg.window_steps == 5 and cfg.seed == 3 and cfg.preset is None and cfg.N == 50


class RepositoryTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Run Directory **************************")

    def setUp(self):
        debug()
        self.tmp = TemporaryDirectory()
        self.storage = Storage.init(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_trajectory_csv(self):
        _, dataset = mock_dataset(SystemKind.VAN_DER_POL, N=1, sigma2=1e-3)
        text = trajectory_to_csv(dataset[0])
        assert text.splitlines()[0] == "t,y1,u1,x1,x2"
        back = trajectory_from_csv(text)
        for name in ("t", "y", "u", "x"):
            assert np.array_equal(getattr(back, name), getattr(dataset[0], name))

    def test_malformed_csv(self):
        with self.assertRaises(ConfigurationError):
            trajectory_from_csv("time,y1\n0,1\n")
        with self.assertRaises(ConfigurationError):
            trajectory_from_csv("t,x1\n0,1\n")

    def test_dataset_manifest(self):
        _, dataset = mock_dataset(SystemKind.FITZHUGH_NAGUMO, N=3)
        repo = TrajectoryRepository(self.storage)
        files = repo.write_dataset("train", dataset, {"seed": 0})
        assert files == [f"train/trajectory_{j:04d}.csv" for j in range(3)]
        manifest = repo.read_manifest("train")
        assert manifest["seed"] == 0 and manifest["trajectories"][1]["inputs"] == dataset[1].inputs
        assert len(repo.read_dataset("train")) == 3

    def test_missing_files(self):
        with self.assertRaises(MissingArtifactError):
            TrajectoryRepository(self.storage).read_dataset("test")
        self.storage.set_text("parameters.json", "{not json")
        with self.assertRaises(MissingArtifactError):
            ArtifactRepository(self.storage).load_parameters(mock_config())

    def test_parameters_round_trip(self):
        cfg = mock_config(system="earthquake", structure="second_order_pairs", recognition="kkl")
        result = build(cfg)
        dataset = generate(cfg)
        result.model.attach_scaler(fit_scaler(dataset, result.model.measured, result.model.d_x))
        artifacts = ArtifactRepository(self.storage)
        artifacts.save_parameters(result)

        loaded = artifacts.load_parameters(cfg.variant(seed=9))
        for saved, restored in ((result.model, loaded.model), (result.recog, loaded.recog)):
            a, b = saved.state_dict(), restored.state_dict()
            assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        assert np.array_equal(loaded.model.scaler.x_std, result.model.scaler.x_std)

        with self.assertRaises(ConfigurationError):
            artifacts.load_parameters(cfg.variant(hidden=[4]))


class PipelineTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Experiment Pipeline ********************")

    def setUp(self):
        debug()

    def test_single_value_ablation(self):
        reports = ablate(AblationAxis.T_C, [2], mock_config(epochs=1))
        assert len(reports) == 1 and reports[0].label == "t_c=2 steps"
        assert len(reports[0].rmse) == 3

    def test_window_longer_than_preset_trajectories(self):
        base = ExperimentConfig(preset="earthquake").variant(N=2, N_test=2, epochs=1, hidden=[8])
        reports = ablate(AblationAxis.T_C, [100], base)
        assert len(reports) == 1 and reports[0].label == "t_c=100 steps"
        assert len(reports[0].rmse) == 2

    def test_every_system_structure_recognition(self):
        for system in SystemKind:
            for structure in StructureKind:
                for recognition in RecognitionKind:
                    cfg = mock_config(
                        system=system,
                        structure=structure,
                        recognition=recognition,
                        N=2,
                        N_test=1,
                        epochs=1,
                        hidden=[4],
                    )
                    with self.subTest(system=system.value, structure=structure.value, recognition=recognition.value):
                        if system == SystemKind.FITZHUGH_NAGUMO and structure == StructureKind.SECOND_ORDER_PAIRS:
                            with self.assertRaises(ConfigurationError):
                                build(cfg)
                            continue
                        report = run_experiment(cfg).test_report
                        assert len(report.rmse) == 1 and np.isfinite(report.median)

    def test_empty_ablation(self):
        with self.assertRaises(ConfigurationError):
            ablate(AblationAxis.SIGMA2, [], mock_config())

    def test_ekf_with_true_model(self):
        cfg = mock_config(system="van_der_pol")
        report, estimates = evaluate_ekf(cfg, build(cfg).model, use_true_model=True)
        assert report.coordinates == "state"
        assert len(report.ekf_rmse) == len(estimates) == cfg.ekf_trajectories
        assert estimates[0].shape == (cfg.n, 2)


class CommandTest(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        print("----------------------------------------------------------")
        print("********* Testing Command Line ***************************")

    def setUp(self):
        debug()
        self.tmp = TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def config(self, name: str = "config.json", **overrides) -> Path:
        overrides.setdefault("out", str(self.root / "run"))
        path = self.root / name
        path.write_text(mock_config(**overrides).json())
        return path

    def invoke(self, *args: str):
        result = runner.invoke(cli, list(args))
        print(result.output)
        return result

    def test_end_to_end(self):
        config = str(self.config(system="van_der_pol", structure="parametric"))
        for command in ("generate", "train", "eval", "ekf"):
            assert self.invoke(command, "--config", config).exit_code == 0
        assert self.invoke("ablate", "--axis", "sigma2", "--value", "0.001", "--config", config).exit_code == 0

        run = self.root / "run"
        for name in (
            "train/manifest.json",
            "test/trajectory_0002.csv",
            "parameters.json",
            "metrics/train.json",
            "metrics/test.json",
            "metrics/ekf.json",
            "metrics/ablate_sigma2.json",
            "predictions/trajectory_0000.csv",
            "ekf/trajectory_0001.csv",
        ):
            assert (run / name).exists(), name
        assert (run / "train/trajectory_0000.csv").read_text().splitlines()[0] == "t,y1,u1,x1,x2"
        metrics = json.loads((run / "metrics/test.json").read_text())
        assert set(metrics["parameters"]) == {"mu"}

    def test_regeneration_is_byte_identical(self):
        first = str(self.config("a.json", out=str(self.root / "a")))
        second = str(self.config("b.json", out=str(self.root / "b")))
        assert self.invoke("generate", "--config", first).exit_code == 0
        assert self.invoke("generate", "--config", second).exit_code == 0
        for path in sorted((self.root / "a").rglob("*.csv")):
            twin = self.root / "b" / path.relative_to(self.root / "a")
            assert path.read_bytes() == twin.read_bytes()

    def test_exit_codes(self):
        for i, bad in enumerate(({"N": 0}, {"bogus": 1}, {"t_c": 0.07})):
            path = self.root / f"bad_{i}.json"
            path.write_text(json.dumps({**json.loads(mock_config().json()), **bad}))
            assert self.invoke("generate", "--config", str(path)).exit_code == 2
        assert self.invoke("generate").exit_code == 2
        assert self.invoke("train", "--config", str(self.root / "absent.json")).exit_code == 3
        assert self.invoke("eval", "--config", str(self.config())).exit_code == 3

    def test_short_test_trajectories(self):
        config = str(self.config(n_test=4))
        assert self.invoke("generate", "--config", config).exit_code == 0
        assert self.invoke("train", "--config", config).exit_code == 0
        assert self.invoke("eval", "--config", config).exit_code == 4

    def test_seed_override(self):
        config = str(self.config())
        assert self.invoke("generate", "--config", config, "--seed", "4", "--out", str(self.root / "s")).exit_code == 0
        manifest = json.loads((self.root / "s" / "train" / "manifest.json").read_text())
        assert manifest["seed"] == 4 and manifest["N"] == 4
