import io
import json
from typing import Dict
from typing import List
from typing import Sequence

import numpy as np

from repos.storage import Storage
from structnode.errors import ConfigurationError
from structnode.experiment import build
from structnode.experiment import ExperimentConfig
from structnode.experiment import ExperimentResult
from structnode.experiment import SCHEMA_VERSION
from structnode.trainer import MetricsReport
from structnode.trainer import Scaler

PARAMETERS = "parameters.json"


def _arrays(state: Dict[str, np.ndarray]) -> Dict[str, list]:
    return {name: np.asarray(value).tolist() for name, value in state.items()}


def _table_csv(header: Sequence[str], columns: Sequence[np.ndarray]) -> str:
    buffer = io.StringIO()
    np.savetxt(buffer, np.column_stack(columns), delimiter=",", fmt="%.17g", header=",".join(header), comments="")
    return buffer.getvalue()


class ArtifactRepository:
    """Trained parameters, metrics, predictions and EKF estimates of one run"""

    def __init__(self, storage: Storage):
        self._s = storage

    def save_parameters(self, result: ExperimentResult) -> None:
        self._s.set_json(
            PARAMETERS,
            {
                "schema_version": SCHEMA_VERSION,
                "config": json.loads(result.cfg.json()),
                "model": _arrays(result.model.state_dict()),
                "recognition": _arrays(result.recog.state_dict()),
                "scaler": json.loads(result.model.scaler.json()),
            },
        )

    def load_parameters(self, cfg: ExperimentConfig) -> ExperimentResult:
        """Rebuild the model described by ``cfg`` and load the saved weights into it"""
        data = self._s.get_json(PARAMETERS)
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"parameter file has schema version {data.get('schema_version')}")
        saved = ExperimentConfig(**data["config"])
        for key in ("system", "structure", "recognition", "hidden", "d_z", "t_c", "dt"):
            if getattr(saved, key) != getattr(cfg, key):
                raise ConfigurationError(f"parameters were trained with {key}={getattr(saved, key)}")

        result = build(cfg)
        result.model.load_state_dict({k: np.asarray(v) for k, v in data["model"].items()})
        result.recog.load_state_dict({k: np.asarray(v) for k, v in data["recognition"].items()})
        result.model.attach_scaler(Scaler(**data["scaler"]))
        return result

    def save_metrics(self, name: str, report: MetricsReport) -> None:
        self._s.set_json(f"metrics/{name}.json", json.loads(report.json()))

    def save_metrics_list(self, name: str, reports: List[MetricsReport]) -> None:
        self._s.set_json(f"metrics/{name}.json", [json.loads(r.json()) for r in reports])

    def load_metrics(self, name: str) -> MetricsReport:
        return MetricsReport(**self._s.get_json(f"metrics/{name}.json"))

    def save_prediction(self, j: int, t: np.ndarray, y_pred: np.ndarray, y_meas: np.ndarray) -> None:
        d_y = y_pred.shape[1]
        header = ["t"] + [f"y{i + 1}_pred" for i in range(d_y)] + [f"y{i + 1}" for i in range(d_y)]
        self._s.set_text(f"predictions/trajectory_{j:04d}.csv", _table_csv(header, [t, y_pred, y_meas]))

    def save_ekf_estimate(self, j: int, t: np.ndarray, means: np.ndarray) -> None:
        header = ["t"] + [f"x{i + 1}_est" for i in range(means.shape[1])]
        self._s.set_text(f"ekf/trajectory_{j:04d}.csv", _table_csv(header, [t, means]))
