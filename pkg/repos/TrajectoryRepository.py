import io
from typing import Any
from typing import Dict
from typing import List
from typing import Optional

import numpy as np

from repos.storage import Storage
from structnode.benchsys import Trajectory
from structnode.errors import ConfigurationError

MANIFEST = "manifest.json"


def trajectory_header(d_y: int, d_u: int, d_x: int) -> List[str]:
    return (
        ["t"]
        + [f"y{i + 1}" for i in range(d_y)]
        + [f"u{i + 1}" for i in range(d_u)]
        + [f"x{i + 1}" for i in range(d_x)]
    )


def trajectory_to_csv(tr: Trajectory) -> str:
    d_u = 0 if tr.u is None else tr.u.shape[1]
    d_x = 0 if tr.x is None else tr.x.shape[1]
    columns = [tr.t[:, None], tr.y] + ([tr.u] if d_u else []) + ([tr.x] if d_x else [])
    buffer = io.StringIO()
    np.savetxt(
        buffer,
        np.hstack(columns),
        delimiter=",",
        fmt="%.17g",
        header=",".join(trajectory_header(tr.y.shape[1], d_u, d_x)),
        comments="",
    )
    return buffer.getvalue()


def trajectory_from_csv(text: str, inputs: Optional[Dict[str, float]] = None) -> Trajectory:
    lines = text.splitlines()
    if not lines:
        raise ConfigurationError("empty trajectory file")
    header = lines[0].strip().split(",")
    if header[0] != "t":
        raise ConfigurationError(f"trajectory header must start with t, got {header[0]}")
    data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    if data.shape[1] != len(header):
        raise ConfigurationError(f"{data.shape[1]} columns for a header of {len(header)}")

    def columns(prefix: str):
        index = [i for i, name in enumerate(header) if name[0] == prefix and name[1:].isdigit()]
        return data[:, index] if index else None

    y = columns("y")
    if y is None:
        raise ConfigurationError("trajectory file has no output columns")
    return Trajectory(t=data[:, 0], y=y, u=columns("u"), x=columns("x"), inputs=inputs or {})


class TrajectoryRepository:
    """Datasets as one CSV per trajectory plus a manifest"""

    def __init__(self, storage: Storage):
        self._s = storage

    def write_dataset(self, name: str, trajectories: List[Trajectory], manifest: Dict[str, Any]) -> List[str]:
        files = []
        for j, tr in enumerate(trajectories):
            key = f"{name}/trajectory_{j:04d}.csv"
            self._s.set_text(key, trajectory_to_csv(tr))
            files.append({"file": key, "inputs": tr.inputs})
        self._s.set_json(f"{name}/{MANIFEST}", {**manifest, "trajectories": files})
        return [f["file"] for f in files]

    def read_manifest(self, name: str) -> Dict[str, Any]:
        return self._s.get_json(f"{name}/{MANIFEST}")

    def read_dataset(self, name: str) -> List[Trajectory]:
        manifest = self.read_manifest(name)
        return [
            trajectory_from_csv(self._s.get_text(entry["file"]), entry.get("inputs", {}))
            for entry in manifest["trajectories"]
        ]
