import json
from pathlib import Path
from typing import Any
from typing import List

from structnode.errors import MissingArtifactError


class Storage:
    """A run directory; keys are paths relative to it"""

    def __init__(self, root: Path):
        self._root = root

    @classmethod
    def init(cls, path: str):
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        return cls(root)

    @property
    def root(self) -> Path:
        return self._root

    def path(self, key: str) -> Path:
        return self._root / key

    def exists(self, key: str) -> bool:
        return self.path(key).exists()

    def get_all_keys(self, pattern: str) -> List[str]:
        return sorted(str(p.relative_to(self._root)) for p in self._root.glob(pattern))

    def get_text(self, key: str) -> str:
        target = self.path(key)
        if not target.exists():
            raise MissingArtifactError(f"{target} does not exist")
        return target.read_text()

    def set_text(self, key: str, text: str) -> Path:
        target = self.path(key)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text)
        return target

    def get_json(self, key: str) -> Any:
        text = self.get_text(key)
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise MissingArtifactError(f"{self.path(key)} is not valid JSON: line {e.lineno}: {e.msg}") from e

    def set_json(self, key: str, data: Any) -> Path:
        return self.set_text(key, json.dumps(data, indent=2, sort_keys=True) + "\n")
