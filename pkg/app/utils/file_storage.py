import json
import logging
import platform
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel

from app.schema.report import RunManifest

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "pydantic-settings")


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class ArtifactStorage:
    """
    产物存储

    CSV 用 17 位有效数字，JSON 按键排序；正文不含时间戳，重跑得到相同字节，
    时间戳只写入 manifest。
    """

    def __init__(self, base_dir: str | Path = "runs/latest"):
        self.base_dir = Path(base_dir)
        self.artifacts: List[str] = []
        self.started_at = datetime.now(timezone.utc).isoformat()

    def ensure_dir(self, subfolder: str = "") -> Path:
        """确保目录存在"""
        target = self.base_dir / subfolder if subfolder else self.base_dir
        target.mkdir(parents=True, exist_ok=True)
        return target

    def get_file_path(self, filename: str, subfolder: str = "") -> Path:
        return self.ensure_dir(subfolder) / filename

    def _register(self, path: Path) -> None:
        name = path.relative_to(self.base_dir).as_posix()
        if name not in self.artifacts:
            self.artifacts.append(name)

    def write_table(self, frame: pd.DataFrame, filename: str, subfolder: str = "") -> Path:
        path = self.get_file_path(filename, subfolder)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        self._register(path)
        logger.debug(f"写出表格 {path}")
        return path

    def write_frame(self, frame: pd.DataFrame, name: str, formats: Sequence[str] = ("csv",),
                    subfolder: str = "") -> List[Path]:
        """按 output.formats 写出同一张表；json 按列存放"""
        written = []
        for fmt in formats:
            if fmt == "csv":
                written.append(self.write_table(frame, f"{name}.csv", subfolder))
            elif fmt == "json":
                written.append(self.write_json(frame.to_dict(orient="list"), f"{name}.json", subfolder))
            else:
                raise ValueError(f"不支持的输出格式 {fmt}")
        return written

    def write_json(self, payload: Any, filename: str, subfolder: str = "") -> Path:
        if isinstance(payload, BaseModel):
            payload = payload.model_dump(mode="json")
        path = self.get_file_path(filename, subfolder)
        path.write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        self._register(path)
        return path

    def write_manifest(self, config_hash: str, seed: int, experiment: str, exit_code: int = 0,
                       filename: str = "manifest.json") -> RunManifest:
        manifest = RunManifest(
            config_hash=config_hash,
            seed=seed,
            experiment=experiment,
            versions=package_versions(),
            artifacts=sorted(self.artifacts),
            started_at=self.started_at,
            finished_at=datetime.now(timezone.utc).isoformat(),
            exit_code=exit_code,
        )
        path = self.get_file_path(filename)
        path.write_text(json.dumps(manifest.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        logger.info(f"manifest 已写出: {path} ({len(manifest.artifacts)} 个产物, config_hash={config_hash[:12]})")
        return manifest

    def read_json(self, filename: str, subfolder: str = "") -> Optional[Dict[str, Any]]:
        path = (self.base_dir / subfolder / filename) if subfolder else self.base_dir / filename
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))
