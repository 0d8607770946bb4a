"""Pipeline configuration.

Everything the orchestrator needs in one validated dataclass; values come
from CLI flags, optionally seeded by a JSON config file (flags win).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from nbrepro.containerize import DEFAULT_BASE_IMAGE, DEFAULT_BUILD_TIMEOUT
from nbrepro.corpus import DEFAULT_VALIDATION_TIMEOUT
from nbrepro.executor import DEFAULT_EXECUTION_TIMEOUT


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    inputs: list[str] = field(default_factory=list)
    store_path: Path = Path("nbrepro.sqlite3")
    logdir: Path = Path("nbrepro_logs")
    artifacts_dir: Path = Path("nbrepro_artifacts")
    report_dir: Path = Path("nbrepro_reports")
    jobs: int = 1
    build_timeout: float = DEFAULT_BUILD_TIMEOUT
    exec_timeout: float = DEFAULT_EXECUTION_TIMEOUT
    validation_timeout: float = DEFAULT_VALIDATION_TIMEOUT
    base_image: str = DEFAULT_BASE_IMAGE
    alias_table_path: Path | None = None
    baseline_path: Path | None = None
    scan_magic_installs: bool = True
    docker_executable: str = "docker"
    cpu_limit: str | None = None
    memory_limit: str | None = None

    def validate(self) -> None:
        if self.jobs < 1:
            raise ConfigError("worker pool size must be at least 1")
        for name in ("build_timeout", "exec_timeout", "validation_timeout"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def from_file(cls, path: Path | str) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        config = cls(**{key: data[key] for key in data})
        return config.normalized()

    def normalized(self) -> "PipelineConfig":
        for name in ("store_path", "logdir", "artifacts_dir", "report_dir"):
            setattr(self, name, Path(getattr(self, name)))
        for name in ("alias_table_path", "baseline_path"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))
        self.inputs = list(self.inputs)
        return self
