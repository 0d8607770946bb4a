"""Deterministic container build recipes and clean-room image builds.

The recipe text is a pure function of the dependency specification and the
pipeline version: same inputs, same bytes, on any host. Before a build,
every container and image previously tagged for the repository is removed
so no cached layer can mask a dependency conflict. The container runtime is
driven exclusively through its command-line interface.
"""

from __future__ import annotations

import logging
import re
import subprocess
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from nbrepro import __version__
from nbrepro.depinfer import DependencySpec

logger = logging.getLogger(__name__)

DEFAULT_BASE_IMAGE = "python:3.10-slim"
DEFAULT_BUILD_TIMEOUT = 1200.0
IMAGE_REPOSITORY_PREFIX = "repro"
SYNTHESIZED_MANIFEST_NAME = "requirements.synthesized.txt"
MANIFEST_IMAGE_PATH = "/opt/nbrepro/requirements.synthesized.txt"

# Minimal fixed utility layer: enough native toolchain for common source
# distributions to compile, nothing repository-specific.
_SYSTEM_PACKAGES = ("build-essential", "gcc", "g++", "git", "libffi-dev",
                    "libssl-dev", "pkg-config")
_EXECUTION_TOOLCHAIN = ("jupyter-core", "nbconvert", "nbclient", "ipykernel")

_PIP_FAILURE_RE = re.compile(
    r"No matching distribution found|Could not find a version that satisfies|"
    r"error: subprocess-exited-with-error|pip install --no-cache-dir -r",
    re.IGNORECASE)
_BASE_IMAGE_FAILURE_RE = re.compile(
    r"pull access denied|manifest unknown|manifest for .+ not found|"
    r"failed to resolve source metadata|repository does not exist|"
    r"error response from daemon: .*not found", re.IGNORECASE)


class BuildPhase(Enum):
    BASE_IMAGE = "BaseImage"
    DEPENDENCY_INSTALL = "DependencyInstall"
    TIMEOUT = "Timeout"
    OTHER = "Other"


@dataclass(frozen=True)
class BuildFailure:
    phase: BuildPhase
    log_excerpt: str


@dataclass(frozen=True)
class BuildRecipe:
    dockerfile_text: str
    context_dir: Path
    image_tag: str
    manifest_text: str
    manifest_name: str = SYNTHESIZED_MANIFEST_NAME


class ContainerRuntimeUnavailable(Exception):
    pass


class DockerCli:
    """Thin subprocess wrapper around the container runtime CLI."""

    def __init__(self, executable: str = "docker") -> None:
        self.executable = executable

    def _run(self, args: list[str], timeout: float | None = None
             ) -> subprocess.CompletedProcess:
        return subprocess.run([self.executable, *args], capture_output=True,
                              text=True, timeout=timeout)

    def available(self) -> bool:
        try:
            return self._run(["version", "--format", "{{.Server.Version}}"],
                             timeout=30).returncode == 0
        except (OSError, subprocess.TimeoutExpired):
            return False

    def ensure_available(self) -> None:
        if not self.available():
            raise ContainerRuntimeUnavailable(
                f"container runtime {self.executable!r} is not reachable")

    def build(self, tag: str, dockerfile: Path, context: Path,
              timeout: float | None = None) -> subprocess.CompletedProcess:
        return self._run(
            ["build", "--no-cache", "-t", tag, "-f", str(dockerfile), str(context)],
            timeout=timeout)

    def list_images(self, repository: str) -> list[str]:
        result = self._run(["images", "--format", "{{.Repository}}:{{.Tag}}",
                            repository])
        if result.returncode != 0:
            return []
        return [line for line in result.stdout.splitlines() if line.strip()]

    def list_containers(self, label: str) -> list[str]:
        result = self._run(["ps", "-aq", "--filter", f"label={label}"])
        if result.returncode != 0:
            return []
        return [line for line in result.stdout.splitlines() if line.strip()]

    def remove_container(self, name_or_id: str) -> None:
        self._run(["rm", "-f", name_or_id])

    def remove_image(self, reference: str) -> None:
        self._run(["rmi", "-f", reference])

    def run_container(self, image: str, command: list[str], run_args: list[str],
                      timeout: float | None = None
                      ) -> subprocess.CompletedProcess | None:
        """Run to completion; None signals the wall-clock bound was hit."""
        try:
            return self._run(["run", *run_args, image, *command], timeout=timeout)
        except subprocess.TimeoutExpired:
            return None

    def copy_from_container(self, container: str, source: str,
                            destination: Path) -> bool:
        result = self._run(["cp", f"{container}:{source}", str(destination)])
        return result.returncode == 0 and destination.exists()


def image_repository_for(repository_id: str) -> str:
    return f"{IMAGE_REPOSITORY_PREFIX}/{repository_id}"


def image_tag_for(repository_id: str, run_id: str) -> str:
    return f"{image_repository_for(repository_id)}:{run_id}"


def generate_build_recipe(spec: DependencySpec, run_id: str, *,
                          context_dir: Path | str = ".",
                          base_image: str = DEFAULT_BASE_IMAGE) -> BuildRecipe:
    """Container recipe for one repository's synthesized environment.

    The recipe pins the base image, installs the synthesized manifest and
    the notebook execution toolchain, copies the repository tree in, and
    sets a non-interactive working directory. Generation is infallible;
    problems surface at build time.
    """
    lines = [
        f"FROM {base_image}",
        "",
        f'LABEL nbrepro.version="{__version__}"',
        f'LABEL nbrepro.repository_id="{spec.repository_id}"',
        "",
        "ENV DEBIAN_FRONTEND=noninteractive \\",
        "    PIP_DISABLE_PIP_VERSION_CHECK=1 \\",
        "    PYTHONUNBUFFERED=1",
        "",
        "RUN apt-get update \\",
        f"    && apt-get install -y --no-install-recommends {' '.join(_SYSTEM_PACKAGES)} \\",
        "    && rm -rf /var/lib/apt/lists/*",
        "",
        f"RUN pip install --no-cache-dir {' '.join(_EXECUTION_TOOLCHAIN)}",
        "",
        f"COPY {SYNTHESIZED_MANIFEST_NAME} {MANIFEST_IMAGE_PATH}",
    ]
    if spec.requirements:
        lines.append(f"RUN pip install --no-cache-dir -r {MANIFEST_IMAGE_PATH}")
    lines += [
        "",
        "COPY . /workspace",
        "WORKDIR /workspace",
        "",
        'CMD ["python", "--version"]',
    ]
    return BuildRecipe(
        dockerfile_text="\n".join(lines) + "\n",
        context_dir=Path(context_dir),
        image_tag=image_tag_for(spec.repository_id, run_id),
        manifest_text=spec.synthesized_manifest,
    )


def write_recipe(recipe: BuildRecipe, dockerfile_path: Path) -> Path:
    """Materialize the manifest into the build context and the Dockerfile
    next to it (the Dockerfile itself stays outside the tree)."""
    manifest_path = recipe.context_dir / recipe.manifest_name
    manifest_path.write_text(recipe.manifest_text, encoding="utf-8")
    dockerfile_path.parent.mkdir(parents=True, exist_ok=True)
    dockerfile_path.write_text(recipe.dockerfile_text, encoding="utf-8")
    return dockerfile_path


def cleanup_previous(repository_id: str, docker: DockerCli) -> None:
    """Remove every container and image tagged for this repository.

    Idempotent: a second call finds nothing and is a no-op. An unreachable
    runtime raises, which callers record as a failed build.
    """
    docker.ensure_available()
    label = f"nbrepro.repository_id={repository_id}"
    for container in docker.list_containers(label):
        logger.info("removing stale container %s", container)
        docker.remove_container(container)
    for image in docker.list_images(image_repository_for(repository_id)):
        logger.info("removing stale image %s", image)
        docker.remove_image(image)


def build_image(recipe: BuildRecipe, docker: DockerCli, *,
                timeout: float = DEFAULT_BUILD_TIMEOUT,
                dockerfile_path: Path | None = None,
                log_path: Path | None = None) -> str | BuildFailure:
    """Build the image; returns its tag, or a classified BuildFailure.

    The full build log is persisted for every attempt, success or failure.
    """
    if dockerfile_path is None:
        dockerfile_path = recipe.context_dir.parent / "Dockerfile"
    write_recipe(recipe, dockerfile_path)

    timed_out = False
    try:
        result = docker.build(recipe.image_tag, dockerfile_path,
                              recipe.context_dir, timeout=timeout)
        log_text = f"{result.stdout}\n{result.stderr}"
        exit_code = result.returncode
    except subprocess.TimeoutExpired as exc:
        timed_out = True
        captured = [part for part in (exc.stdout, exc.stderr) if part]
        log_text = "\n".join(
            p.decode("utf-8", "replace") if isinstance(p, bytes) else p
            for p in captured)
        exit_code = -1

    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text(log_text, encoding="utf-8")

    if timed_out:
        return BuildFailure(BuildPhase.TIMEOUT,
                            _log_excerpt(log_text) or f"build exceeded {timeout}s")
    if exit_code == 0:
        return recipe.image_tag
    return BuildFailure(_classify_build_failure(log_text), _log_excerpt(log_text))


def _classify_build_failure(log_text: str) -> BuildPhase:
    if _BASE_IMAGE_FAILURE_RE.search(log_text):
        return BuildPhase.BASE_IMAGE
    if _PIP_FAILURE_RE.search(log_text):
        return BuildPhase.DEPENDENCY_INSTALL
    return BuildPhase.OTHER


def _log_excerpt(log_text: str, max_lines: int = 30) -> str:
    lines = [line for line in log_text.splitlines() if line.strip()]
    return "\n".join(lines[-max_lines:])
