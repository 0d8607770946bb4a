"""Shared builders for notebook documents, git fixture repos, and a fake
container runtime."""

from __future__ import annotations

import json
import shutil
import subprocess
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "setup" and report.skipped:
        outcome = "SKIP"
    elif report.when == "call":
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    else:
        return
    name = report.nodeid.split("::")[-1]
    print(f"[ACCEPTANCE] {name}: {outcome}", flush=True)


# ---- notebook document builders (nbformat v4 JSON) ---------------------------

def src_lines(text: str) -> list[str]:
    lines = text.split("\n")
    return [line + "\n" for line in lines[:-1]] + [lines[-1]]


def code_cell(source: str, outputs: list | None = None,
              execution_count: int | None = None) -> dict:
    return {"cell_type": "code", "execution_count": execution_count,
            "metadata": {}, "outputs": outputs or [],
            "source": src_lines(source)}


def markdown_cell(source: str) -> dict:
    return {"cell_type": "markdown", "metadata": {}, "source": src_lines(source)}


def raw_cell(source: str) -> dict:
    return {"cell_type": "raw", "metadata": {}, "source": src_lines(source)}


def stream_output(text: str, name: str = "stdout") -> dict:
    return {"output_type": "stream", "name": name, "text": src_lines(text)}


def execute_result(text: str, count: int = 1) -> dict:
    return {"output_type": "execute_result", "execution_count": count,
            "metadata": {}, "data": {"text/plain": src_lines(text)}}


def display_data(data: dict) -> dict:
    return {"output_type": "display_data", "metadata": {}, "data": data}


def error_output(ename: str, evalue: str = "", traceback: list | None = None) -> dict:
    return {"output_type": "error", "ename": ename, "evalue": evalue,
            "traceback": traceback or []}


def notebook_doc(cells: list, kernel_name: str | None = "python3",
                 nbformat: int = 4, nbformat_minor: int = 5) -> dict:
    metadata = {}
    if kernel_name is not None:
        metadata["kernelspec"] = {"display_name": "Python 3",
                                  "language": "python", "name": kernel_name}
    return {"cells": cells, "metadata": metadata, "nbformat": nbformat,
            "nbformat_minor": nbformat_minor}


def notebook_bytes(cells: list, **kwargs) -> bytes:
    return json.dumps(notebook_doc(cells, **kwargs)).encode("utf-8")


# ---- git fixture repositories --------------------------------------------------

def git_available() -> bool:
    return shutil.which("git") is not None


def make_git_repo(path: Path, files: dict[str, str | bytes]) -> str:
    """Create a committed git repository from a file map; returns its file URL."""
    path.mkdir(parents=True, exist_ok=True)
    for rel, content in files.items():
        target = path / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content, encoding="utf-8")
    def git(*args):
        subprocess.run(["git", "-C", str(path), *args], check=True,
                       capture_output=True)
    git("init", "--quiet")
    git("-c", "user.email=fixtures@example.org", "-c", "user.name=Fixtures",
        "add", "-A")
    git("-c", "user.email=fixtures@example.org", "-c", "user.name=Fixtures",
        "commit", "--quiet", "-m", "fixture")
    return path.resolve().as_uri()


requires_git = pytest.mark.skipif(not git_available(), reason="git not available")


# ---- container runtime gating ---------------------------------------------------

def docker_available() -> bool:
    if shutil.which("docker") is None:
        return False
    try:
        probe = subprocess.run(["docker", "version"], capture_output=True,
                               timeout=30)
    except (OSError, subprocess.TimeoutExpired):
        return False
    return probe.returncode == 0


requires_docker = pytest.mark.skipif(
    not docker_available(),
    reason="container runtime not available; end-to-end stage is gated")


# ---- fake container runtime -----------------------------------------------------

class FakeCompleted:
    def __init__(self, returncode: int = 0, stdout: str = "", stderr: str = ""):
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr


class FakeDocker:
    """In-memory stand-in for the container runtime CLI wrapper.

    Tracks containers/images per repository label and records every call so
    tests can assert on clean-room behavior without a daemon.
    """

    def __init__(self, available: bool = True):
        self._available = available
        self.containers: dict[str, str] = {}  # name -> label
        self.images: set[str] = set()
        self.calls: list[tuple] = []
        self.run_results: list = []
        self.copy_payloads: dict[str, bytes] = {}

    def available(self) -> bool:
        self.calls.append(("available",))
        return self._available

    def ensure_available(self) -> None:
        from nbrepro.containerize import ContainerRuntimeUnavailable
        if not self._available:
            raise ContainerRuntimeUnavailable("fake runtime is down")

    def build(self, tag, dockerfile, context, timeout=None):
        self.calls.append(("build", tag))
        self.images.add(tag)
        return FakeCompleted(0, stdout=f"built {tag}")

    def list_images(self, repository):
        self.calls.append(("list_images", repository))
        return [tag for tag in sorted(self.images)
                if tag.startswith(repository + ":")]

    def list_containers(self, label):
        self.calls.append(("list_containers", label))
        value = label.split("=", 1)[1]
        return [name for name, lab in sorted(self.containers.items())
                if lab == value]

    def remove_container(self, name_or_id):
        self.calls.append(("remove_container", name_or_id))
        self.containers.pop(name_or_id, None)

    def remove_image(self, reference):
        self.calls.append(("remove_image", reference))
        self.images.discard(reference)

    def run_container(self, image, command, run_args, timeout=None):
        self.calls.append(("run_container", image, tuple(command)))
        name = run_args[run_args.index("--name") + 1]
        label = next((a.split("=", 1)[1] for a in run_args
                      if a.startswith("nbrepro.repository_id=")), "")
        self.containers[name] = label
        if self.run_results:
            return self.run_results.pop(0)
        return FakeCompleted(0)

    def copy_from_container(self, container, source, destination):
        self.calls.append(("copy_from_container", container, source))
        payload = self.copy_payloads.get(source)
        if payload is None:
            return False
        Path(destination).parent.mkdir(parents=True, exist_ok=True)
        Path(destination).write_bytes(payload)
        return True
