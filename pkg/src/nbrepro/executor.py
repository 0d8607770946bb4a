"""Notebook execution inside the repository's container image.

Runs each notebook through the in-image converter in execute mode with
error tolerance, so failing cells still yield an output artifact; the
artifact is copied out of the container, parsed, and mined for structured
per-cell error records.
"""

from __future__ import annotations

import logging
import re
import shlex
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import TYPE_CHECKING

from nbrepro import notebook as nbmodel
from nbrepro.notebook import OutputKind, ParsedNotebook

if TYPE_CHECKING:
    from nbrepro.containerize import DockerCli
    from nbrepro.store import NotebookDescriptor

logger = logging.getLogger(__name__)

DEFAULT_EXECUTION_TIMEOUT = 600.0
FALLBACK_KERNEL = "python3"
CONTAINER_WORKSPACE = "/workspace"

_KERNEL_NOT_FOUND_RE = re.compile(
    r"NoSuchKernel|No such kernel named|jupyter_client\.kernelspec", re.IGNORECASE)
_NOTEBOOK_NOT_FOUND_RE = re.compile(
    r"pattern matched no files|No such file or directory.*\.ipynb|"
    r"\.ipynb.*No such file or directory", re.IGNORECASE)
_STDERR_EXCEPTION_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_.]*(?:Error|Exception))\b[:.]?",
                                  re.MULTILINE)


class ExecutionStatus(Enum):
    SUCCESS = "Success"
    ERRORED_BUT_COMPLETED = "ErroredButCompleted"
    KERNEL_NOT_FOUND = "KernelNotFound"
    NOTEBOOK_NOT_FOUND = "NotebookNotFound"
    TIMEOUT = "Timeout"
    SKIPPED = "Skipped"


class ErrorCategory(Enum):
    DEPENDENCY = "Dependency"
    DATA = "Data"
    CODE = "Code"
    LOGIC = "Logic"


# Failure-mode table keyed on the exception name with spacing removed, so
# legacy spellings like "File Not Found Error" resolve too.
_CATEGORY_TABLE: dict[str, ErrorCategory] = {
    "ModuleNotFoundError": ErrorCategory.DEPENDENCY,
    "ImportError": ErrorCategory.DEPENDENCY,
    "InstallDependencyError": ErrorCategory.DEPENDENCY,
    "FileNotFoundError": ErrorCategory.DATA,
    "PermissionError": ErrorCategory.DATA,
    "SyntaxError": ErrorCategory.CODE,
    "TypeError": ErrorCategory.CODE,
    "AttributeError": ErrorCategory.CODE,
    "NameError": ErrorCategory.LOGIC,
    "ValueError": ErrorCategory.LOGIC,
    "KeyError": ErrorCategory.LOGIC,
}

KNOWN_ERROR_TYPES = frozenset(_CATEGORY_TABLE)


@dataclass(frozen=True)
class ExecutionError:
    """One distinct (exception type, cell) failure observed at runtime.

    ``cell_index`` is the 0-based position among the notebook's code cells;
    ``count`` accumulates repeats of the same exception type in that cell.
    """

    error_type: str
    category: ErrorCategory
    message: str
    cell_index: int
    count: int = 1


@dataclass
class ExecutionRecord:
    notebook_id: str
    run_id: str
    status: ExecutionStatus
    duration_s: float | None
    code_cell_count: int
    markdown_code_ratio: float | None
    errors: tuple[ExecutionError, ...] = ()
    executed_notebook_path: str | None = None


def classify_error(error_type: str, message: str = "") -> ErrorCategory:
    """Map a runtime exception name onto the failure taxonomy.

    Unknown names land in Logic; callers that care can consult
    KNOWN_ERROR_TYPES to flag them.
    """
    key = error_type.replace(" ", "")
    category = _CATEGORY_TABLE.get(key)
    if category is None:
        logger.debug("unrecognized error type %r categorized as Logic", error_type)
        return ErrorCategory.LOGIC
    return category


def extract_errors(executed: ParsedNotebook) -> list[ExecutionError]:
    """Structured error records from an executed notebook's error outputs.

    One record per (exception type, code-cell position); repeats within a
    cell sum into the count. The message keeps only the first line of the
    exception value.
    """
    aggregated: dict[tuple[str, int], ExecutionError] = {}
    for ordinal, cell in enumerate(nbmodel.code_cells(executed)):
        for output in cell.outputs:
            if output.kind is not OutputKind.ERROR:
                continue
            key = (output.error_name, ordinal)
            existing = aggregated.get(key)
            if existing is not None:
                aggregated[key] = ExecutionError(
                    error_type=existing.error_type,
                    category=existing.category,
                    message=existing.message,
                    cell_index=existing.cell_index,
                    count=existing.count + 1,
                )
                continue
            if output.error_name not in KNOWN_ERROR_TYPES:
                logger.warning("unrecognized error type %r in cell %d",
                               output.error_name, ordinal)
            message = output.error_value.split("\n", 1)[0]
            aggregated[key] = ExecutionError(
                error_type=output.error_name,
                category=classify_error(output.error_name, message),
                message=message,
                cell_index=ordinal,
            )
    return sorted(aggregated.values(), key=lambda e: (e.cell_index, e.error_type))


@dataclass
class _ConvertAttempt:
    exit_code: int
    stdout: str
    stderr: str
    timed_out: bool = False


def _nbconvert_command(notebook_name: str, output_name: str,
                       kernel_name: str | None) -> list[str]:
    command = [
        "jupyter", "nbconvert", "--to", "notebook", "--execute",
        "--allow-errors", "--ExecutePreprocessor.timeout=-1",
        "--output", output_name,
    ]
    if kernel_name is not None:
        command.append(f"--ExecutePreprocessor.kernel_name={kernel_name}")
    command.append(notebook_name)
    return command


def execute_notebook(
    docker: "DockerCli",
    image: str,
    descriptor: "NotebookDescriptor",
    *,
    run_id: str,
    artifacts_dir: Path,
    log_path: Path | None = None,
    timeout: float = DEFAULT_EXECUTION_TIMEOUT,
    cpu_limit: str | None = None,
    memory_limit: str | None = None,
) -> ExecutionRecord:
    """Execute one notebook in the image and capture its outcome.

    The working directory is the notebook's own directory inside the image
    (the common relative-path assumption). A kernelspec missing in-image is
    retried once on the default kernel; failing again is KernelNotFound.
    The executed artifact lands under ``artifacts_dir/<run_id>/<relative_path>``.
    """
    rel = PurePosixPath(descriptor.relative_path)
    in_container_dir = str(PurePosixPath(CONTAINER_WORKSPACE) / rel.parent)
    executed_name = f"{rel.stem}.executed.ipynb"
    container_name = f"nbrepro-{run_id}-{descriptor.notebook_id}"

    started = time.monotonic()
    attempt = _run_convert(
        docker, image, container_name, in_container_dir, rel.name, executed_name,
        kernel_name=None, timeout=timeout, repository_label=descriptor.repository_id,
        cpu_limit=cpu_limit, memory_limit=memory_limit,
    )
    if (attempt.exit_code != 0 and not attempt.timed_out
            and _KERNEL_NOT_FOUND_RE.search(attempt.stderr)):
        logger.info("kernel %r not in image for %s, retrying on %s",
                    descriptor.kernel_name, descriptor.relative_path, FALLBACK_KERNEL)
        docker.remove_container(container_name)
        attempt = _run_convert(
            docker, image, container_name, in_container_dir, rel.name, executed_name,
            kernel_name=FALLBACK_KERNEL, timeout=timeout,
            repository_label=descriptor.repository_id,
            cpu_limit=cpu_limit, memory_limit=memory_limit,
        )
    duration = time.monotonic() - started

    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text(
            f"$ {' '.join(shlex.quote(c) for c in _nbconvert_command(rel.name, executed_name, None))}\n"
            f"exit={attempt.exit_code} timed_out={attempt.timed_out}\n"
            f"--- stdout ---\n{attempt.stdout}\n--- stderr ---\n{attempt.stderr}\n",
            encoding="utf-8",
        )

    record = ExecutionRecord(
        notebook_id=descriptor.notebook_id,
        run_id=run_id,
        status=ExecutionStatus.SUCCESS,
        duration_s=round(duration, 3),
        code_cell_count=descriptor.code_cell_count or 0,
        markdown_code_ratio=descriptor.markdown_code_ratio,
    )
    try:
        if attempt.timed_out:
            record.status = ExecutionStatus.TIMEOUT
            return record
        if attempt.exit_code != 0:
            record.status = _failure_status(attempt.stderr)
            if record.status is ExecutionStatus.ERRORED_BUT_COMPLETED:
                record.errors = (_error_from_stderr(attempt.stderr),)
            return record

        artifact = _copy_out_artifact(
            docker, container_name,
            f"{in_container_dir}/{executed_name}",
            artifacts_dir / run_id / descriptor.relative_path,
        )
        if artifact is None:
            record.status = ExecutionStatus.NOTEBOOK_NOT_FOUND
            return record
        record.executed_notebook_path = str(artifact)
        try:
            executed = nbmodel.parse_notebook(artifact.read_bytes())
        except nbmodel.ParseError as exc:
            # Converter exited cleanly but its artifact does not model;
            # record the anomaly instead of failing the repository.
            logger.warning("executed artifact for %s does not parse: %s",
                           descriptor.relative_path, exc)
            record.status = ExecutionStatus.ERRORED_BUT_COMPLETED
            record.errors = (ExecutionError(
                error_type="ArtifactParseError",
                category=classify_error("ArtifactParseError"),
                message=str(exc)[:500], cell_index=0),)
            return record
        errors = extract_errors(executed)
        record.code_cell_count = len(nbmodel.code_cells(executed))
        record.markdown_code_ratio = nbmodel.markdown_code_ratio(executed)
        record.errors = tuple(errors)
        record.status = (ExecutionStatus.SUCCESS if not errors
                         else ExecutionStatus.ERRORED_BUT_COMPLETED)
        return record
    finally:
        docker.remove_container(container_name)


def _run_convert(docker: "DockerCli", image: str, container_name: str,
                 workdir: str, notebook_name: str, output_name: str, *,
                 kernel_name: str | None, timeout: float, repository_label: str,
                 cpu_limit: str | None, memory_limit: str | None) -> _ConvertAttempt:
    run_args = ["--name", container_name, "--workdir", workdir,
                "--label", f"nbrepro.repository_id={repository_label}"]
    if cpu_limit:
        run_args += ["--cpus", cpu_limit]
    if memory_limit:
        run_args += ["--memory", memory_limit]
    command = _nbconvert_command(notebook_name, output_name, kernel_name)
    result = docker.run_container(image, command, run_args, timeout=timeout)
    if result is None:
        return _ConvertAttempt(exit_code=-1, stdout="", stderr="", timed_out=True)
    return _ConvertAttempt(exit_code=result.returncode, stdout=result.stdout,
                           stderr=result.stderr)


def _failure_status(stderr: str) -> ExecutionStatus:
    if _KERNEL_NOT_FOUND_RE.search(stderr):
        return ExecutionStatus.KERNEL_NOT_FOUND
    if _NOTEBOOK_NOT_FOUND_RE.search(stderr):
        return ExecutionStatus.NOTEBOOK_NOT_FOUND
    return ExecutionStatus.ERRORED_BUT_COMPLETED


def _error_from_stderr(stderr: str) -> ExecutionError:
    # Converter died without writing an artifact (e.g. the kernel crashed);
    # attribute the failure to cell 0 with whatever exception name surfaced.
    match = _STDERR_EXCEPTION_RE.search(stderr)
    error_type = match.group(1).split(".")[-1] if match else "ExecutionError"
    last_line = stderr.strip().split("\n")[-1] if stderr.strip() else ""
    return ExecutionError(
        error_type=error_type,
        category=classify_error(error_type),
        message=last_line[:500],
        cell_index=0,
    )


def _copy_out_artifact(docker: "DockerCli", container_name: str,
                       container_path: str, destination: Path) -> Path | None:
    destination.parent.mkdir(parents=True, exist_ok=True)
    if docker.copy_from_container(container_name, container_path, destination):
        return destination
    return None
