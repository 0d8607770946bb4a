"""Four-stage orchestration over a repository corpus.

Per repository: validate -> acquire -> discover -> infer -> recipe ->
cleanup -> build -> execute -> compare. Repository failures become data,
never corpus aborts; cross-repository parallelism lives here and nowhere
else. Every stage appends machine-parseable events to the invocation's
event log alongside the raw tool logs.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from nbrepro import compare as comparemod
from nbrepro import containerize, corpus, depinfer, executor, notebook as nbmodel
from nbrepro.config import PipelineConfig
from nbrepro.containerize import BuildFailure, DockerCli
from nbrepro.executor import ExecutionStatus
from nbrepro.store import (
    NotebookDescriptor,
    ProvisioningStatus,
    Repository,
    RunRecord,
    Store,
    new_invocation_id,
    utc_now_iso,
)

logger = logging.getLogger(__name__)

EXIT_COMPLETE = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


class PredecessorStateMissing(Exception):
    """A subcommand was invoked before the stage it depends on."""


@dataclass
class RepositoryResult:
    """Machinery outcome for one repository; failed builds and errored
    notebooks are data and still count as completed assessments."""

    url: str
    repository_id: str | None = None
    run_id: str | None = None
    completed: bool = True
    degraded_reason: str | None = None


class EventLog:
    """Line-delimited JSON event records, one file per store location."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self._lock = threading.Lock()
        path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, stage: str, event: str, **details) -> None:
        record = {"ts": utc_now_iso(), "stage": stage, "event": event, **details}
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class Pipeline:
    def __init__(self, config: PipelineConfig, store: Store,
                 docker: DockerCli | None = None) -> None:
        self.config = config
        self.store = store
        self.docker = docker or DockerCli(config.docker_executable)
        self.events = EventLog(Path(config.logdir) / "events.ndjson")
        self.invocation_id = new_invocation_id()
        self._aliases = depinfer.load_alias_table(config.alias_table_path)

    # ---- stage 1 + 2: discovery, validation, inference ----------------------

    def infer_repository(self, raw_input: str) -> RepositoryResult:
        url = self._canonical_input(raw_input)
        result = RepositoryResult(url=url)
        self.events.emit("infer", "start", url=url)

        try:
            validation = corpus.validate_repository(
                url, timeout=self.config.validation_timeout)
        except corpus.TransientNetworkError as exc:
            self.events.emit("infer", "validation_timeout", url=url, error=str(exc))
            result.completed = False
            result.degraded_reason = f"validation timed out: {exc}"
            return result

        repository_id = corpus.repository_id_for(url)
        result.repository_id = repository_id
        run = RunRecord(
            run_id=corpus.new_run_id(),
            repository_id=repository_id,
            invocation_id=self.invocation_id,
            started_at=utc_now_iso(),
        )
        result.run_id = run.run_id

        if validation is not corpus.ValidationResult.ACCESSIBLE:
            self.store.upsert_repository(Repository(
                repository_id=repository_id, url=corpus.normalize_url(url),
                accessible=False))
            self.store.insert_run(run)
            self.store.finish_run(run, ProvisioningStatus.INVALID_URL,
                                  reason=validation.value)
            self.events.emit("infer", "invalid_url", url=url,
                             repository_id=repository_id, reason=validation.value)
            return result

        try:
            repo = corpus.acquire_repository(
                url, Path(self.config.artifacts_dir) / "repos", self.store)
        except corpus.AcquisitionError as exc:
            # Transient: validation said accessible but the clone failed.
            self.store.upsert_repository(Repository(
                repository_id=repository_id, url=corpus.normalize_url(url),
                accessible=True))
            self.store.insert_run(run)
            self.store.finish_run(run, ProvisioningStatus.PENDING,
                                  reason=f"acquisition failed: {exc}")
            self.events.emit("infer", "acquisition_failed", url=url, error=str(exc))
            result.completed = False
            result.degraded_reason = str(exc)
            return result

        tree = Path(repo.local_path or "")
        run = RunRecord(
            run_id=run.run_id, repository_id=repository_id,
            invocation_id=self.invocation_id, started_at=run.started_at,
            revision=corpus.current_revision(tree),
        )
        self.store.insert_run(run)

        descriptors = corpus.discover_notebooks(repo, self.store)
        self.events.emit("infer", "discovered", repository_id=repository_id,
                         notebooks=len(descriptors))
        if not descriptors:
            self.store.finish_run(run, ProvisioningStatus.NO_PYTHON_NOTEBOOKS)
            return result

        parsed, parsed_paths = self._parse_notebooks(tree, descriptors)
        spec = depinfer.synthesize_dependency_spec(
            self.store.get_repository(repository_id) or repo,
            parsed,
            notebook_paths=parsed_paths,
            tree=tree,
            scan_magic_installs=self.config.scan_magic_installs,
            aliases=self._aliases,
        )
        recipe = containerize.generate_build_recipe(
            spec, run.run_id, context_dir=tree, base_image=self.config.base_image)
        containerize.write_recipe(recipe, tree.parent / "Dockerfile")
        self.events.emit("infer", "synthesized", repository_id=repository_id,
                         requirements=len(spec.requirements))
        return result

    def _parse_notebooks(self, tree: Path, descriptors: list[NotebookDescriptor]
                         ) -> tuple[list, list[str]]:
        parsed, paths = [], []
        for descriptor in descriptors:
            if descriptor.parse_failed:
                continue
            try:
                nb = nbmodel.parse_notebook(
                    (tree / descriptor.relative_path).read_bytes())
            except (nbmodel.ParseError, OSError):
                continue
            parsed.append(nb)
            paths.append(descriptor.relative_path)
        return parsed, paths

    def _canonical_input(self, raw_input: str) -> str:
        candidate = Path(raw_input)
        if "://" not in raw_input and candidate.exists():
            return corpus.local_path_to_url(candidate)
        return raw_input.strip()

    # ---- stage 3: clean-room build + execution ------------------------------

    def execute_run(self, run: RunRecord) -> RepositoryResult:
        repo = self.store.get_repository(run.repository_id)
        result = RepositoryResult(url=repo.url if repo else "",
                                  repository_id=run.repository_id,
                                  run_id=run.run_id)
        if repo is None or not repo.local_path:
            result.completed = False
            result.degraded_reason = "repository tree missing; rerun the infer stage"
            return result

        tree = Path(repo.local_path)
        logdir = Path(self.config.logdir) / run.run_id
        self.events.emit("execute", "cleanup", repository_id=repo.repository_id)
        try:
            containerize.cleanup_previous(repo.repository_id, self.docker)
        except containerize.ContainerRuntimeUnavailable as exc:
            self.store.finish_run(run, ProvisioningStatus.BUILD_FAILED,
                                  reason=f"container runtime unavailable: {exc}")
            self.events.emit("execute", "runtime_unavailable",
                             repository_id=repo.repository_id)
            result.completed = False
            result.degraded_reason = "container runtime unavailable"
            return result

        spec = self._resynthesize(repo)
        recipe = containerize.generate_build_recipe(
            spec, run.run_id, context_dir=tree, base_image=self.config.base_image)
        self.events.emit("execute", "build_start",
                         repository_id=repo.repository_id, tag=recipe.image_tag)
        built = containerize.build_image(
            recipe, self.docker, timeout=self.config.build_timeout,
            dockerfile_path=tree.parent / "Dockerfile",
            log_path=logdir / "build.log")
        if isinstance(built, BuildFailure):
            self.store.finish_run(
                run, ProvisioningStatus.BUILD_FAILED,
                reason=f"{built.phase.value}: {built.log_excerpt.splitlines()[-1] if built.log_excerpt else ''}")
            self.events.emit("execute", "build_failed",
                             repository_id=repo.repository_id,
                             phase=built.phase.value)
            return result

        descriptors = self.store.list_notebooks(repo.repository_id)
        statuses: list[ExecutionStatus] = []
        for descriptor in descriptors:
            self.events.emit("execute", "notebook_start",
                             notebook_id=descriptor.notebook_id,
                             relative_path=descriptor.relative_path)
            record = executor.execute_notebook(
                self.docker, built, descriptor,
                run_id=run.run_id,
                artifacts_dir=Path(self.config.artifacts_dir),
                log_path=logdir / f"{descriptor.notebook_id}.execution.log",
                timeout=self.config.exec_timeout,
                cpu_limit=self.config.cpu_limit,
                memory_limit=self.config.memory_limit,
            )
            self.store.insert_execution(record)
            statuses.append(record.status)
            self.events.emit("execute", "notebook_done",
                             notebook_id=descriptor.notebook_id,
                             status=record.status.value,
                             duration_s=record.duration_s)

        # An environment in which no notebook ever found a usable kernel is
        # a provisioning-level kernel failure, not a built environment.
        if statuses and all(s is ExecutionStatus.KERNEL_NOT_FOUND for s in statuses):
            self.store.finish_run(run, ProvisioningStatus.KERNEL_NOT_FOUND,
                                  image_reference=built)
        else:
            self.store.finish_run(run, ProvisioningStatus.ENVIRONMENT_BUILT,
                                  image_reference=built)
        return result

    def _resynthesize(self, repo: Repository):
        tree = Path(repo.local_path or "")
        descriptors = self.store.list_notebooks(repo.repository_id)
        parsed, paths = self._parse_notebooks(tree, descriptors)
        return depinfer.synthesize_dependency_spec(
            repo, parsed, notebook_paths=paths, tree=tree,
            scan_magic_installs=self.config.scan_magic_installs,
            aliases=self._aliases)

    # ---- stage 4: comparison -------------------------------------------------

    def compare_run(self, run: RunRecord) -> int:
        """Compare all executed artifacts of a run; returns rows written."""
        repo = self.store.get_repository(run.repository_id)
        if repo is None or not repo.local_path:
            return 0
        tree = Path(repo.local_path)
        logdir = Path(self.config.logdir) / run.run_id
        written = 0
        for record in self.store.list_executions(run.run_id):
            if record.executed_notebook_path is None:
                continue
            if self.store.get_metrics(record.notebook_id, run.run_id) is not None:
                continue
            descriptor = self.store.get_notebook(record.notebook_id)
            if descriptor is None or descriptor.parse_failed:
                continue
            try:
                original = nbmodel.parse_notebook(
                    (tree / descriptor.relative_path).read_bytes())
                executed = nbmodel.parse_notebook(
                    Path(record.executed_notebook_path).read_bytes())
            except (nbmodel.ParseError, OSError) as exc:
                logger.warning("cannot compare %s: %s",
                               descriptor.relative_path, exc)
                continue
            try:
                metrics, comparisons = comparemod.compare_notebooks(
                    original, executed,
                    notebook_id=record.notebook_id, run_id=run.run_id)
            except comparemod.StructuralMismatchError as exc:
                self.store.insert_unscored_metrics(
                    record.notebook_id, run.run_id, exc.original_count)
                self._write_comparison_json(
                    logdir, record.notebook_id,
                    {"structural_mismatch": True,
                     "original_code_cells": exc.original_count,
                     "executed_code_cells": exc.executed_count})
                written += 1
                continue
            self.store.insert_metrics(metrics)
            self._write_comparison_json(logdir, record.notebook_id, {
                "structural_mismatch": False,
                "score": metrics.score,
                "total_code_cells": metrics.total_code_cells,
                "cells": [
                    {"cell_index": c.cell_index, "verdict": c.verdict.value,
                     "matched_patterns": list(c.matched_patterns)}
                    for c in comparisons
                ],
            })
            written += 1
            self.events.emit("compare", "notebook_compared",
                             notebook_id=record.notebook_id,
                             score=metrics.score)
        return written

    def _write_comparison_json(self, logdir: Path, notebook_id: str,
                               payload: dict) -> None:
        logdir.mkdir(parents=True, exist_ok=True)
        path = logdir / f"{notebook_id}.comparison.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")

    # ---- full pipeline --------------------------------------------------------

    def run_repository(self, raw_input: str, runtime_available: bool
                       ) -> RepositoryResult:
        result = self.infer_repository(raw_input)
        if result.run_id is None or not result.completed:
            return result
        run = self.store.get_run(result.run_id)
        if run is None or run.provisioning_status is not ProvisioningStatus.PENDING:
            return result

        if not runtime_available:
            self.store.finish_run(
                run, ProvisioningStatus.BUILD_FAILED,
                reason="container runtime unavailable: execution stages skipped")
            result.completed = False
            result.degraded_reason = "container runtime unavailable"
            return result

        execute_result = self.execute_run(run)
        if not execute_result.completed:
            return execute_result
        finished = self.store.get_run(run.run_id)
        if (finished is not None
                and finished.provisioning_status is ProvisioningStatus.ENVIRONMENT_BUILT):
            self.compare_run(finished)
        return result

    def run_corpus(self, inputs: list[str]) -> tuple[list[RepositoryResult], int]:
        runtime_available = self.docker.available()
        if not runtime_available:
            logger.warning("container runtime %r unavailable; "
                           "stages 3-4 will be skipped",
                           self.config.docker_executable)
        results = self.map_repositories(
            inputs, lambda url: self.run_repository(url, runtime_available))
        return results, exit_code_for(results)

    def map_repositories(self, items: list, fn) -> list[RepositoryResult]:
        """Apply one per-repository stage across the corpus, bounded by the
        worker pool; unexpected exceptions degrade that repository only."""
        if self.config.jobs <= 1 or len(items) <= 1:
            return [self._safe(fn, item) for item in items]
        with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
            return list(pool.map(lambda item: self._safe(fn, item), items))

    def _safe(self, fn, item) -> RepositoryResult:
        label = item if isinstance(item, str) else getattr(item, "run_id", str(item))
        try:
            return fn(item)
        except Exception as exc:  # noqa: BLE001 - corpus runs must not abort
            logger.exception("repository task %s failed unexpectedly", label)
            self.events.emit("pipeline", "unexpected_error", item=label,
                             error=str(exc))
            return RepositoryResult(url=label, completed=False,
                                    degraded_reason=f"unexpected error: {exc}")


def exit_code_for(results: list[RepositoryResult]) -> int:
    """0 when every repository was fully assessed, 2 when any was not;
    fatal corpus-level errors (exit 1) are raised, not returned."""
    if any(not r.completed for r in results):
        return EXIT_PARTIAL
    return EXIT_COMPLETE
