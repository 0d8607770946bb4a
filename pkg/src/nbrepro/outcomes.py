"""Outcome classification against a prior study's baseline records.

Each (baseline, current) notebook pair lands in exactly one class:

  A  a dependency-install failure the containerized run got past
  B  the same error type observed on both sides
  C  both executed successfully but the outputs drifted
  D  the containerized run regressed (failed earlier than the baseline,
     produced no artifact, or failed in a new way the baseline did not)

Precedence: a regression in pipeline progress is checked first, then A,
then B, then C; a remaining current-side failure is a regression. Pairs
where both sides fully succeeded with zero drift match no class definition
and return Unclassified, as do notebooks without a baseline row.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from nbrepro.compare import ReproducibilityMetrics
from nbrepro.executor import ExecutionRecord, ExecutionStatus
from nbrepro.store import ProvisioningStatus

logger = logging.getLogger(__name__)

BASELINE_CSV_COLUMNS = ("notebook_id", "prev_dependency_install",
                        "prev_execution_status", "prev_diff_cells",
                        "prev_duration_s")

# Legacy exports spell statuses inconsistently ("Sucess", "File Not Found
# Error"); normalization strips spacing and tolerates the known typo.
_SUCCESS_TOKENS = frozenset({"success", "sucess"})
_FAIL_TOKENS = frozenset({"fail", "failed", "failure"})
_SKIP_MARKERS = ("skip",)


class OutcomeClass(Enum):
    A_ENVIRONMENT_RESOLVED = "A_EnvironmentResolved"
    B_PERSISTENT_ERROR = "B_PersistentError"
    C_REPRODUCIBILITY_DRIFT = "C_ReproducibilityDrift"
    D_REGRESSION = "D_Regression"
    UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class BaselineRecord:
    notebook_id: str
    prev_dependency_install: str
    prev_execution_status: str
    prev_diff_cells: int | None = None
    prev_duration_s: float | None = None

    @property
    def install_failed(self) -> bool:
        return _token(self.prev_dependency_install) in _FAIL_TOKENS

    @property
    def execution_succeeded(self) -> bool:
        return _token(self.prev_execution_status) in _SUCCESS_TOKENS


@dataclass(frozen=True)
class CurrentOutcome:
    """Everything the classifier needs about the containerized run.

    ``build_failure_phase`` is the failing build phase name when
    provisioning ended in BuildFailed (e.g. "DependencyInstall").
    """

    provisioning_status: ProvisioningStatus
    execution: ExecutionRecord | None = None
    metrics: ReproducibilityMetrics | None = None
    build_failure_phase: str | None = None


def _token(status: str) -> str:
    return status.strip().strip("<>").replace(" ", "").replace("_", "").lower()


def normalize_error_type(status: str) -> str:
    """Error-type token used when matching baseline vs current failures."""
    return _token(status)


def _baseline_progress(b: BaselineRecord) -> float:
    # 1 failed at dependency install; 1.5 produced no execution artifact;
    # 2 executed but errored; 3 fully succeeded.
    if b.install_failed:
        return 1.0
    token = _token(b.prev_execution_status)
    if token in _SUCCESS_TOKENS:
        return 3.0
    if any(marker in token for marker in _SKIP_MARKERS):
        return 1.5
    return 2.0


def _current_progress(current: CurrentOutcome) -> float:
    status = current.provisioning_status
    if status in (ProvisioningStatus.INVALID_URL,
                  ProvisioningStatus.NO_PYTHON_NOTEBOOKS):
        return 0.0
    if status in (ProvisioningStatus.BUILD_FAILED,
                  ProvisioningStatus.KERNEL_NOT_FOUND,
                  ProvisioningStatus.PENDING):
        return 1.0
    execution = current.execution
    if execution is None:
        return 1.5
    if execution.status in (ExecutionStatus.KERNEL_NOT_FOUND,
                            ExecutionStatus.NOTEBOOK_NOT_FOUND,
                            ExecutionStatus.SKIPPED):
        return 1.5
    if execution.status is ExecutionStatus.SUCCESS:
        return 3.0
    return 2.0


def _current_error_tokens(current: CurrentOutcome) -> set[str]:
    tokens: set[str] = set()
    if current.provisioning_status is ProvisioningStatus.BUILD_FAILED:
        # A failed dependency-install layer is the same failure mode the
        # baseline pipeline reported as "Install Dependency Error".
        if _token(current.build_failure_phase or "") == "dependencyinstall":
            tokens.add("installdependencyerror")
        elif current.build_failure_phase:
            tokens.add(_token(current.build_failure_phase))
    if current.provisioning_status is ProvisioningStatus.KERNEL_NOT_FOUND:
        tokens.add("kernelnotfound")
    execution = current.execution
    if execution is not None:
        for error in execution.errors:
            tokens.add(normalize_error_type(error.error_type))
        if execution.status is ExecutionStatus.KERNEL_NOT_FOUND:
            tokens.add("kernelnotfound")
        elif execution.status is ExecutionStatus.NOTEBOOK_NOT_FOUND:
            tokens.add("notebooknotfound")
        elif execution.status is ExecutionStatus.TIMEOUT:
            tokens.add("timeout")
    return tokens


def _current_succeeded(current: CurrentOutcome) -> bool:
    return (current.provisioning_status is ProvisioningStatus.ENVIRONMENT_BUILT
            and current.execution is not None
            and current.execution.status is ExecutionStatus.SUCCESS)


def _drifted(metrics: ReproducibilityMetrics | None) -> bool:
    if metrics is None:
        return False
    if metrics.different_count > 0 or metrics.nondeterministic_count > 0:
        return True
    return metrics.score is not None and metrics.score < 1.0


def assign_outcome_class(baseline: BaselineRecord | None,
                         current: CurrentOutcome) -> OutcomeClass:
    """Classify one notebook's (baseline, current) pair."""
    if baseline is None:
        return OutcomeClass.UNCLASSIFIED

    current_progress = _current_progress(current)
    baseline_progress = _baseline_progress(baseline)
    if current_progress < baseline_progress:
        return OutcomeClass.D_REGRESSION

    if (baseline.install_failed
            and current.provisioning_status is ProvisioningStatus.ENVIRONMENT_BUILT):
        return OutcomeClass.A_ENVIRONMENT_RESOLVED

    prev_token = normalize_error_type(baseline.prev_execution_status)
    if (prev_token not in _SUCCESS_TOKENS and prev_token not in _FAIL_TOKENS
            and prev_token in _current_error_tokens(current)):
        return OutcomeClass.B_PERSISTENT_ERROR

    if _current_succeeded(current):
        if baseline.execution_succeeded and _drifted(current.metrics):
            return OutcomeClass.C_REPRODUCIBILITY_DRIFT
        # Stable pair (no drift) or an improvement over a non-install
        # baseline failure; no class definition covers either.
        return OutcomeClass.UNCLASSIFIED

    # Residual: the current run exhibits a failure that matches neither the
    # baseline's error nor any resolution pattern.
    return OutcomeClass.D_REGRESSION


def resolution_rate(assignments: Sequence[tuple[BaselineRecord, OutcomeClass]]
                    ) -> float | None:
    """Percentage of baseline dependency-install failures now in class A.

    Undefined (None) when no baseline record failed on dependency install.
    """
    failed = [b for b, _ in assignments if b.install_failed]
    if not failed:
        return None
    resolved = sum(
        1 for b, cls in assignments
        if b.install_failed and cls is OutcomeClass.A_ENVIRONMENT_RESOLVED)
    return 100.0 * resolved / len(failed)


def baseline_success_rate_by_requirements(
        records: Iterable[BaselineRecord],
        notebook_has_requirements: dict[str, bool]) -> dict[str, float | None]:
    """Baseline pipeline success rate per requirements stratum, so reports
    can put the prior study's rates next to the containerized ones."""
    totals = {True: 0, False: 0}
    successes = {True: 0, False: 0}
    for record in records:
        stratum = notebook_has_requirements.get(record.notebook_id)
        if stratum is None:
            continue
        totals[stratum] += 1
        if not record.install_failed and record.execution_succeeded:
            successes[stratum] += 1
    def rate(hit, total):
        return 100.0 * hit / total if total else None
    return {
        "with_requirements": rate(successes[True], totals[True]),
        "without_requirements": rate(successes[False], totals[False]),
    }


def read_baseline_csv(path: Path | str) -> list[BaselineRecord]:
    """Load baseline records from the flat comma-delimited export."""
    records: list[BaselineRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(BASELINE_CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(
                f"baseline file missing columns: {', '.join(sorted(missing))}")
        for row in reader:
            records.append(BaselineRecord(
                notebook_id=row["notebook_id"].strip(),
                prev_dependency_install=row["prev_dependency_install"].strip(),
                prev_execution_status=row["prev_execution_status"].strip(),
                prev_diff_cells=_parse_optional_int(row["prev_diff_cells"]),
                prev_duration_s=_parse_optional_float(row["prev_duration_s"]),
            ))
    return records


def match_baselines(records: Iterable[BaselineRecord],
                    known_notebook_ids: set[str]
                    ) -> tuple[list[BaselineRecord], list[BaselineRecord]]:
    """Split baseline rows into (matched, unmatched) against the corpus.

    Unmatched rows are reported, never silently dropped.
    """
    matched, unmatched = [], []
    for record in records:
        (matched if record.notebook_id in known_notebook_ids else unmatched
         ).append(record)
    for record in unmatched:
        logger.warning("baseline row %s matches no known notebook",
                       record.notebook_id)
    return matched, unmatched


def _parse_optional_int(raw: str) -> int | None:
    raw = raw.strip()
    if not raw or raw == "-":
        return None
    try:
        return int(raw)
    except ValueError:
        return None


def _parse_optional_float(raw: str) -> float | None:
    raw = raw.strip()
    if not raw or raw == "-":
        return None
    try:
        return float(raw)
    except ValueError:
        return None
