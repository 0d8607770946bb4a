"""Corpus-level aggregation and report emission.

Aggregates the most recent run of every repository into one summary and
writes it as versioned JSON, a delimited table, and a human-readable
digest. Output bytes are deterministic for a fixed store snapshot; the
generation timestamp is isolated in a single header field.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from nbrepro import __version__
from nbrepro.compare import ScoreCategory, categorize_score
from nbrepro.executor import ExecutionStatus
from nbrepro.outcomes import OutcomeClass
from nbrepro.store import ProvisioningStatus, Store, utc_now_iso

REPORT_SCHEMA_VERSION = 1

PROVISIONING_ORDER = [status.value for status in ProvisioningStatus]
SCORE_CATEGORY_ORDER = [category.value for category in ScoreCategory]
OUTCOME_CLASS_ORDER = [cls.value for cls in OutcomeClass]


@dataclass(frozen=True)
class CorpusSummary:
    """One aggregation pass over the store.

    Histograms carry explicit populations so their sum invariants are
    checkable: provisioning sums to total_repositories, score categories to
    scored_notebooks, error types to total_error_records, outcome classes
    to classified_notebooks.
    """

    total_repositories: int = 0
    provisioning: dict[str, int] = field(default_factory=dict)
    repositories_with_requirements: int = 0
    repositories_without_requirements: int = 0

    total_notebooks: int = 0
    executed_notebooks: int = 0
    zero_error_notebooks: int = 0
    notebooks_with_errors: int = 0

    total_error_records: int = 0
    error_types: dict[str, int] = field(default_factory=dict)
    error_categories: dict[str, int] = field(default_factory=dict)

    success_rate_by_requirements: dict[str, float | None] = field(default_factory=dict)
    mean_score_by_requirements: dict[str, float | None] = field(default_factory=dict)

    scored_notebooks: int = 0
    score_categories: dict[str, int] = field(default_factory=dict)
    mean_score: float | None = None

    nondeterministic_notebooks: int = 0
    nondeterminism_prevalence: float = 0.0

    classified_notebooks: int = 0
    outcome_classes: dict[str, int] = field(default_factory=dict)
    resolution_rate: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSummary":
        return cls(**data)


def aggregate_corpus(store: Store,
                     classification: dict[str, int] | None = None,
                     resolution: float | None = None) -> CorpusSummary:
    """Deterministic aggregation over the latest run of each repository.

    An empty store yields an all-zero summary rather than an error.
    ``classification``/``resolution`` attach outcome-class results when a
    baseline comparison was run.
    """
    repositories = store.list_repositories()
    latest = store.latest_runs()

    provisioning = {key: 0 for key in PROVISIONING_ORDER}
    with_req = without_req = 0
    for repo in repositories:
        run = latest.get(repo.repository_id)
        status = run.provisioning_status.value if run else ProvisioningStatus.PENDING.value
        provisioning[status] = provisioning.get(status, 0) + 1
        if repo.has_requirements_file:
            with_req += 1
        else:
            without_req += 1

    latest_run_ids = {run.run_id for run in latest.values()}
    executions = [record for record in store.list_executions()
                  if record.run_id in latest_run_ids]
    notebooks = store.list_notebooks()
    repo_has_req = {r.repository_id: r.has_requirements_file for r in repositories}
    notebook_repo = {n.notebook_id: n.repository_id for n in notebooks}

    zero_errors = sum(1 for record in executions if not record.errors)
    error_types: dict[str, int] = {}
    error_categories: dict[str, int] = {}
    total_error_records = 0
    for record in executions:
        for error in record.errors:
            total_error_records += 1
            error_types[error.error_type] = error_types.get(error.error_type, 0) + 1
            error_categories[error.category.value] = (
                error_categories.get(error.category.value, 0) + 1)

    success_rates = _success_rate_by_requirements(executions, notebook_repo,
                                                  repo_has_req)

    metric_rows = [(m, mismatch) for m, mismatch in store.list_metrics()
                   if m.run_id in latest_run_ids]
    score_categories = {key: 0 for key in SCORE_CATEGORY_ORDER}
    scores: list[float] = []
    scores_by_stratum: dict[bool, list[float]] = {True: [], False: []}
    for metrics, mismatch in metric_rows:
        category = (ScoreCategory.UNSCORED if mismatch
                    else categorize_score(metrics.score))
        score_categories[category.value] += 1
        if metrics.score is not None and not mismatch:
            scores.append(metrics.score)
            stratum = repo_has_req.get(notebook_repo.get(metrics.notebook_id, ""), False)
            scores_by_stratum[stratum].append(metrics.score)

    flagged = sum(1 for n in notebooks if (n.nondeterministic_pattern_cells or 0) > 0)
    prevalence = flagged / len(notebooks) if notebooks else 0.0

    outcome_classes = {key: 0 for key in OUTCOME_CLASS_ORDER}
    classified = 0
    if classification:
        for key, count in classification.items():
            outcome_classes[key] = outcome_classes.get(key, 0) + count
            classified += count

    return CorpusSummary(
        total_repositories=len(repositories),
        provisioning=provisioning,
        repositories_with_requirements=with_req,
        repositories_without_requirements=without_req,
        total_notebooks=len(notebooks),
        executed_notebooks=len(executions),
        zero_error_notebooks=zero_errors,
        notebooks_with_errors=len(executions) - zero_errors,
        total_error_records=total_error_records,
        error_types=dict(sorted(error_types.items())),
        error_categories=dict(sorted(error_categories.items())),
        success_rate_by_requirements=success_rates,
        mean_score_by_requirements={
            "with_requirements": _mean(scores_by_stratum[True]),
            "without_requirements": _mean(scores_by_stratum[False]),
        },
        scored_notebooks=len(metric_rows),
        score_categories=score_categories,
        mean_score=_mean(scores),
        nondeterministic_notebooks=flagged,
        nondeterminism_prevalence=prevalence,
        classified_notebooks=classified,
        outcome_classes=outcome_classes,
        resolution_rate=resolution if classification else None,
    )


def success_rate_by_requirements(store: Store) -> dict[str, float | None]:
    """Notebook success rate split by the repository's requirements status."""
    repositories = store.list_repositories()
    latest_run_ids = {run.run_id for run in store.latest_runs().values()}
    executions = [record for record in store.list_executions()
                  if record.run_id in latest_run_ids]
    notebook_repo = {n.notebook_id: n.repository_id for n in store.list_notebooks()}
    repo_has_req = {r.repository_id: r.has_requirements_file for r in repositories}
    return _success_rate_by_requirements(executions, notebook_repo, repo_has_req)


def _success_rate_by_requirements(executions, notebook_repo, repo_has_req
                                  ) -> dict[str, float | None]:
    totals = {True: 0, False: 0}
    successes = {True: 0, False: 0}
    for record in executions:
        repo_id = notebook_repo.get(record.notebook_id)
        if repo_id is None:
            continue
        stratum = repo_has_req.get(repo_id, False)
        totals[stratum] += 1
        if record.status is ExecutionStatus.SUCCESS:
            successes[stratum] += 1
    return {
        "with_requirements": _rate(successes[True], totals[True]),
        "without_requirements": _rate(successes[False], totals[False]),
    }


def nondeterminism_prevalence(store: Store) -> float:
    """Fraction of notebooks with at least one pattern-flagged code cell."""
    notebooks = store.list_notebooks()
    if not notebooks:
        return 0.0
    flagged = sum(1 for n in notebooks
                  if (n.nondeterministic_pattern_cells or 0) > 0)
    return flagged / len(notebooks)


def _rate(hits: int, total: int) -> float | None:
    return 100.0 * hits / total if total else None


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def emit_reports(summary: CorpusSummary, report_dir: Path,
                 generated_at: str | None = None) -> list[Path]:
    """Write report.json, summary.csv, and summary.md.

    Raises OSError when the target directory cannot be written; callers
    translate that into a fatal exit.
    """
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    stamp = generated_at or utc_now_iso()

    document = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "pipeline_version": __version__,
        "generated_at": stamp,
        "summary": summary.to_dict(),
    }
    json_path = report_dir / "report.json"
    json_path.write_text(
        json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8")

    csv_path = report_dir / "summary.csv"
    csv_path.write_text(_render_csv(summary), encoding="utf-8")

    md_path = report_dir / "summary.md"
    md_path.write_text(_render_markdown(summary, stamp), encoding="utf-8")
    return [json_path, csv_path, md_path]


def load_report(path: Path) -> CorpusSummary:
    document = json.loads(Path(path).read_text("utf-8"))
    version = document.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema version: {version!r}")
    return CorpusSummary.from_dict(document["summary"])


def _format_value(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _rows(summary: CorpusSummary) -> list[tuple[str, str, str]]:
    rows: list[tuple[str, str, str]] = [
        ("repositories", "total", _format_value(summary.total_repositories)),
        ("repositories", "with_requirements",
         _format_value(summary.repositories_with_requirements)),
        ("repositories", "without_requirements",
         _format_value(summary.repositories_without_requirements)),
    ]
    rows += [("provisioning", key, _format_value(count))
             for key, count in summary.provisioning.items()]
    rows += [
        ("notebooks", "total", _format_value(summary.total_notebooks)),
        ("notebooks", "executed", _format_value(summary.executed_notebooks)),
        ("notebooks", "zero_errors", _format_value(summary.zero_error_notebooks)),
        ("notebooks", "with_errors", _format_value(summary.notebooks_with_errors)),
    ]
    rows += [("error_types", key, _format_value(count))
             for key, count in summary.error_types.items()]
    rows += [("error_categories", key, _format_value(count))
             for key, count in summary.error_categories.items()]
    rows += [("success_rate_by_requirements", key, _format_value(value))
             for key, value in summary.success_rate_by_requirements.items()]
    rows += [("mean_score_by_requirements", key, _format_value(value))
             for key, value in summary.mean_score_by_requirements.items()]
    rows += [("score_categories", key, _format_value(count))
             for key, count in summary.score_categories.items()]
    rows += [
        ("scores", "scored_notebooks", _format_value(summary.scored_notebooks)),
        ("scores", "mean_score", _format_value(summary.mean_score)),
        ("nondeterminism", "flagged_notebooks",
         _format_value(summary.nondeterministic_notebooks)),
        ("nondeterminism", "prevalence",
         _format_value(summary.nondeterminism_prevalence)),
    ]
    rows += [("outcome_classes", key, _format_value(count))
             for key, count in summary.outcome_classes.items()]
    rows.append(("outcome_classes", "resolution_rate",
                 _format_value(summary.resolution_rate)))
    return rows


def _render_csv(summary: CorpusSummary) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["section", "metric", "value"])
    writer.writerows(_rows(summary))
    return buffer.getvalue()


def _render_markdown(summary: CorpusSummary, stamp: str) -> str:
    lines = [
        "# Corpus reproducibility summary",
        "",
        f"Generated: {stamp}",
        "",
        "| Section | Metric | Value |",
        "| --- | --- | --- |",
    ]
    lines += [f"| {section} | {metric} | {value} |"
              for section, metric, value in _rows(summary)]
    lines.append("")
    return "\n".join(lines)
