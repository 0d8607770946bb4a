"""Command-line interface.

Subcommands expose each pipeline stage independently; ``run`` chains them.

  run       full pipeline: infer -> execute -> compare (-> classify) -> report
  infer     discovery, validation, dependency inference, recipe generation
  execute   clean-room image build + notebook execution (needs a runtime)
  compare   cell-level output comparison for executed runs
  report    corpus aggregation into report.json / summary.csv / summary.md
  classify  outcome classes A-D against a baseline export

Exit codes: 0 complete, 2 partial (some repositories not fully assessed),
1 fatal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from nbrepro import __version__, report as reportmod
from nbrepro.config import ConfigError, PipelineConfig
from nbrepro.containerize import DockerCli
from nbrepro.outcomes import (
    BaselineRecord,
    CurrentOutcome,
    assign_outcome_class,
    baseline_success_rate_by_requirements,
    match_baselines,
    read_baseline_csv,
    resolution_rate,
)
from nbrepro.pipeline import (
    EXIT_COMPLETE,
    EXIT_FATAL,
    Pipeline,
    PredecessorStateMissing,
    exit_code_for,
)
from nbrepro.store import ProvisioningStatus, Store

logger = logging.getLogger(__name__)

CLASSIFICATION_FILE = "classification.json"

_INTERPRETATION_NOTE = (
    "outcome classes are assigned per notebook by fixed precedence "
    "(progress regression, resolution, persistence, drift, residual "
    "regression); repository-level groupings may differ"
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbrepro",
        description="Containerized re-execution and reproducibility "
                    "assessment for notebook repositories.")
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser, with_inputs: bool) -> None:
        if with_inputs:
            sub.add_argument("--input", action="append", dest="inputs",
                             metavar="URL_OR_PATH",
                             help="repository URL or local path; repeatable")
        sub.add_argument("--config", type=Path,
                         help="JSON config file; flags take precedence")
        sub.add_argument("--store", type=Path, dest="store_path",
                         help="SQLite store file")
        sub.add_argument("--logdir", type=Path, help="log directory root")
        sub.add_argument("--artifacts", type=Path, dest="artifacts_dir",
                         help="artifacts directory (clones, executed notebooks)")
        sub.add_argument("--report-dir", type=Path, dest="report_dir",
                         help="directory for emitted reports")
        sub.add_argument("--jobs", type=int, help="worker pool size")
        sub.add_argument("--build-timeout", type=float, dest="build_timeout",
                         help="image build timeout in seconds")
        sub.add_argument("--exec-timeout", type=float, dest="exec_timeout",
                         help="per-notebook execution timeout in seconds")
        sub.add_argument("--base-image", dest="base_image",
                         help="container base image override")
        sub.add_argument("--alias-table", type=Path, dest="alias_table_path",
                         help="JSON file extending the import alias table")
        sub.add_argument("--baseline", type=Path, dest="baseline_path",
                         help="baseline CSV export for outcome classification")
        sub.add_argument("--scan-magic-installs", dest="scan_magic_installs",
                         action=argparse.BooleanOptionalAction, default=None,
                         help="scan notebook pip-install lines as declared "
                              "dependencies (default on)")
        sub.add_argument("--docker", dest="docker_executable",
                         help="container runtime executable (default docker)")

    for name, help_text, with_inputs in (
        ("run", "full pipeline over the input repositories", True),
        ("infer", "discovery, validation, and dependency inference only", True),
        ("execute", "build images and execute notebooks for inferred runs", False),
        ("compare", "compare executed artifacts against committed outputs", False),
        ("report", "aggregate the store and emit reports", False),
        ("classify", "assign outcome classes against a baseline export", False),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        add_common(sub, with_inputs)
        sub.set_defaults(handler=_HANDLERS[name])
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    config = (PipelineConfig.from_file(args.config)
              if args.config else PipelineConfig())
    for name in ("inputs", "store_path", "logdir", "artifacts_dir", "report_dir",
                 "jobs", "build_timeout", "exec_timeout", "base_image",
                 "alias_table_path", "baseline_path", "scan_magic_installs",
                 "docker_executable"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    config.normalized()
    config.validate()
    return config


def cmd_run(config: PipelineConfig, store: Store) -> int:
    if not config.inputs:
        raise ConfigError("no repositories given; pass --input")
    pipeline = Pipeline(config, store)
    results, code = pipeline.run_corpus(_unique(config.inputs))
    if config.baseline_path is not None:
        cmd_classify(config, store)
    _emit_report(config, store)
    for result in results:
        state = "ok" if result.completed else f"degraded: {result.degraded_reason}"
        logger.info("%s -> %s", result.url, state)
    return code


def cmd_infer(config: PipelineConfig, store: Store) -> int:
    if not config.inputs:
        raise ConfigError("no repositories given; pass --input")
    pipeline = Pipeline(config, store)
    results = pipeline.map_repositories(_unique(config.inputs),
                                        pipeline.infer_repository)
    return exit_code_for(results)


def _unique(inputs: list[str]) -> list[str]:
    """Order-preserving dedup; one run per repository per invocation."""
    return list(dict.fromkeys(inputs))


def cmd_execute(config: PipelineConfig, store: Store) -> int:
    docker = DockerCli(config.docker_executable)
    if not docker.available():
        raise PredecessorStateMissing(
            f"container runtime {config.docker_executable!r} is not reachable; "
            "the execute stage requires one")
    pipeline = Pipeline(config, store, docker)
    runs = [run for run in store.latest_runs().values()
            if run.provisioning_status is ProvisioningStatus.PENDING]
    if not runs:
        raise PredecessorStateMissing(
            "no inferred runs are awaiting execution; run the infer "
            "subcommand first")
    results = pipeline.map_repositories(runs, pipeline.execute_run)
    return exit_code_for(results)


def cmd_compare(config: PipelineConfig, store: Store) -> int:
    pipeline = Pipeline(config, store)
    latest = store.latest_runs()
    candidates = [run for run in latest.values()
                  if store.list_executions(run.run_id)]
    if not candidates:
        raise PredecessorStateMissing(
            "no executed artifacts for run; run the execute subcommand first")
    for run in candidates:
        pipeline.compare_run(run)
    return EXIT_COMPLETE


def cmd_report(config: PipelineConfig, store: Store) -> int:
    _emit_report(config, store)
    return EXIT_COMPLETE


def cmd_classify(config: PipelineConfig, store: Store) -> int:
    if config.baseline_path is None:
        raise ConfigError(
            "outcome classification requires a baseline export; pass --baseline")
    baselines = read_baseline_csv(config.baseline_path)
    known = {n.notebook_id for n in store.list_notebooks()}
    matched, unmatched = match_baselines(baselines, known)

    latest = store.latest_runs()
    notebook_repo = {n.notebook_id: n.repository_id for n in store.list_notebooks()}
    assignments: list[tuple[BaselineRecord, str]] = []
    counts: dict[str, int] = {}
    rate_inputs = []
    for baseline in matched:
        current = _current_outcome_for(store, latest,
                                       notebook_repo[baseline.notebook_id],
                                       baseline.notebook_id)
        outcome = assign_outcome_class(baseline, current)
        assignments.append((baseline, outcome.value))
        counts[outcome.value] = counts.get(outcome.value, 0) + 1
        rate_inputs.append((baseline, outcome))
    rate = resolution_rate(rate_inputs)

    repo_has_req = {r.repository_id: r.has_requirements_file
                    for r in store.list_repositories()}
    notebook_has_req = {nb_id: repo_has_req.get(repo_id, False)
                        for nb_id, repo_id in notebook_repo.items()}
    payload = {
        "note": _INTERPRETATION_NOTE,
        "resolution_rate": rate,
        "counts": dict(sorted(counts.items())),
        "baseline_success_rate_by_requirements":
            baseline_success_rate_by_requirements(matched, notebook_has_req),
        "containerized_success_rate_by_requirements":
            reportmod.success_rate_by_requirements(store),
        "unmatched_baseline_rows": sorted(b.notebook_id for b in unmatched),
        "assignments": [
            {"notebook_id": b.notebook_id, "outcome_class": cls}
            for b, cls in assignments
        ],
    }
    report_dir = Path(config.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    out_path = report_dir / CLASSIFICATION_FILE
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    logger.info("classification written to %s", out_path)
    return EXIT_COMPLETE


def _current_outcome_for(store: Store, latest, repository_id: str,
                         notebook_id: str) -> CurrentOutcome:
    run = latest.get(repository_id)
    if run is None:
        return CurrentOutcome(provisioning_status=ProvisioningStatus.PENDING)
    execution = store.get_execution(notebook_id, run.run_id)
    metrics_row = store.get_metrics(notebook_id, run.run_id)
    phase = None
    if (run.provisioning_status is ProvisioningStatus.BUILD_FAILED
            and run.status_reason):
        phase = run.status_reason.split(":", 1)[0].strip()
    return CurrentOutcome(
        provisioning_status=run.provisioning_status,
        execution=execution,
        metrics=metrics_row[0] if metrics_row else None,
        build_failure_phase=phase,
    )


def _emit_report(config: PipelineConfig, store: Store) -> None:
    classification = None
    rate = None
    classification_path = Path(config.report_dir) / CLASSIFICATION_FILE
    if classification_path.exists():
        data = json.loads(classification_path.read_text("utf-8"))
        classification = data.get("counts")
        rate = data.get("resolution_rate")
    summary = reportmod.aggregate_corpus(store, classification, rate)
    paths = reportmod.emit_reports(summary, Path(config.report_dir))
    logger.info("reports written: %s", ", ".join(str(p) for p in paths))


_HANDLERS = {
    "run": cmd_run,
    "infer": cmd_infer,
    "execute": cmd_execute,
    "compare": cmd_compare,
    "report": cmd_report,
    "classify": cmd_classify,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        with Store(config.store_path) as store:
            return args.handler(config, store)
    except (ConfigError, PredecessorStateMissing, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_FATAL
    except OSError as exc:
        logger.error("fatal i/o error: %s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
