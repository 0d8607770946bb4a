"""Outcome classes A-D against baseline records, including the published
example rows of the prior-vs-containerized comparison table."""

from __future__ import annotations

import pytest

from nbrepro.compare import metrics_from_partition
from nbrepro.executor import (
    ErrorCategory,
    ExecutionError,
    ExecutionRecord,
    ExecutionStatus,
)
from nbrepro.outcomes import (
    BaselineRecord,
    CurrentOutcome,
    OutcomeClass,
    assign_outcome_class,
    match_baselines,
    read_baseline_csv,
    resolution_rate,
)
from nbrepro.store import ProvisioningStatus


def _baseline(install, status, diff=None, duration=None, nb="nb"):
    return BaselineRecord(notebook_id=nb, prev_dependency_install=install,
                          prev_execution_status=status, prev_diff_cells=diff,
                          prev_duration_s=duration)


def _execution(status, error_types=(), nb="nb", run="run"):
    errors = tuple(
        ExecutionError(error_type=t, category=ErrorCategory.LOGIC,
                       message="", cell_index=i)
        for i, t in enumerate(error_types))
    path = "/tmp/out.ipynb" if status in (
        ExecutionStatus.SUCCESS, ExecutionStatus.ERRORED_BUT_COMPLETED) else None
    return ExecutionRecord(notebook_id=nb, run_id=run, status=status,
                           duration_s=1.0, code_cell_count=max(5, len(error_types)),
                           markdown_code_ratio=0.0, errors=errors,
                           executed_notebook_path=path)


def _metrics(diff=0, total=10, nb="nb", run="run"):
    return metrics_from_partition(range(total - diff), range(total - diff, total),
                                  [], notebook_id=nb, run_id=run)


def _success_current(diff=0):
    return CurrentOutcome(
        provisioning_status=ProvisioningStatus.ENVIRONMENT_BUILT,
        execution=_execution(ExecutionStatus.SUCCESS),
        metrics=_metrics(diff=diff))


def _errored_current(*error_types):
    return CurrentOutcome(
        provisioning_status=ProvisioningStatus.ENVIRONMENT_BUILT,
        execution=_execution(ExecutionStatus.ERRORED_BUT_COMPLETED, error_types))


# Published example rows: (baseline record, reconstructed current outcome,
# printed class). The one row printed as D despite Success/Success with
# drift is asserted as C below: its columns are indistinguishable from the
# printed C rows, so no column-level rule can reproduce it (the original
# table appears to group notebooks by repository).
TABLE_ROWS = [
    # A. environment failures resolved
    (_baseline("Fail", "Fail"), _success_current(diff=4),
     OutcomeClass.A_ENVIRONMENT_RESOLVED),
    (_baseline("Fail", "Install Dependency Error"), _success_current(diff=30),
     OutcomeClass.A_ENVIRONMENT_RESOLVED),
    (_baseline("Fail", "Install Dependency Error"),
     _errored_current("ModuleNotFoundError"),
     OutcomeClass.A_ENVIRONMENT_RESOLVED),
    (_baseline("Fail", "Install Dependency Error"),
     _errored_current("PermissionError"),
     OutcomeClass.A_ENVIRONMENT_RESOLVED),
    # B. persistent errors
    (_baseline("Success", "SyntaxError"), _errored_current("SyntaxError"),
     OutcomeClass.B_PERSISTENT_ERROR),
    (_baseline("Success", "FileNotFoundError"),
     _errored_current("FileNotFoundError"),
     OutcomeClass.B_PERSISTENT_ERROR),
    (_baseline("Sucess", "File Not Found Error"),
     _errored_current("FileNotFoundError"),
     OutcomeClass.B_PERSISTENT_ERROR),
    # C. reproducibility drift
    (_baseline("Success", "Success", diff=0), _success_current(diff=3),
     OutcomeClass.C_REPRODUCIBILITY_DRIFT),
    (_baseline("Success", "Success", diff=1), _success_current(diff=1),
     OutcomeClass.C_REPRODUCIBILITY_DRIFT),
    # D. regressions
    (_baseline("Success", "ModuleNotFoundError", diff=0),
     CurrentOutcome(provisioning_status=ProvisioningStatus.INVALID_URL),
     OutcomeClass.D_REGRESSION),
    (_baseline("Fail", "Install Dependency Error"),
     CurrentOutcome(provisioning_status=ProvisioningStatus.BUILD_FAILED,
                    build_failure_phase="Other"),
     OutcomeClass.D_REGRESSION),
    (_baseline("Sucess", "<Skipping notebook>"), _errored_current("TypeError"),
     OutcomeClass.D_REGRESSION),
    (_baseline("Fail", "Install Dependency Error"),
     CurrentOutcome(provisioning_status=ProvisioningStatus.BUILD_FAILED,
                    build_failure_phase="Other"),
     OutcomeClass.D_REGRESSION),
    (_baseline("Success", "ModuleNotFoundError", diff=1),
     CurrentOutcome(provisioning_status=ProvisioningStatus.ENVIRONMENT_BUILT,
                    execution=_execution(ExecutionStatus.NOTEBOOK_NOT_FOUND)),
     OutcomeClass.D_REGRESSION),
]


@pytest.mark.parametrize("baseline,current,expected", TABLE_ROWS,
                         ids=[f"row{i:02d}_{e.value}" for i, (_, _, e)
                              in enumerate(TABLE_ROWS)])
def test_published_rows_reproduce_printed_classes(baseline, current, expected):
    assert assign_outcome_class(baseline, current) is expected


def test_success_success_drift_row_classifies_as_drift():
    # Printed under D in the original table, but carries exactly the same
    # column signals as the C rows; the per-notebook rule yields C.
    baseline = _baseline("Sucess", "Sucess", diff=0)
    assert assign_outcome_class(baseline, _success_current(diff=5)) is (
        OutcomeClass.C_REPRODUCIBILITY_DRIFT)


def test_missing_baseline_unclassified():
    assert assign_outcome_class(None, _success_current()) is OutcomeClass.UNCLASSIFIED


def test_stable_pair_unclassified():
    baseline = _baseline("Success", "Success", diff=0)
    assert assign_outcome_class(baseline, _success_current(diff=0)) is (
        OutcomeClass.UNCLASSIFIED)


def test_persistent_dependency_install_failure_is_b():
    baseline = _baseline("Fail", "Install Dependency Error")
    current = CurrentOutcome(
        provisioning_status=ProvisioningStatus.BUILD_FAILED,
        build_failure_phase="DependencyInstall")
    assert assign_outcome_class(baseline, current) is OutcomeClass.B_PERSISTENT_ERROR


def test_timeout_after_baseline_success_is_regression():
    baseline = _baseline("Success", "Success", diff=0)
    current = CurrentOutcome(
        provisioning_status=ProvisioningStatus.ENVIRONMENT_BUILT,
        execution=_execution(ExecutionStatus.TIMEOUT))
    assert assign_outcome_class(baseline, current) is OutcomeClass.D_REGRESSION


def test_classes_mutually_exclusive_and_exhaustive_on_rows():
    for baseline, current, _ in TABLE_ROWS:
        outcome = assign_outcome_class(baseline, current)
        assert outcome in (OutcomeClass.A_ENVIRONMENT_RESOLVED,
                           OutcomeClass.B_PERSISTENT_ERROR,
                           OutcomeClass.C_REPRODUCIBILITY_DRIFT,
                           OutcomeClass.D_REGRESSION)


# ---- resolution rate ------------------------------------------------------------

def test_resolution_rate_published_value():
    assignments = []
    for i in range(96):
        baseline = _baseline("Fail", "Install Dependency Error", nb=f"nb{i}")
        outcome = (OutcomeClass.A_ENVIRONMENT_RESOLVED if i < 64
                   else OutcomeClass.D_REGRESSION)
        assignments.append((baseline, outcome))
    rate = resolution_rate(assignments)
    assert rate == pytest.approx(66.7, abs=0.05)


@pytest.mark.parametrize("resolved,failed,expected", [(0, 5, 0.0), (5, 5, 100.0)])
def test_resolution_rate_bounds(resolved, failed, expected):
    assignments = [
        (_baseline("Fail", "Install Dependency Error", nb=f"nb{i}"),
         OutcomeClass.A_ENVIRONMENT_RESOLVED if i < resolved
         else OutcomeClass.B_PERSISTENT_ERROR)
        for i in range(failed)
    ]
    assert resolution_rate(assignments) == expected


def test_resolution_rate_undefined_without_failures():
    assignments = [(_baseline("Success", "Success"),
                    OutcomeClass.C_REPRODUCIBILITY_DRIFT)]
    assert resolution_rate(assignments) is None


# ---- baseline ingestion ------------------------------------------------------------

def test_baseline_csv_round_trip(tmp_path):
    path = tmp_path / "baseline.csv"
    path.write_text(
        "notebook_id,prev_dependency_install,prev_execution_status,"
        "prev_diff_cells,prev_duration_s\n"
        "nb1,Fail,Install Dependency Error,-,-\n"
        "nb2,Success,FileNotFoundError,0,80.4\n"
        "nb3,Sucess,<Skipping notebook>,,\n",
        encoding="utf-8")
    records = read_baseline_csv(path)
    assert [r.notebook_id for r in records] == ["nb1", "nb2", "nb3"]
    assert records[0].install_failed
    assert records[0].prev_diff_cells is None
    assert records[1].prev_diff_cells == 0
    assert records[1].prev_duration_s == 80.4
    assert not records[2].install_failed


def test_baseline_csv_missing_columns_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("notebook_id,prev_dependency_install\nnb1,Fail\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_baseline_csv(path)


def test_baseline_success_rate_by_requirements():
    from nbrepro.outcomes import baseline_success_rate_by_requirements
    records = [
        _baseline("Success", "Success", nb="w1"),
        _baseline("Success", "FileNotFoundError", nb="w2"),
        _baseline("Fail", "Install Dependency Error", nb="wo1"),
        _baseline("Success", "Success", nb="wo2"),
        _baseline("Fail", "Install Dependency Error", nb="ghost"),
    ]
    strata = {"w1": True, "w2": True, "wo1": False, "wo2": False}
    rates = baseline_success_rate_by_requirements(records, strata)
    assert rates == {"with_requirements": 50.0, "without_requirements": 50.0}


def test_baseline_success_rate_empty_stratum_undefined():
    from nbrepro.outcomes import baseline_success_rate_by_requirements
    rates = baseline_success_rate_by_requirements([], {})
    assert rates == {"with_requirements": None, "without_requirements": None}


def test_unmatched_baseline_rows_reported(caplog):
    records = [_baseline("Fail", "X", nb="known"),
               _baseline("Fail", "X", nb="ghost")]
    import logging
    with caplog.at_level(logging.WARNING, logger="nbrepro.outcomes"):
        matched, unmatched = match_baselines(records, {"known"})
    assert [r.notebook_id for r in matched] == ["known"]
    assert [r.notebook_id for r in unmatched] == ["ghost"]
    assert any("ghost" in rec.message for rec in caplog.records)
