from __future__ import annotations

import pytest

from pnipath.synth import CohortLayout, CohortSpec, generate_cohort

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid.split("::")[-1]] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_acceptance.items()):
        verdict = "PASS" if outcome == "PASSED" else "FAIL" if outcome == "FAILED" else outcome
        terminalreporter.write_line(f"{verdict:5s} {name}")


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Six slides, half of the subjects PNI positive, written to disk once per session."""
    root = tmp_path_factory.mktemp("cohort")
    spec = CohortSpec(seed=11, n_subjects=4, slides_per_subject=(1, 2), subject_pni_prevalence=0.5,
                      slide_dims=(1536, 1536))
    entries = generate_cohort(spec, root)
    return CohortLayout(root), entries, spec
