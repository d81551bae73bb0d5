"""Shared fixtures: small worlds built from scenario text."""

from __future__ import annotations

import textwrap

import pytest

from iotguard.scenario import parse_scenario, run_scenario

STORAGE_KEY = bytes(range(32))


def run_text(text: str, seed: int | None = None, out_dir=None, storage_key=None):
    """Parse dedented scenario text and run it; returns the report (with ``runner``)."""
    scenario = parse_scenario(textwrap.dedent(text).strip() + "\n", source="<test>")
    return run_scenario(scenario, out_dir, seed=seed, storage_key=storage_key)


def assert_passed(report) -> None:
    failed = [f"line {e.line}: {e.text} -> {e.detail}" for e in report.expectations if not e.passed]
    assert not failed, "\n".join(failed)


ONBOARDED_DL7 = """
    scenario base
    seed 7
    vendor acme
    guardian home
    trust home acme
    provision DL7-0001 vendor=acme model=DL-7
    roster home DL7-0001
    reset DL7-0001
    onboard home DL7-0001
    expect last onboarded
"""


@pytest.fixture
def storage_key() -> bytes:
    return STORAGE_KEY


@pytest.fixture
def onboarded():
    """A runner with one mid-level device on-boarded to Guardian ``home``."""
    report = run_text(ONBOARDED_DL7)
    assert_passed(report)
    return report.runner


# acceptance criteria: one line per criterion in the terminal summary

_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    status = "PASS" if report.passed else "FAIL"
    _CRITERIA[number] = (title, status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, duration = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}  {status}  {title}  ({duration:.2f} s)")
