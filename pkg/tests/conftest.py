"""Shared fixtures and the acceptance-criterion summary reporter."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def record_acceptance(criterion: int, description: str, passed: bool) -> None:
    """Remember a criterion outcome for the end-of-run summary."""
    _ACCEPTANCE_RESULTS[criterion] = (description, "PASS" if passed else "FAIL")


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE_RESULTS):
        description, verdict = _ACCEPTANCE_RESULTS[criterion]
        terminalreporter.write_line(f"criterion {criterion:2d}: {verdict}  {description}")
