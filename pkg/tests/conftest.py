from __future__ import annotations

import pytest

from hyfl.data import GenConfig, generate

_ACCEPTANCE: list[tuple[str, bool, str]] = []


class AcceptanceLog:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def record(self, criterion: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append((criterion, bool(passed), detail))


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[0][1:])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")


@pytest.fixture(scope="session")
def small_dataset():
    return generate(GenConfig(n_train=4000, n_accounts=400, positive_rate=0.02, seed=5))
