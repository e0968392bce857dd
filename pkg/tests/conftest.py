import os

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pytest  # noqa: E402

_CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} | {title} | {detail}"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
