import pytest

_VERDICTS: dict[int, tuple[bool, str]] = {}


class CriterionLog:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def record(self, number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def criteria() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
