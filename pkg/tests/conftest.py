import pytest

VERDICTS: dict[int, tuple[bool, str]] = {}


class Verdict:
    """Collects one pass/fail line per acceptance criterion."""

    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        prev = VERDICTS.get(number)
        if prev is not None:
            ok, detail = prev[0] and ok, f"{prev[1]}; {detail}"
        VERDICTS[number] = (bool(ok), detail)
        return bool(ok)


@pytest.fixture
def verdict():
    return Verdict()


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
