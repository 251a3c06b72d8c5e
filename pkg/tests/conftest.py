import pytest

ACCEPTANCE = {}


@pytest.fixture
def record():
    """record(n, ok, detail): store a criterion verdict and print it as one line."""

    def _rec(n: int, ok: bool, detail: str = ""):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return _rec


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
