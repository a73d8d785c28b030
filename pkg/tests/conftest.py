import pytest

# criterion label ("3", "5/add_one", ...) -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def _order(label: str):
    head, _, tail = label.partition("/")
    return int(head), tail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=_order):
        ok, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}")


@pytest.fixture
def criterion():
    """Record a criterion outcome, echo it, and fail the test if it did not hold."""

    def record(label, ok: bool, detail: str) -> None:
        ACCEPTANCE[str(label)] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}")
        assert ok, f"criterion {label}: {detail}"

    return record
