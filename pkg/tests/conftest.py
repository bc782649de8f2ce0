from contextlib import contextmanager

import pytest

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager that records a PASS/FAIL line for an acceptance criterion."""
    log = request.config.stash.setdefault(ACCEPTANCE, {})

    @contextmanager
    def record(number: int, title: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            log[number] = (title, "FAIL", "; ".join(notes + [first[:200]]))
            raise
        log[number] = (title, "PASS", "; ".join(notes))

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        title, status, notes = log[n]
        line = f"[{status}] {n}. {title}"
        terminalreporter.write_line(f"{line}: {notes}" if notes else line)
