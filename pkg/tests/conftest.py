import pytest

ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Call with (passed, detail): prints one PASS/FAIL line, repeated in the summary."""

    def emit(passed: bool, detail: str):
        line = f"[acceptance] {request.node.name}: {'PASS' if passed else 'FAIL'} ({detail})"
        with capsys.disabled():
            print("\n" + line)
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        assert passed, line

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
