import pytest

ACCEPTANCE_IDS = [f"AC-{i}" for i in range(1, 9)]
_results: dict = {}
_state = {"collected": False}


@pytest.fixture(scope="session")
def ac_record():
    """Record one acceptance outcome; the lines are printed in the terminal summary."""
    def record(ac_id: str, passed: bool, detail: str) -> bool:
        _results[ac_id] = (bool(passed), detail)
        print(f"{ac_id}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)
    return record


def pytest_collection_modifyitems(session, config, items):
    _state["collected"] = any(item.module.__name__.endswith("test_acceptance") for item in items)


def pytest_terminal_summary(terminalreporter):
    if not _state["collected"]:
        return
    terminalreporter.section("acceptance criteria")
    for ac_id in ACCEPTANCE_IDS:
        if ac_id in _results:
            ok, detail = _results[ac_id]
            terminalreporter.write_line(f"{ac_id}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"{ac_id}: NOT RUN  (deselected, or its fixture errored)")
