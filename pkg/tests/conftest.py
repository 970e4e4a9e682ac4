"""Collects per-criterion outcomes from the acceptance suite and prints one
line per criterion in the terminal summary."""
import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


class CriterionLog:
    def __init__(self, store: dict):
        self.store = store

    def record(self, number: int, title: str, part: str, ok: bool, detail: str = "") -> None:
        entry = self.store.setdefault(number, {"title": title, "parts": []})
        entry["parts"].append((part, ok, detail))


@pytest.fixture(scope="session")
def criteria(pytestconfig):
    return CriterionLog(pytestconfig.stash[ACCEPTANCE])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        entry = store[number]
        ok = all(p[1] for p in entry["parts"])
        details = "; ".join(f"{p[0]}: {p[2]}" if p[2] else p[0] for p in entry["parts"])
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {entry['title']}  ({details})")
