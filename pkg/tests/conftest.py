import time

import pytest

_LINES = []


class _Criterion:
    def __init__(self, number, title, budget):
        self.number, self.title, self.budget = number, title, budget
        self.start = time.perf_counter()
        self.notes = []

    def note(self, text):
        self.notes.append(text)

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def check_time(self):
        if self.budget is not None:
            assert self.elapsed < self.budget, f"took {self.elapsed:.1f}s, budget {self.budget}s"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args[:2]
    budget = marker.kwargs.get("budget")
    crit = _Criterion(number, title, budget)
    yield crit
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    extra = "; ".join(crit.notes)
    _LINES.append((number, f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title} "
                           f"[{crit.elapsed:.1f}s]" + (f"  {extra}" if extra else "")))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, budget=None): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
