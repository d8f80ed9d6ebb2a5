import time
from contextlib import contextmanager
from dataclasses import dataclass

import pytest


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool = False
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number:>2} {status}  {self.title} [{self.seconds:.1f}s] {self.detail}".rstrip()


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def criterion(request):
    """Context manager that times an acceptance check and records its outcome.

    A check fails if its body raises or if it overruns ``budget`` seconds.
    """

    @contextmanager
    def run(number: int, title: str, budget: float | None = None):
        res = CriterionResult(number, title)
        request.config._criteria.append(res)
        t0 = time.perf_counter()
        try:
            yield res
            res.seconds = time.perf_counter() - t0
            if budget is not None and res.seconds > budget:
                raise AssertionError(f"runtime {res.seconds:.1f}s exceeds budget {budget:.0f}s")
            res.passed = True
        finally:
            res.seconds = time.perf_counter() - t0
            print(res.line())

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = sorted(config._criteria, key=lambda r: r.number)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for r in results:
        terminalreporter.write_line(r.line())
