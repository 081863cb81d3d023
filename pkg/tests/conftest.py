import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hmpinfer import tensor_core as tc

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture(autouse=True)
def _reset_throttle():
    tc.set_compute_throttle(1.0)
    yield
    tc.set_compute_throttle(1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(rng, *shape, dtype=np.float32):
    return rng.standard_normal(shape).astype(dtype)


# -- acceptance verdicts, echoed at the end of the run

_VERDICTS = pytest.StashKey[list]()


class Criterion:
    def __init__(self, lines: list, number: int, title: str):
        self.lines, self.number, self.title = lines, number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def check(self, ok: bool, text: str) -> None:
        self.note(("ok: " if ok else "FAILED: ") + text)
        assert ok, text

    def __enter__(self):
        return self

    def __exit__(self, etype, exc, tb):
        status = "PASS" if etype is None else "FAIL"
        detail = "; ".join(self.details)
        if etype is not None and not isinstance(exc, AssertionError):
            detail = f"{detail}; {etype.__name__}: {exc}".lstrip("; ")
        line = f"{status} criterion {self.number}: {self.title}" + (f" [{detail}]" if detail else "")
        self.lines.append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_VERDICTS, [])
    return lambda number, title: Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
