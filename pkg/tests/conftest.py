import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("tokenseg", deadline=None, max_examples=50)
settings.load_profile("tokenseg")

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdicts(request):
    """Append (criterion, title, passed, detail) tuples; echoed in the terminal summary."""
    return request.config.stash[_VERDICTS]


def pytest_terminal_summary(terminalreporter, config):
    rows = sorted(config.stash.get(_VERDICTS, []), key=lambda r: r[0])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, passed, detail in rows:
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
