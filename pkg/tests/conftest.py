import numpy as np
import pytest

from fedobd.nn_model import ModelSpec, init_model

BLOCKS3 = (("layer1", ("layer1",)), ("layer2", ("layer2",)), ("head", ("head",)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return ModelSpec((4, 6, 5, 3), BLOCKS3, seed=7)


@pytest.fixture
def small_model(small_spec):
    return init_model(small_spec)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def check(criterion: str, ok: bool, detail: str):
        lines.append((criterion, bool(ok), detail))
        assert ok, f"criterion {criterion}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(lines, key=lambda t: (int(t[0].rstrip("abc")), t[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {criterion:<3} {detail}")
