import numpy as np
import pytest

from tasseg.tensor import current_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    current_tape().clear()
    yield
    current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
