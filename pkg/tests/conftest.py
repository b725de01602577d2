import numpy as np
import pytest

from neuraleq.signal_model import PAM2, PAM4, Channel

TOY = Channel((1.0, 0.4, 0.2, 0.1), 0)


@pytest.fixture
def toy_channel():
    return TOY


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, passed, detail)."""
    def record(number, passed, detail):
        ACCEPTANCE.append((number, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
