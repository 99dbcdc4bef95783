import numpy as np
import pytest

import acceptance_log


@pytest.fixture
def rng():
    return np.random.default_rng(20081201)


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
