import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_TOTAL = 11


def pytest_configure(config):
    config._acceptance = {}
    config._acceptance_started = set()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._acceptance_started:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_TOTAL + 1):
        if n in config._acceptance:
            line = config._acceptance[n]
        elif n in config._acceptance_started:
            line = f"criterion {n:2d}: FAIL  (error before the check)"
        else:
            line = f"criterion {n:2d}: not run"
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    request.config._acceptance_started.add(int(request.node.name.split("_")[2]))

    def record(n, ok, detail):
        request.config._acceptance[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(request.config._acceptance[n])
        assert ok, detail
    return record
