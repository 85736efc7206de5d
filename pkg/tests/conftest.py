import pytest
import torch

from hgvt.config import preset

torch.set_num_threads(1)


@pytest.fixture
def nano():
    return preset("nano")


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
