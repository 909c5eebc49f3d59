import warnings

import pytest
import torch

from smartseg.synthdata import make_dataset

warnings.filterwarnings("ignore", category=UserWarning, module="torch")


@pytest.fixture(scope="session")
def tiny_data():
    """Two labeled clips, three unlabeled, one test clip."""
    return make_dataset(2, 3, 1, seed=11)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one "PASS/FAIL" line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
