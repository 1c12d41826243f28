import sys
import numpy as np
import pytest
import torch

from skewles.grid import Grid
from skewles.projection import project

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_velocity(grid: Grid, rng, projected: bool = False, batch=()):
    vel = torch.tensor(rng.standard_normal((*batch, 2, grid.ny, grid.nx)))
    if projected:
        vel = project(vel, grid)
    return vel


def random_scalar(grid: Grid, rng, batch=()):
    return torch.tensor(rng.standard_normal((*batch, grid.ny, grid.nx)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
