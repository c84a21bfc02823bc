import numpy as np
import pytest
from hypothesis import settings

from krflab._alloc import retain_freed_memory
from krflab.grid import make_grid

retain_freed_memory()

settings.register_profile("krflab", max_examples=20, deadline=None, derandomize=True)
settings.load_profile("krflab")


@pytest.fixture
def grid1():
    return make_grid(1, 32)


@pytest.fixture
def grid2():
    return make_grid(2, 16)


def cosine(grid, amplitude, axis=0):
    return (amplitude * np.cos(2 * np.pi * grid.coord(axis)) * np.ones(grid.shape)).astype(complex)


ACCEPTANCE_LINES: dict[int, str] = {}


def acceptance_line(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
