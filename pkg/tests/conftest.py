import itertools

import numpy as np
import pytest

from avalanche.lattice import rect_box


def small_shapes(max_sites, dims=(1, 2)):
    """Every box shape up to ``max_sites`` sites in the given dimensions."""
    out = []
    for d in dims:
        for shape in itertools.product(range(1, max_sites + 1), repeat=d):
            if np.prod(shape) <= max_sites and tuple(sorted(shape)) == shape:
                out.append(shape)
    return out


@pytest.fixture
def pair():
    """Lambda = {0, 1} in Z^1 at gamma = 1."""
    return rect_box((2,), 1.0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
