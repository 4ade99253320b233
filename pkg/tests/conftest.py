import numpy as np
import pytest

from femzz.mesh import macro_mesh


def random_refine(mesh, rng, rounds=3, frac=0.3):
    """Refine a random fraction of the leaves a few times."""
    for _ in range(rounds):
        leaves = mesh.leaves()
        k = max(1, int(frac * len(leaves)))
        mesh.refine(rng.choice(leaves, size=k, replace=False))
    return mesh


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def unit_square():
    """(0,1)^2 as two triangles."""
    return macro_mesh("square2", (0.0, 0.0), (1.0, 1.0))


ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    """Store one pass/fail line for the terminal summary and echo it."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
