import numpy as np
import pytest

from mfdwave.harness import build_mesh
from mfdwave.operators import assemble


@pytest.fixture(scope="session")
def mesh_sequence():
    """Relaxed Voronoi meshes with h close to 0.2, 0.1 and 0.05 (shared by all tests)."""
    return [build_mesh({"h": h}) for h in (0.2, 0.1, 0.05)]


@pytest.fixture(scope="session")
def coarse_mesh(mesh_sequence):
    return mesh_sequence[0]


@pytest.fixture(scope="session")
def medium_mesh(mesh_sequence):
    return mesh_sequence[1]


@pytest.fixture(scope="session")
def fine_mesh(mesh_sequence):
    return mesh_sequence[2]


@pytest.fixture(scope="session")
def medium_ops(medium_mesh):
    return assemble(medium_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; lines are echoed in the terminal summary."""

    def record(number, title, checks):
        ok = all(passed for _, passed in checks)
        detail = "; ".join(f"{'ok' if passed else 'FAILED'}: {text}" for text, passed in checks)
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} - {title} [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
