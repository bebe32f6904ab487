import numpy as np
import pytest

from desknav.dataset import DatasetSpec, generate_split
from desknav.scene import arena_from_grid


def open_arena(width_cells=60, height_cells=60, cell=0.1):
    occ = np.zeros((height_cells, width_cells), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    return arena_from_grid(occ, cell, id="open")


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec.uniform("CommonGoal", 2, arenas={"train": 2, "val": 1, "test": 1},
                               episodes_per_bin={"train": 2, "val": 2, "test": 2})


@pytest.fixture(scope="session")
def tiny_splits(tiny_spec):
    return {s: generate_split(tiny_spec, s) for s in ("train", "val", "test")}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on its own."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
