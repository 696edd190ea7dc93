import numpy as np
import pytest

from bima.kernel_basis import KernelSpec, VoxelGrid, build_bases
from bima.sem_model import MediationDataset


def make_dataset(n=8, shape=(4, 3), blocks=(2, 1), q=1, seed=0, basis_frac=None,
                 cutoff=0.9, kernel=None):
    """Small random dataset with matching bases; returns ``(data, bases)``."""
    rng = np.random.default_rng(seed)
    grid = VoxelGrid.lattice(shape, blocks)
    kernel = kernel or KernelSpec("matern", 0.5, 0.3)
    bases = build_bases(grid, kernel, cutoff_frac=cutoff, basis_frac=basis_frac)
    X = rng.standard_normal(n)
    C = rng.standard_normal((n, q))
    M = rng.standard_normal((n, grid.p))
    Y = rng.standard_normal(n)
    return MediationDataset(Y, X, C, M, grid), bases


@pytest.fixture
def small_problem():
    return make_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number: int, name: str, ok: bool, detail: str):
        _ACCEPTANCE[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(_ACCEPTANCE[number])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
