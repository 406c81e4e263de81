import numpy as np
import pytest
import torch

from semretarget.character import make_synthetic_character
from semretarget.geometry import icosphere
from semretarget.sdf import build_sdf

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}

SPHERE_SPACING = 0.05


@pytest.fixture(scope="session")
def sphere():
    v, f = icosphere(4)
    return v, f


@pytest.fixture(scope="session")
def sphere_grid(sphere):
    v, f = sphere
    return build_sdf(v, f, spacing=SPHERE_SPACING, margin=1.05)


@pytest.fixture(scope="session")
def char0():
    return make_synthetic_character(seed=0, name="slim")


@pytest.fixture(scope="session")
def char_small():
    return make_synthetic_character(n_joints=9, seed=2, name="small", segments=6)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
