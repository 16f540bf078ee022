import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_F(rng, n=None, spread=0.3):
    """Random 2x2 deformation gradients with positive determinant."""
    shape = (2, 2) if n is None else (n, 2, 2)
    while True:
        F = np.eye(2) + spread * rng.uniform(-1, 1, size=shape)
        J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        if np.all(J > 0.2):
            return F
