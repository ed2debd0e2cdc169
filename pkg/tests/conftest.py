import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f at array x (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-3):
    """Max abs difference relative to the larger magnitude.

    The floor keeps gradients that vanish identically (e.g. a bias feeding a
    softmax) from turning rounding noise into a relative error of 1.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(floor, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report lines, shown in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
