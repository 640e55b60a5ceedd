import numpy as np
import pytest

from layerdecomp import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture(autouse=True)
def _float64_and_clean_tape():
    T.set_default_dtype(np.float64)
    T.current_tape().clear()
    yield
    T.set_default_dtype(np.float64)
    T.current_tape().clear()


ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance_line(request):
    """Record the one-line verdict of an acceptance criterion (printed in the terminal summary)."""
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
