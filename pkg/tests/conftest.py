import numpy as np
import pytest

from midl.autodiff import Tensor, backward, zero_grad


def finite_difference_check(params, loss_fn, h=1e-5, min_grad=1e-8):
    """Compare reverse-mode gradients with central differences, elementwise.

    Returns the largest relative error seen over entries with |grad| > min_grad.
    """
    zero_grad(params)
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            if abs(a) > min_grad:
                rel = abs(a - numeric) / max(abs(a), abs(numeric))
                worst = max(worst, rel)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one criterion outcome; the lines are printed after the run."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((number, name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {name}" + (f": {detail}" if detail else ""))
