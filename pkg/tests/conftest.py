import numpy as np
import pytest

from ggcam.numerics import Tensor, backward


def numeric_grad(f, arrays, index, eps=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = target[i]
        target[i] = old + eps
        hi = f(*base)
        target[i] = old - eps
        lo = f(*base)
        target[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Relative error below ``rtol``; tiny entries compared absolutely."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    small = np.abs(analytic) < atol
    assert np.all(np.abs(numeric[small]) < max(atol, 1e-6)), "expected ~zero gradient"
    big = ~small
    if big.any():
        rel = np.abs(analytic[big] - numeric[big]) / np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))
        assert rel.max() < rtol, f"max relative error {rel.max():.3g}"


def check_op_gradient(build, arrays, rtol=1e-4):
    """``build`` maps leaf tensors to a scalar tensor; compare every leaf's gradient with finite differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = backward(build(*leaves), leaves)

    def f(*vals):
        return float(build(*[Tensor(v) for v in vals]).data)

    for i, a in enumerate(arrays):
        assert_grad_close(grads[i], numeric_grad(f, [np.array(x, dtype=float) for x in arrays], i), rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
