from __future__ import annotations

import numpy as np
import pytest

from bnlab import tensor as T

FD_STEP = 1e-6
FD_FLOOR = 1e-5  # denominators below this are treated as this (absolute error regime)


def projected_loss(out: T.Tensor, proj: np.ndarray) -> T.Tensor:
    """Scalar sum(out * proj) so every output coordinate feeds the check."""
    return T.tsum(T.mul(out, T.Tensor(proj, dtype=out.dtype)))


def fd_check(fn, tensors: dict[str, T.Tensor], probes: int, seed: int = 0, h: float = FD_STEP) -> float:
    """Max relative error between backward() and central differences.

    ``fn()`` rebuilds the scalar loss from the current tensor values.
    Probes are spread over all tensors in proportion to their size (at least
    one each).
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = fn()
    T.backward(loss)
    analytic = {n: t.grad.copy() for n, t in tensors.items()}
    rng = np.random.default_rng(seed)
    names = list(tensors)
    sizes = np.array([tensors[n].size for n in names], dtype=float)
    picks = list(names) + list(rng.choice(names, size=max(0, probes - len(names)), p=sizes / sizes.sum()))
    worst = 0.0
    with T.no_grad():
        for name in picks:
            t = tensors[name]
            i = int(rng.integers(t.size))
            flat = t.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = float(analytic[name].reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), FD_FLOOR))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[n])
