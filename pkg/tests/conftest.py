import numpy as np
import pytest

from haszsl.autodiff import Tape, Tensor


def directional_check(f, x0, direction, h=1e-5):
    """Relative error between the reverse-mode and central-difference directional derivative."""
    tape = Tape()
    x = tape.leaf(x0)
    analytic = float(np.sum(tape.backward(f(x))[x] * direction))
    numeric = (f(Tensor(x0 + h * direction)).item() - f(Tensor(x0 - h * direction)).item()) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def simplex_point(rng, n, lo=0.05):
    p = rng.uniform(lo, 1.0, size=n)
    return p / p.sum()


def zero_sum_direction(rng, n):
    d = rng.normal(size=n)
    return d - d.mean()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
