import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxes(rng, n, size=100.0, min_side=2.0, max_side=40.0):
    w = rng.uniform(min_side, max_side, n)
    h = rng.uniform(min_side, max_side, n)
    x = rng.uniform(0, size - w)
    y = rng.uniform(0, size - h)
    return np.stack([x, y, x + w, y + h], axis=1)


# ------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``record(n, ok, detail)`` stores one verdict for the end-of-run summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
