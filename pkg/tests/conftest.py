import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ditair.numerics.rng import Rng

settings.register_profile(
    "ditair", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ditair")


@pytest.fixture
def rng():
    return Rng(1234)


def randn(rng: Rng, *shape, dtype=np.float64):
    return rng.normal(shape, dtype=dtype)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``(passed, detail)`` for an acceptance criterion; reported at session end."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
