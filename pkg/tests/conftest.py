import numpy as np
import pytest
from hypothesis import settings

from softlabel.phantom import PhantomSpec, generate_phantom
from softlabel.volume import Grid, Volume

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def assert_monotone(info: dict) -> None:
    """Registration contract: final MSE never exceeds the starting MSE."""
    assert info["final_mse"] <= info["initial_mse"] * (1 + 1e-12) + 1e-300


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit="signal") -> Volume:
    data = np.asarray(data, dtype=np.float64)
    return Volume(Grid(data.shape[:3], spacing, origin), data, unit)


@pytest.fixture(scope="session")
def small_spec() -> PhantomSpec:
    return PhantomSpec(dims=(40, 32, 64), spacing=(7.5, 7.5, 7.5))


@pytest.fixture(scope="session")
def small_phantom(small_spec):
    return generate_phantom(small_spec, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, seconds: float, detail: str = "") -> str:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title} ({seconds:.1f}s){': ' + detail if detail else ''}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
