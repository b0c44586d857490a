import numpy as np
import pytest

from mindqa import gridhouse as gh
from mindqa.harness import checks


@pytest.fixture(scope="session")
def house9():
    return gh.generate_house(1, n_rooms=2, size=9)


@pytest.fixture(scope="session")
def house15():
    return gh.generate_house(3, n_rooms=4, size=15)


@pytest.fixture(scope="session")
def tiny():
    return checks.tiny_fixture(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") != "call":
                continue
            for name, value in getattr(rep, "user_properties", ()):
                if name == "criterion":
                    lines.append((value[0], f"criterion {value[0]:>2} {'PASS' if rep.passed else 'FAIL'}  {value[1]}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
