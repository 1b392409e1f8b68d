import pytest

from ground3d.synth import SynthConfig, gen_synthetic

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def tiny_corpus():
    return gen_synthetic(SynthConfig(num_scenes=8, val_scenes=2, seed=11))


@pytest.fixture(scope="session")
def report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def add(line: str):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
