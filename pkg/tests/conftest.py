from pathlib import Path

import pytest

from msmsim.harness.config import load_config, parse_config_text

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "msmsim" / "scenarios"


@pytest.fixture(scope="session")
def anemia():
    return load_config(SCENARIOS / "anemia.cfg")


@pytest.fixture(scope="session")
def drop_in():
    return load_config(SCENARIOS / "drop_in.cfg")


@pytest.fixture(scope="session")
def two_confounders():
    return load_config(SCENARIOS / "two_confounders.cfg")


def scenario_from(text: str):
    return parse_config_text(text).scenario


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
