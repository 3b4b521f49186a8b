import pytest

from mtdcopf.case import parse_case
from mtdcopf.data import case_path, scenario_path


@pytest.fixture(scope="session")
def three_terminal():
    return parse_case(case_path("three_terminal"))


@pytest.fixture(scope="session")
def nordic_like():
    return parse_case(case_path("nordic_like"))


@pytest.fixture(scope="session")
def ac_small():
    return parse_case(case_path("ac_small"))


@pytest.fixture(scope="session")
def scenario_paths():
    return {name: scenario_path(name)
            for name in ("normal", "gen_outage", "converter_outage")}
