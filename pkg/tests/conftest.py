import functools

import pytest

from wdnflow.fixtures import load_fixture, load_network
from wdnflow.oracle import newton_iterate
from wdnflow.solver import SolverConfig, run

MINIMAL_INP = """\
[TITLE]
minimal
[JUNCTIONS]
 J1  10  1.0
[RESERVOIRS]
 R1  50
[PIPES]
 P1  R1  J1  100  150  100  0  Open
[OPTIONS]
 Units LPS
 Headloss H-W
[END]
"""


@functools.lru_cache(maxsize=None)
def fixture_network(name):
    return load_network(name)


@functools.lru_cache(maxsize=None)
def default_solve(name, max_iter=20000):
    return run(fixture_network(name), SolverConfig(max_iter=max_iter))


@functools.lru_cache(maxsize=None)
def newton_reference(name):
    return newton_iterate(fixture_network(name))


@pytest.fixture(scope="session")
def three_node():
    return fixture_network("three_node")


@pytest.fixture(scope="session")
def eight_node():
    return fixture_network("eight_node_prv")


@pytest.fixture(scope="session")
def anytown():
    return fixture_network("anytown_like")


@pytest.fixture(scope="session")
def three_node_expected():
    return load_fixture("three_node").expected


def with_valve(net, valve_id, **changes):
    """Copy of ``net`` with one valve's fields replaced."""
    from dataclasses import replace

    valves = tuple(replace(v, **changes) if v.id == valve_id else v for v in net.valves)
    return replace(net, valves=valves)


def eight_node_scenario(name):
    scenario = load_fixture("eight_node_prv").expected["scenarios"][name]
    changes = {k: v for k, v in scenario.items() if k != "valve"}
    return with_valve(fixture_network("eight_node_prv"), scenario["valve"], **changes)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
