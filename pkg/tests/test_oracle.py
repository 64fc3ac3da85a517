import json

import numpy as np
import pytest

from wdnflow.errors import DimensionMismatch, NewtonStall
from wdnflow.fixtures import FIXTURE_NAMES, generate_random_network, load_fixture
from wdnflow.inp import canonicalize, parse_inp
from wdnflow.oracle import (
    _Residual,
    compare,
    load_reference_state,
    newton_iterate,
    newton_solve,
    nonlinear_residuals,
    series_pump_pipe_bisection,
)
from wdnflow.network import prune_closed
from wdnflow.solver import HydraulicState

from .conftest import MINIMAL_INP, eight_node_scenario, fixture_network, newton_reference


def test_newton_matches_scalar_reduction(three_node):
    exact = series_pump_pipe_bisection(three_node)
    newton = newton_solve(three_node, tol=1e-12)
    np.testing.assert_allclose(newton.h, exact.h, atol=1e-9)
    np.testing.assert_allclose(newton.q, exact.q, atol=1e-12)


def test_scalar_reduction_rejects_other_topologies(eight_node):
    with pytest.raises(ValueError):
        series_pump_pipe_bisection(eight_node)


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_newton_residual_small(name):
    result = newton_reference(name)
    assert result.residual_norm <= 1e-8
    res = nonlinear_residuals(fixture_network(name), result.state, result.statuses)
    assert np.max(np.abs(res)) <= 1e-8


def test_frozen_reference_three_node(three_node_expected):
    derived = three_node_expected["derived"]
    state = newton_reference("three_node").state
    for node, h in derived["heads"].items():
        assert state.head(node) == pytest.approx(h, abs=1e-8)
    for link, q in derived["flows"].items():
        assert state.flow(link) == pytest.approx(q, abs=1e-11)


def test_frozen_reference_anytown():
    derived = load_fixture("anytown_like").expected["derived"]
    state = newton_reference("anytown_like").state
    for node, h in derived["heads"].items():
        assert state.head(node) == pytest.approx(h, abs=1e-7)


def test_frozen_reference_eight_node_scenarios():
    derived = load_fixture("eight_node_prv").expected["derived"]
    for name in ("active_45", "active_100", "open"):
        result = newton_iterate(eight_node_scenario(name))
        assert list(result.statuses) == derived[name]["statuses"]
        for link, q in derived[name]["flows"].items():
            assert result.state.flow(link) == pytest.approx(q, abs=1e-10), (name, link)


@pytest.mark.parametrize("name", ["anytown_like", "eight_node_prv"])
def test_analytic_jacobian_matches_finite_differences(name):
    work = prune_closed(fixture_network(name))
    statuses = tuple("OPEN" for _ in work.valves)
    F = _Residual(work, statuses)
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.uniform(150, 250, work.n_heads), rng.uniform(-0.05, 0.1, work.n_flows)])
    J = F.jacobian(x).toarray()
    step = 1e-6
    fd = np.empty_like(J)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        fd[:, k] = (F(x + e) - F(x - e)) / (2 * step)
    np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-6)


def test_pressure_driven_jacobian():
    text = MINIMAL_INP.replace("[OPTIONS]", "[OPTIONS]\n Demand Model PDA\n Required Pressure 45")
    work = canonicalize(parse_inp(text))
    F = _Residual(work, ())
    x = np.array([40.0, 50.0, 0.0005])
    J = F.jacobian(x).toarray()
    fd = np.column_stack([(F(x + e) - F(x - e)) / 2e-7 for e in np.eye(3) * 1e-7])
    np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-7)


def test_explicit_statuses_are_not_resolved():
    net = eight_node_scenario("active_100")
    held = newton_iterate(net, statuses={"V1": "ACTIVE"})
    assert held.statuses == ("ACTIVE",)
    # held active with a setting above the upstream head, the valve must add head
    assert held.state.head("9") > held.state.head("3")
    assert newton_iterate(net).statuses == ("OPEN",)


def test_newton_stall_reported(anytown):
    with pytest.raises(NewtonStall):
        newton_iterate(anytown, max_iter=1)


def test_warm_start_from_solution_is_immediate():
    ref = newton_reference("anytown_like")
    again = newton_iterate(fixture_network("anytown_like"), init=ref.state)
    assert again.iterations <= 1


def test_random_networks_solve():
    for seed in (1, 2, 3):
        net = generate_random_network(seed, 25)
        assert newton_iterate(net).residual_norm <= 1e-8


def test_residuals_need_full_state(three_node):
    partial = HydraulicState(["2"], ["12"], [1.0], [0.0])
    with pytest.raises(DimensionMismatch):
        nonlinear_residuals(three_node, partial)


def test_oracle_independent_of_linearization():
    import wdnflow.oracle as oracle

    source = open(oracle.__file__).read()
    assert "assembly" not in source
    assert "WorkingModel" not in source and "linearize" not in source


# ---------------------------------------------------------------- metrics


def make_state(h, q):
    return HydraulicState(["a", "b"], ["x", "y"], h, q)


def test_compare_metrics_by_hand():
    metrics = compare(make_state([10.0, 2.0], [0.5, 0.0]), make_state([9.0, 2.0], [0.25, 0.0]))
    np.testing.assert_allclose(metrics.AE, [1.0, 0.0, 0.25, 0.0])
    assert metrics.RE[0] == pytest.approx(100 / 9)
    assert metrics.RE[2] == pytest.approx(100.0)
    assert metrics.RE[3] is None
    assert metrics.EN == pytest.approx(np.hypot(1.0, 0.25))
    assert metrics.fraction_within(0.0, 0.5) == 0.75
    counts = [b["count"] for b in metrics.histogram()]
    assert sum(counts) == 4 and counts[0] == 2
    doc = metrics.to_dict()
    assert doc["max_AE"] == 1.0 and doc["AE"]["q:x"] == 0.25


def test_compare_matches_ids_not_positions():
    a = make_state([1.0, 2.0], [3.0, 4.0])
    b = HydraulicState(["b", "a"], ["y", "x"], [2.0, 1.0], [4.0, 3.0])
    assert compare(a, b).EN == 0.0


def test_compare_rejects_mismatched_ids():
    a = make_state([1.0, 2.0], [3.0, 4.0])
    b = HydraulicState(["a", "c"], ["x", "y"], [1.0, 2.0], [3.0, 4.0])
    with pytest.raises(DimensionMismatch):
        compare(a, b)


def test_reference_file_round_trip(tmp_path):
    state = make_state([1.5, 2.5], [0.1, -0.2])
    path = tmp_path / "ref.json"
    path.write_text(json.dumps({"heads": state.heads, "flows": state.flows}))
    assert compare(load_reference_state(path), state).EN == 0.0
    path.write_text(json.dumps({"heads": state.heads}))
    with pytest.raises(DimensionMismatch):
        load_reference_state(path)
