import math

import numpy as np
import pytest

from wdnflow.assembly import Factorization
from wdnflow.errors import Diverged, SingularSystem
from wdnflow.fixtures import generate_random_network, load_fixture
from wdnflow.inp import canonicalize, parse_inp
from wdnflow.network import Junction, Network, Pipe, prune_closed
from wdnflow.oracle import compare, newton_iterate
from wdnflow.solver import (
    AccelPolicy,
    InitialFlows,
    SolverConfig,
    StatusTracker,
    WorkingModel,
    acceleration_bounds,
    check_contraction,
    choose_adaptive_factors,
    diagnose_initial_point,
    iteration_error,
    linear_system_at,
    run,
    update_statuses,
)

from .conftest import MINIMAL_INP, default_solve, eight_node_scenario, newton_reference, with_valve


# ---------------------------------------------------------------- basic runs


def test_three_node_matches_reference(three_node, three_node_expected):
    state, report = run(three_node, SolverConfig(threshold=1e-9))
    assert report.converged
    derived = three_node_expected["derived"]
    assert state.head("2") == pytest.approx(derived["heads"]["2"], abs=1e-6)
    for link, q in derived["flows"].items():
        assert state.flow(link) == pytest.approx(q, abs=1e-9)


def test_three_node_against_published_table(three_node_expected):
    state, report = default_solve("three_node")
    pub = three_node_expected["published"]
    tol = pub["tolerances"]
    assert state.head("2") == pytest.approx(pub["heads_m"]["2"], abs=tol["head_m"])
    for link, q in pub["flows_m3s"].items():
        assert state.flow(link) == pytest.approx(q, abs=tol["flow_m3s"])
    lo, hi = tol["iterations_range"]
    assert lo <= report.iterations_used <= hi


def test_error_trace_consistent_with_threshold():
    _, report = default_solve("three_node")
    assert len(report.error_trace) == report.iterations_used
    assert report.error_trace[-1] < SolverConfig().threshold
    assert all(e >= SolverConfig().threshold for e in report.error_trace[:-1])
    assert report.trace_csv().splitlines()[0] == "iteration,error,pipe_step,contraction"


def test_iteration_error_is_euclidean():
    assert iteration_error([3.0, 4.0], [0.0, 0.0]) == 5.0
    with pytest.raises(ValueError):
        iteration_error([1.0], [1.0, 2.0])


def test_max_iter_reached_without_exception():
    state, report = run(fixture_anytown(), SolverConfig(max_iter=2))
    assert report.termination == "max_iter" and report.iterations_used == 2
    assert np.all(np.isfinite(state.vector))


def fixture_anytown():
    from .conftest import fixture_network

    return fixture_network("anytown_like")


@pytest.mark.parametrize(
    "kwargs",
    [{"threshold": 0.0}, {"max_iter": 0}, {"gp_base": 1.0}, {"n_step": 0}, {"flow_unit": -1.0}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_accel_policy_parse():
    assert AccelPolicy.parse("off") == AccelPolicy("off")
    assert AccelPolicy.parse("Adaptive") == AccelPolicy("adaptive")
    assert AccelPolicy.parse("uniform=0.5") == AccelPolicy("uniform", 0.5)
    with pytest.raises(ValueError):
        AccelPolicy.parse("fast")


def test_darcy_weisbach_matches_newton():
    net = canonicalize(parse_inp(MINIMAL_INP.replace("Headloss H-W", "Headloss D-W").replace("150  100", "150  0.26")))
    state, report = run(net)
    assert report.converged
    ref = newton_iterate(net).state
    assert state.flow("P1") == pytest.approx(ref.flow("P1"), rel=1e-4)
    assert state.head("J1") == pytest.approx(ref.head("J1"), abs=1e-3)


def test_pressure_driven_demand_converges():
    text = MINIMAL_INP.replace("[OPTIONS]", "[OPTIONS]\n Demand Model PDA\n Minimum Pressure 0\n Required Pressure 45")
    net = canonicalize(parse_inp(text))
    assert net.junctions[0].pdd is not None
    state, report = run(net, SolverConfig(threshold=1e-9, max_iter=5000))
    assert report.converged
    ref = newton_iterate(net).state
    # below the service head the delivered flow is less than the design demand
    assert 0.0 < state.flow("P1") < 1e-3
    assert state.flow("P1") == pytest.approx(ref.flow("P1"), rel=1e-6)


def test_closed_links_report_zero_flow(eight_node):
    net = with_valve(eight_node, "V1", status="CLOSED", fixed=True)
    pruned = prune_closed(net)
    assert len(pruned.valves) == 0
    # the branch behind the valve is stranded, so the pruned system is singular
    with pytest.raises(SingularSystem) as info:
        run(net)
    assert info.value.report.termination == "singular"


def test_closed_pipe_in_loop(anytown):
    from dataclasses import replace

    pipes = tuple(replace(p, status="CLOSED") if p.id == "5" else p for p in anytown.pipes)
    state, report = run(replace(anytown, pipes=pipes), SolverConfig(max_iter=20000, accel=AccelPolicy("adaptive")))
    assert report.converged
    assert state.flow("5") == 0.0


def test_warm_start_converges_immediately():
    ref = newton_reference("anytown_like").state
    _, report = run(fixture_anytown(), SolverConfig(init=InitialFlows.warm(ref)))
    assert report.converged and report.iterations_used <= 2


@pytest.mark.parametrize("seed", range(5))
def test_random_initial_flows_reach_same_answer(seed):
    net = fixture_anytown()
    cfg = SolverConfig(max_iter=20000, accel=AccelPolicy("adaptive"), init=InitialFlows.random(seed), threshold=1e-6)
    state, report = run(net, cfg)
    assert report.converged
    assert compare(state, newton_reference("anytown_like").state).EN < 1e-3


def test_bound_violations_reported_not_clamped(three_node):
    state, report = run(three_node, SolverConfig(q_max=0.055))
    assert report.converged
    assert any(v.startswith("link 12") for v in report.bound_violations)
    assert state.flow("12") > 0.055


def test_singular_run_attaches_report():
    net = Network(
        junctions=[Junction("A", 0.0, 1.0), Junction("B", 0.0, -1.0)],
        pipes=[Pipe("P", "A", "B", 100.0, 0.2, 100.0)],
    )
    with pytest.raises(SingularSystem) as info:
        run(net)
    assert info.value.report.termination == "singular"
    diag = diagnose_initial_point(net)
    assert not diag.invertible
    assert {"junction:A", "junction:B"} <= set(diag.implicated_rows)
    assert diag.to_dict()["contraction_estimate"] is None


# ---------------------------------------------------------------- valves


def test_prv_active_holds_downstream_head():
    state, report = run(eight_node_scenario("active_45"))
    assert report.converged
    assert report.final_statuses == {"V1": "ACTIVE"}
    assert state.head("9") == pytest.approx(235.0, abs=1e-9)


def test_prv_setting_above_upstream_opens():
    state, report = run(eight_node_scenario("active_100"))
    assert report.converged and report.final_statuses == {"V1": "OPEN"}
    flips = [f for f in report.status_flip_log if f["valve"] == "V1"]
    assert flips and flips[-1]["to"] == "OPEN"
    fixed_open, _ = run(eight_node_scenario("open"))
    assert compare(state, fixed_open).EN < 1e-3


def test_fixed_valve_never_flips():
    _, report = run(eight_node_scenario("open"))
    assert report.status_flip_log == []


def test_eight_node_matches_derived():
    derived = load_fixture("eight_node_prv").expected["derived"]
    for name in ("active_45", "active_100", "open"):
        state, _ = run(eight_node_scenario(name), SolverConfig(threshold=1e-8, max_iter=5000))
        for node, h in derived[name]["heads"].items():
            assert state.head(node) == pytest.approx(h, abs=1e-5), (name, node)


def test_status_freeze_after_repeated_flips(eight_node):
    model = WorkingModel(prune_closed(eight_node), 1e-3)
    tracker = StatusTracker(("ACTIVE",), (False,), freeze_after=3)
    target = model.valve_head_set[0]
    up, down = model.start[-1], model.end[-1]
    h = np.full(model.n_h, target + 5.0)
    q = np.zeros(model.net.n_flows)
    statuses = ("ACTIVE",)
    seen = []
    for n in range(6):
        # alternate between a starved upstream head and an overshooting downstream head
        h[up] = target - 1.0 if n % 2 == 0 else target + 5.0
        h[down] = target + 1.0
        statuses = update_statuses(h, q, model, statuses, tracker)
        seen.append(statuses[0])
    assert seen[:2] == ["OPEN", "ACTIVE"]
    assert tracker.frozen == [True]
    assert tracker.flips == [3]
    assert len(set(seen[2:])) == 1


def test_fcv_status_rules():
    from .test_linear_assembly import FCV_INP

    net = canonicalize(parse_inp(FCV_INP))
    model = WorkingModel(net, 1e-3)
    h = np.array([50.0, 40.0, 60.0])
    q = np.array([10.0, 5.0])
    assert update_statuses(h, q, model, ("OPEN",)) == ("ACTIVE",)
    assert update_statuses(h, np.array([10.0, 3.0]), model, ("OPEN",)) == ("OPEN",)
    assert update_statuses(np.array([30.0, 40.0, 60.0]), q, model, ("ACTIVE",)) == ("OPEN",)


# ---------------------------------------------------------------- contraction


def test_contraction_estimate_matches_dense_norm(eight_node):
    work = prune_closed(eight_node)
    model = WorkingModel(work, 1e-3)
    system = linear_system_at(eight_node, statuses={"V1": "ACTIVE"})
    statuses = ("ACTIVE",)
    xi = np.full(system.size, 30.0)
    xi[: model.n_h] = 0.0
    a_f = model.a_f(xi[model.n_h :], statuses)
    rows = model.n_h + model.pipe_like(statuses)
    est = check_contraction(system, a_f, rows, Factorization(system))
    inv = np.linalg.inv(system.A.toarray())
    exact = np.linalg.norm(inv[np.ix_(rows, rows)] @ np.diag(a_f), 2)
    assert est.converged
    assert est.norm == pytest.approx(exact, rel=1e-4)


def test_contraction_monitor_trace():
    _, report = run(eight_node_scenario("active_45"), SolverConfig(monitor_contraction=True))
    trace = report.contraction_trace
    assert len(trace) == report.iterations_used
    assert all(0.0 <= c < 1.0 for c in trace)
    assert report.contraction_stalls == 0


def test_initial_diagnostics_three_node(three_node):
    diag = diagnose_initial_point(three_node)
    assert diag.invertible and diag.n_variables == 5
    assert diag.contraction is not None and diag.contraction.norm >= 0.0


# ---------------------------------------------------------------- acceleration


def test_acceleration_bounds_simple():
    # threshold for R=1, mu=2 is |q| < 1/2; from q=0 with dq=0.1, a in (-5, 5)
    lo, hi = acceleration_bounds(0.0, 0.1, 1.0, 2.0)
    assert lo[0] == pytest.approx(-5.0) and hi[0] == pytest.approx(5.0)
    lo, hi = acceleration_bounds(0.0, 0.1, 1.0, 2.0, q_min=0.0, q_max=0.2)
    assert lo[0] == pytest.approx(0.0) and hi[0] == pytest.approx(2.0)


def test_acceleration_bounds_zero_step():
    lo, hi = acceleration_bounds([0.1, 0.9], [0.0, 0.0], 1.0, 2.0)
    assert lo[0] == -math.inf and hi[0] == math.inf
    assert lo[1] > hi[1]


def test_adaptive_factors_stay_inside_interval():
    rng = np.random.default_rng(3)
    for _ in range(200):
        lo = rng.uniform(-10, 1, size=8)
        hi = lo + rng.uniform(0.01, 2000, size=8)
        ratio = rng.uniform(-0.5, 1.2, size=8)
        a = choose_adaptive_factors(lo, hi, ratio, 1000.0, rng.uniform(0.1, 1.0))
        chosen = a > 0
        assert np.all(a >= 0) and np.all(a <= 1000.0)
        assert np.all((a[chosen] > lo[chosen]) & (a[chosen] < hi[chosen]))


def test_adaptive_factor_is_tail_sum():
    a = choose_adaptive_factors(np.array([-100.0]), np.array([100.0]), np.array([0.5]), 1000.0, 1.0)
    assert a[0] == pytest.approx(1.0)
    damped = choose_adaptive_factors(np.array([-100.0]), np.array([100.0]), np.array([0.9]), 1000.0, 0.5)
    assert damped[0] == pytest.approx(4.5)


def test_adaptive_cuts_iterations(anytown):
    _, off = default_solve("anytown_like")
    _, fast = run(anytown, SolverConfig(max_iter=20000, accel=AccelPolicy("adaptive")))
    assert off.converged and fast.converged
    assert fast.iterations_used < off.iterations_used
    assert fast.accel_log and all(entry["max"] <= 1000.0 for entry in fast.accel_log)


def test_oversized_uniform_acceleration_diverges(anytown):
    with pytest.raises(Diverged) as info:
        run(anytown, SolverConfig(max_iter=20000, accel=AccelPolicy("uniform", 50.0)))
    assert info.value.report.termination == "diverged"
    assert info.value.state is not None


# ---------------------------------------------------------------- scale


def test_generated_network_converges():
    net = generate_random_network(7, 60)
    state, report = run(net, SolverConfig(init=InitialFlows.zeros(), max_iter=2000, threshold=1e-6))
    assert report.converged
    assert compare(state, newton_iterate(net).state).EN < 1e-4


def test_decay_after_accelerated_jump_is_not_divergence(anytown):
    from dataclasses import replace

    from wdnflow.hydraulics import PDDParams

    # step ratios near one here produce extrapolation factors close to the cap and a large transient
    junctions = tuple(
        replace(j, pdd=PDDParams(j.demand, j.elevation + 60.0, j.elevation + 20.0)) for j in anytown.junctions
    )
    net = replace(anytown, junctions=junctions)
    state, report = run(net, SolverConfig(max_iter=20000, accel=AccelPolicy("adaptive"), threshold=1e-6))
    assert report.converged
    assert max(report.error_trace[100:]) > 10 * min(report.error_trace[:100])
    assert compare(state, newton_iterate(net).state).EN < 1e-4


def test_runaway_growth_is_divergence():
    net = generate_random_network(4, 18)
    with pytest.raises(Diverged, match="exploded"):
        run(net, SolverConfig(init=InitialFlows.uniform(0.03)))
