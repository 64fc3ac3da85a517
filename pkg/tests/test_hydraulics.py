import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wdnflow.errors import ClosedValve, NegativeFlow, NonPositiveDimension
from wdnflow.hydraulics import (
    PDDParams,
    PipeProps,
    PumpProps,
    ValveProps,
    a_f_diagonal,
    a_f_threshold,
    darcy_friction_factor,
    fit_pump_curve,
    head_gain_pump,
    head_loss_pipe,
    head_loss_valve,
    linearize_pdd,
    linearize_pipe,
    linearize_pump,
    linearize_valve,
    pdd_demand,
    pipe_resistance,
)

# published 3-node solution: heads in m, flows in m^3/s
H1, H2, H3 = 213.4, 277.63, 276.8
Q12, Q23 = 5.8186e-2, 5.1877e-2


def test_hazen_williams_resistance_against_published_heads():
    R = pipe_resistance(304.8, 0.3048, 100, "H-W")
    assert R == pytest.approx(209, rel=0.02)
    assert R * Q23**1.852 == pytest.approx(H2 - H3, rel=0.10)


def test_resistance_linear_in_length_and_falls_with_roughness():
    assert pipe_resistance(200, 0.3, 100) == pytest.approx(2 * pipe_resistance(100, 0.3, 100), rel=1e-15)
    values = [pipe_resistance(100, 0.3, c) for c in (50, 100, 200, 1e3, 1e6, 1e8)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-9


def test_chezy_manning_resistance():
    assert pipe_resistance(100, 0.2, 0.012, "C-M") == pytest.approx(10.294 * 0.012**2 * 100 * 0.2**-5.33)


def test_darcy_resistance_matches_colebrook():
    D, eps, q = 0.3, 0.26e-3, 0.1
    R = pipe_resistance(1000, D, eps, "D-W", flow=q)
    re = 4 * q / (math.pi * D * 1.0219e-6)
    f = darcy_friction_factor(re, eps / D)
    colebrook = -2 * math.log10(eps / D / 3.7 + 2.51 / (re * math.sqrt(f)))
    assert 1 / math.sqrt(f) == pytest.approx(colebrook, rel=1e-6)
    assert R == pytest.approx(8 * f * 1000 / (9.80665 * math.pi**2 * D**5))
    assert darcy_friction_factor(1000.0, 1e-4) == pytest.approx(0.064)


def test_nonpositive_dimensions_rejected():
    with pytest.raises(NonPositiveDimension):
        pipe_resistance(0, 0.3, 100)
    with pytest.raises(NonPositiveDimension):
        PipeProps(0.0, 1.852)


def test_head_loss_pipe_values():
    p = PipeProps(1.0, 2.0)
    assert head_loss_pipe(0.0, p) == 0.0
    assert head_loss_pipe(3.0, p) == 9.0
    assert head_loss_pipe(-3.0, p) == -9.0


def test_head_loss_pipe_against_published_drop(three_node):
    loss = head_loss_pipe(Q23, three_node.pipe_props()[0])
    assert loss == pytest.approx(H2 - H3, rel=0.10)


@given(q=st.floats(-50, 50), dq=st.floats(1e-6, 10))
def test_head_loss_pipe_odd_and_increasing(q, dq):
    p = PipeProps(2.5, 1.852)
    assert head_loss_pipe(-q, p) == -head_loss_pipe(q, p)
    assert head_loss_pipe(q + dq, p) > head_loss_pipe(q, p)


def test_head_gain_pump_basics():
    p = PumpProps(50.0, 2.0, 2.0)
    assert head_gain_pump(0.0, p) == -50.0
    faster = PumpProps(50.0, 2.0, 2.0, speed=2.0)
    assert head_gain_pump(0.0, faster) == pytest.approx(4 * head_gain_pump(0.0, p))
    with pytest.raises(NegativeFlow):
        head_gain_pump(-0.1, p)


def test_head_gain_pump_against_published_heads(three_node):
    gain = head_gain_pump(Q12, three_node.pumps[0].props)
    assert -gain == pytest.approx(H2 - H1, abs=0.5)


@given(frac=st.floats(0, 1))
def test_pump_gain_nonpositive_in_operating_range(frac):
    p = PumpProps(80.0, 300.0, 2.3, speed=0.8)
    q_max = p.speed * (p.h0 / p.r) ** (1 / p.nu)
    assert head_gain_pump(frac * q_max, p) <= 1e-12


def test_valve_losses():
    pipe = PipeProps(7.0, 1.852)
    gpv = ValveProps("GPV", openness=1.0, R=7.0, mu=1.852)
    for q in (-0.3, 0.0, 0.2, 1.5):
        assert head_loss_valve(q, gpv) == pytest.approx(head_loss_pipe(q, pipe))
        half = ValveProps("GPV", openness=0.5, R=7.0, mu=1.852)
        assert head_loss_valve(q, half) == pytest.approx(2 * head_loss_valve(q, gpv))
    prv = ValveProps("PRV", status="OPEN", minor_loss=1e-3)
    assert head_loss_valve(2.0, prv) == pytest.approx(4e-3)
    with pytest.raises(ClosedValve):
        head_loss_valve(1.0, ValveProps("PRV", status="CLOSED"))


def test_linearize_pipe_identity():
    p = PipeProps(2.0, 1.852)
    assert linearize_pipe(0.0, p) == 0.0
    for q in (0.01, -0.01, 1.0, -1.0, 10.0, -10.0):
        assert linearize_pipe(q, p) + q == pytest.approx(head_loss_pipe(q, p), rel=1e-14)


def test_linearize_pump_identity(three_node):
    pumps = [three_node.pumps[0].props, PumpProps(60.0, 4.0, 2.0, 0.85)]
    for p in pumps:
        assert linearize_pump(0.0, PumpProps(p.h0, p.r, p.nu)) == (-p.h0, 0.0)
        for q in (0.1, 1.0, 5.0):
            c1, c2 = linearize_pump(q, p)
            assert c1 + c2 * q == pytest.approx(head_gain_pump(q, p), rel=1e-12)


def test_linearized_pump_row_at_published_state(three_node):
    c1, c2 = linearize_pump(Q12, three_node.pumps[0].props)
    # pump row: h_start - h_end - c2 q = c1 with the pump running 1 -> 2
    residual = H1 - H2 - c2 * Q12 - c1
    assert abs(residual) < 0.1


def test_linearize_valve_rows():
    prv = ValveProps("PRV", status="ACTIVE", head_setting=190.0 + 45.0)
    assert linearize_valve(0.3, prv).form == "head"
    assert linearize_valve(0.3, prv).constant == 235.0
    fcv = ValveProps("FCV", status="ACTIVE", flow_setting=0.02)
    assert linearize_valve(0.0, fcv) == linearize_valve(5.0, fcv)
    assert linearize_valve(5.0, fcv).constant == 0.02
    gpv = ValveProps("GPV", openness=1.0, R=3.0, mu=1.852)
    for q in (-0.4, 0.0, 0.7):
        assert linearize_valve(q, gpv).constant == pytest.approx(linearize_pipe(q, PipeProps(3.0, 1.852)))
    open_prv = ValveProps("PRV", status="OPEN", minor_loss=1e-3)
    assert linearize_valve(2.0, open_prv).constant + 2.0 == pytest.approx(head_loss_valve(2.0, open_prv))
    with pytest.raises(ClosedValve):
        linearize_valve(1.0, ValveProps("FCV", status="CLOSED"))


def test_gpv_constant_uses_openness_on_loss_only():
    gpv = ValveProps("GPV", openness=0.25, R=3.0, mu=2.0)
    q = 0.5
    assert linearize_valve(q, gpv).constant == pytest.approx(3.0 / 0.25 * q * q - q)


def test_pdd_regimes_and_continuity():
    d = PDDParams(d_dsgn=0.02, h_ser=130.0, h_min=110.0, gamma=0.5)
    assert linearize_pdd(140.0, d) == pytest.approx(0.02 - 140.0)
    assert linearize_pdd(100.0, d) == pytest.approx(-100.0)
    assert pdd_demand(120.0, d) == pytest.approx(0.02 / math.sqrt(2))
    assert abs(pdd_demand(130.0 - 1e-12, d) - 0.02) < 1e-9
    assert abs(pdd_demand(110.0 + 1e-18, d)) < 1e-9


@given(h=st.floats(50, 200), dh=st.floats(0, 50))
def test_pdd_nondecreasing(h, dh):
    d = PDDParams(0.02, 130.0, 110.0, 0.5)
    assert pdd_demand(h + dh, d) >= pdd_demand(h, d)


def test_a_f_diagonal():
    assert a_f_diagonal(0.0, 5.0, 1.852) == -1.0
    R, mu = 3.0, 1.852
    t = a_f_threshold(R, mu)
    below = a_f_diagonal(np.array([0.5 * t, -0.99 * t]), R, mu)
    above = a_f_diagonal(np.array([1.01 * t, -2 * t]), R, mu)
    assert np.all((below > -1) & (below < 0))
    assert np.all(above > 0)
    assert a_f_diagonal(t, R, mu) == pytest.approx(0.0, abs=1e-12)


def test_a_f_threshold_for_low_resistance_is_far_beyond_practical_flows():
    t = float(a_f_threshold(1e-5, 1.852))
    assert t >= 24.0
    assert t == pytest.approx((1 / (1.852e-5)) ** (1 / 0.852), rel=1e-12)


def test_pump_curve_fits():
    h0, r, nu = fit_pump_curve([(0.035, 105.0610812471), (0.0, 119.99976), (0.07, 30.0541695861)])
    assert (h0, nu) == (pytest.approx(119.99976), pytest.approx(2.59, rel=1e-6))
    h0, r, nu = fit_pump_curve([(10, 90), (20, 60)])
    assert nu == 2 and h0 - r * 100 == pytest.approx(90) and h0 - r * 400 == pytest.approx(60)
    pts = [(q, 70 - 0.01 * q**2.2) for q in (0, 10, 20, 30, 40)]
    h0, r, nu = fit_pump_curve(pts)
    assert (h0, r, nu) == (pytest.approx(70, rel=1e-6), pytest.approx(0.01, rel=1e-4), pytest.approx(2.2, rel=1e-5))
