import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wellfusion.errors import DomainError, InfeasibleConfigError
from wellfusion.well_model import (LayerParams, WellConfig, check_constraints, fracturing_flow_range,
                                   layer_flow_at_pressure, layer_flows, layer_pressure, min_injection_flow,
                                   nozzle_coefficients, opening_sweep, pressure_flow_curve, slope_breaks,
                                   solve_operating_point, throttle_coefficient, wavecode_amplitude)

L1 = LayerParams(2.23, 1.35)
L2 = LayerParams(1.12, 2.07)


def table1(C0=10.0, P0=6.0, Pm=6.0, **kw):
    return WellConfig((L1, L2), C0, P0, Pm, **kw)


def test_throttle_coefficient_direct_value():
    lay = LayerParams(2.23, 1.35, 0.5, 0.8, pipe_inner_diameter_d=0.062)
    expected = (math.pi * 0.062 ** 2 * 0.8 / 4) * math.sqrt(2 / (1000 * 0.75))
    assert throttle_coefficient(lay, 1000.0) == pytest.approx(expected, rel=1e-14)


def test_throttle_coefficient_rejects_full_opening_and_is_linear_in_cm():
    lay = LayerParams(2.23, 1.35, 0.5)
    with pytest.raises(DomainError):
        throttle_coefficient(lay, 1000.0, beta=1.0)
    with pytest.raises(DomainError):
        throttle_coefficient(lay, -1.0)
    doubled = LayerParams(2.23, 1.35, 0.5, 1.6)
    assert throttle_coefficient(doubled, 1000.0) == pytest.approx(2 * throttle_coefficient(lay, 1000.0))


def test_throttle_coefficient_grows_with_opening():
    c = [throttle_coefficient(L1, 1000.0, beta=b) for b in np.linspace(0.05, 0.95, 10)]
    assert np.all(np.diff(c) > 0)


@pytest.mark.parametrize("layer,q,p", [(L1, 2.23, 2.35), (L1, 0.0, 1.35), (L2, 1.12, 3.07)])
def test_layer_pressure(layer, q, p):
    assert layer_pressure(layer, q) == pytest.approx(p, abs=1e-12)


def test_layer_pressure_rejects_negative_flow():
    with pytest.raises(DomainError):
        layer_pressure(L1, -0.1)


def test_fracturing_range_table1():
    lo, hi = fracturing_flow_range(table1())
    assert lo == pytest.approx(10 * math.sqrt(2.07 - 1.35))
    assert hi == pytest.approx(10 * (math.sqrt(6 - 1.35) + math.sqrt(6 - 2.07)))


def test_fracturing_range_single_layer_and_monotone_in_pm():
    single = WellConfig((L2,), 10.0, 6.0, 6.0)
    assert fracturing_flow_range(single)[0] == 0.0
    lo1, hi1 = fracturing_flow_range(table1(Pm=6.0))
    lo2, hi2 = fracturing_flow_range(table1(Pm=6.5))
    assert lo1 == lo2 and hi2 > hi1


def test_fracturing_range_infeasible():
    with pytest.raises(InfeasibleConfigError):
        fracturing_flow_range(table1(Pm=2.0))


def test_min_injection_flow_hand_values():
    cfg = table1()
    k1 = 1 / 2.23
    s1 = (math.sqrt(k1 ** 2 + 4 * (2.07 - 1.35)) - k1) / 2
    assert min_injection_flow(cfg, [1.0, 1.0]) == pytest.approx(s1 + 0.0, rel=1e-12)
    same_b = WellConfig((LayerParams(2.23, 2.0), LayerParams(1.12, 2.0)), 10.0, 6.0, 6.0)
    assert min_injection_flow(same_b, [1.0, 2.0]) == 0.0


def test_min_injection_flow_scaling_sweep():
    # each summand is ~C*sqrt(b_max - b) for small C and saturates at (b_max - b)/k
    cfg = table1()
    scales = np.geomspace(0.01, 100, 30)
    q = np.array([min_injection_flow(cfg, [s, s]) for s in scales])
    q2 = np.array([min_injection_flow(cfg, [2 * s, 2 * s]) for s in scales])
    assert np.all(np.diff(q) > 0)
    assert np.all(q2 < 2 * q) and np.all(q2 > q)
    assert q[-1] == pytest.approx((2.07 - 1.35) * 2.23, rel=1e-3)


def test_layer_flow_quadratic_root():
    k = 1 / 2.23
    q = layer_flow_at_pressure(L1, 1.0, 2.35)
    assert q * q + k * q - 1.0 == pytest.approx(0.0, abs=1e-12)
    assert layer_flow_at_pressure(L1, 1.0, 1.35) == 0.0
    assert layer_flow_at_pressure(L1, 1.0, 1.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(inv_k=st.floats(0.1, 10), b=st.floats(0.1, 5), C=st.floats(0.01, 20), dp=st.floats(0, 10))
def test_layer_flow_root_property(inv_k, b, C, dp):
    lay = LayerParams(inv_k, b)
    q = layer_flow_at_pressure(lay, C, b + dp)
    assert q >= 0
    scale = max(1.0, C * C * (dp + 1))
    assert abs(q * q + C * C * lay.k * q - C * C * dp) / scale < 1e-9


def test_layer_flow_increasing_in_pressure():
    q = [layer_flow_at_pressure(L2, 1.5, p) for p in np.linspace(2.1, 6, 20)]
    assert np.all(np.diff(q) > 0)


def _bisect(cfg, C):
    lo, hi = 0.0, cfg.pump_pressure_P0
    for _ in range(200):
        mid = (lo + hi) / 2
        if cfg.ground_valve_C0 * math.sqrt(cfg.pump_pressure_P0 - mid) > layer_flows(cfg, C, mid).sum():
            lo = mid
        else:
            hi = mid
    return lo


def test_operating_point_matches_bisection_oracle():
    cfg = table1()
    op = solve_operating_point(cfg, [1.0, 1.0])
    assert op.post_valve_pressure_P == pytest.approx(_bisect(cfg, np.array([1.0, 1.0])), abs=1e-9)
    assert op.total_flow == pytest.approx(op.layer_flows_qv.sum(), rel=1e-15)
    assert op.post_valve_pressure_P < cfg.pump_pressure_P0


def test_operating_point_closed_nozzles():
    cfg = table1()
    op = solve_operating_point(cfg, [0.0, 0.0])
    assert op.total_flow == 0.0 and op.post_valve_pressure_P == cfg.pump_pressure_P0


def test_operating_point_low_pump_pressure_gives_diagnostic():
    cfg = WellConfig((L1, L2), 10.0, 1.0, 6.0)
    op = solve_operating_point(cfg, [1.0, 1.0])
    assert op.total_flow == 0.0 and op.diagnostic


def test_single_coefficient_sweep_drives_curve_down():
    cfg = table1()
    P, Q = [], []
    for c in np.linspace(0.2, 3.0, 10):
        op = solve_operating_point(cfg, [c, 1.0])
        P.append(op.post_valve_pressure_P)
        Q.append(op.total_flow)
    assert np.all(np.diff(P) < 0) and np.all(np.diff(Q) > 0)


def test_opening_sweep_uses_throttle_law():
    cfg = table1(C0=10.0).with_openings([0.5, 0.5])
    ops = opening_sweep(cfg, np.linspace(0.2, 0.9, 6), layer=0)
    P = [op.post_valve_pressure_P for op in ops]
    assert np.all(np.diff(P) < 0)


def test_constraints_compliant_and_violations():
    cfg = table1(C0=10.0, P0=6.0, Pm=6.5)
    op = solve_operating_point(cfg, [6.0, 6.0])
    rep = check_constraints(cfg, op, [6.0, 6.0])
    assert rep.ok, rep.violations()
    zero = solve_operating_point(cfg, [0.0, 0.0])
    assert "total_flow_lower" in check_constraints(cfg, zero, [3.0, 3.0]).violations()
    tight = table1(C0=10.0, P0=6.0, Pm=2.08)
    rep = check_constraints(tight, solve_operating_point(tight, [3.0, 3.0]), [3.0, 3.0])
    assert not rep.ok


def test_curve_break_and_sum():
    cfg = table1()
    curve = pressure_flow_curve(cfg, np.linspace(0, 6, 601), [1.0, 1.0])
    assert np.allclose(curve[:, -1], curve[:, 1:-1].sum(axis=1), rtol=1e-12, atol=0)
    breaks = slope_breaks(curve)
    assert np.any(np.isclose(breaks, 2.07, atol=1e-9))
    assert np.any(np.isclose(breaks, 1.35, atol=1e-9))


def test_single_layer_curve_equals_layer():
    cfg = WellConfig((L1,), 10.0, 6.0, 6.0)
    curve = pressure_flow_curve(cfg, np.linspace(0, 6, 50), [1.0])
    assert np.array_equal(curve[:, 1], curve[:, -1])


def test_wavecode_amplitude():
    cfg = table1(C0=10.0)
    zero = wavecode_amplitude(cfg, 1, 0.5, 0.5)
    assert zero.delta_q == 0 and zero.delta_P == 0
    amp = wavecode_amplitude(cfg, 1, 0.5, 0.75)
    lo = solve_operating_point(cfg, nozzle_coefficients(cfg, [L1.nozzle_opening_beta, 0.5]))
    hi = solve_operating_point(cfg, nozzle_coefficients(cfg, [L1.nozzle_opening_beta, 0.75]))
    assert amp.delta_q == pytest.approx(hi.layer_flows_qv[1] - lo.layer_flows_qv[1], rel=1e-9)
    assert amp.delta_q > 0 and amp.delta_P < 0
    stiff = wavecode_amplitude(table1(C0=40.0), 1, 0.5, 0.75)
    assert abs(stiff.delta_P) < abs(amp.delta_P)
