import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from wellfusion.errors import DomainError
from wellfusion.mpc import MpcConfig, MpcController
from wellfusion.plant import StateSpaceModel
from wellfusion.weights import (OVERSHOOT_TOL, LoopEvaluator, ReducedModel, closed_loop_gain, closed_loop_model,
                                continuous_equivalent, d2c_bilinear, damping_parameter, directed_channel,
                                feedback_filter, first_peak_time, internal_model_components, optimal_weight,
                                overshoot_discriminant, reduce_order, step_metrics, step_response,
                                steady_state_error, write_sweep_csv)

CFG = MpcConfig(10, 1, (1.0,), (0.8,), (0.4,))


def siso(a=0.85, b=0.3, ts=1.0):
    return StateSpaceModel([[a, 0.1], [0.0, 0.7]], [[0.0], [b]], [[1.0, 0.0]], ts=ts)


def simulate_mpc(plant, model, cfg, n):
    ctl = MpcController(model, cfg)
    x = np.zeros(plant.n)
    ys = []
    y = plant.C @ x
    for _ in range(n):
        u = ctl.step(y, [1.0])
        x = plant.A @ x + plant.B @ u
        y = plant.C @ x
        ys.append(y[0])
    return np.array(ys)


@pytest.mark.parametrize("gain", [1.0, 1.5, 0.7])
def test_closed_loop_model_matches_controller_simulation(gain):
    model = siso()
    plant = StateSpaceModel(model.A, model.B * gain, model.C, ts=1.0)
    cl = closed_loop_model(plant, model, CFG)
    y = step_response(cl, 60)[:, 0, 0]
    assert np.allclose(y, simulate_mpc(plant, model, CFG, 60), atol=1e-12)
    assert abs(steady_state_error(cl)[0, 0]) < 1e-8


def test_imc_gain_formula_matches_state_space():
    model = siso()
    plant = StateSpaceModel(model.A, model.B * 1.3, model.C, ts=1.0)
    comps = internal_model_components(model, CFG)
    cl = closed_loop_model(plant, model, CFG)
    for z in (1.3 + 0.2j, -0.4 + 1.1j, 2.0):
        K = closed_loop_gain(plant, comps, z)
        direct = cl.C @ np.linalg.solve(z * np.eye(cl.n) - cl.A, cl.B)
        assert np.allclose(K, direct, rtol=1e-9)


def test_internal_model_integral_action():
    model = siso()
    for g in (0.5, 1.0, 2.0):
        plant = StateSpaceModel(model.A, model.B * g, model.C, ts=1.0)
        comps = internal_model_components(model, CFG)
        K = closed_loop_gain(plant, comps, 1.0 + 1e-9)
        assert abs(K[0, 0] - 1.0) < 1e-6


def test_feedback_filter_dc_and_pole():
    f = feedback_filter([0.35, 0.2], 1.0)
    assert np.allclose(f.dc_gain(), np.eye(2))
    assert np.allclose(np.sort(np.linalg.eigvals(f.A)), [0.65, 0.8])


def test_bilinear_round_trip():
    cont = StateSpaceModel([[-0.3, 1.0], [0.0, -0.8]], [[0.0], [1.0]], [[1.0, 0.0]])
    A, B, C, D, _ = signal.cont2discrete((cont.A, cont.B, cont.C, cont.D), 0.5, method="bilinear")
    back = d2c_bilinear(StateSpaceModel(A, B, C, D, ts=0.5))
    assert np.allclose(np.sort(np.linalg.eigvals(back.A)), [-0.8, -0.3])
    assert np.allclose(back.dc_gain(), cont.dc_gain())
    tf = continuous_equivalent(StateSpaceModel(A, B, C, D, ts=0.5))
    assert tf.den[0] == pytest.approx(1.0)
    with pytest.raises(DomainError):
        d2c_bilinear(cont)


@settings(max_examples=60, deadline=None)
@given(a1=st.floats(0.05, 4), a2=st.floats(0.01, 4), b1=st.floats(-2, 2), b2=st.floats(0.01, 4))
def test_reduced_step_matches_scipy(a1, a2, b1, b2):
    red = ReducedModel(np.array([a1, a2]), np.array([b1, b2]))
    t = np.linspace(0, 20, 81)
    _, ref = signal.step(([b1, b2], [1.0, a1, a2]), T=t)
    assert np.allclose(red.step(t), ref, atol=1e-7 * max(1.0, np.abs(ref).max()))


def test_reduce_order_recovers_second_order_system():
    a1, a2, b1, b2 = 0.6, 0.25, 0.1, 0.25
    cont = signal.StateSpace(*signal.tf2ss([b1, b2], [1, a1, a2]))
    full = StateSpaceModel(cont.A, cont.B, cont.C, cont.D)
    red = reduce_order(full, 60.0, te=0.05)
    assert np.allclose(red.alpha, [a1, a2], rtol=1e-3)
    assert np.allclose(red.beta, [b1, b2], rtol=1e-3)


def test_discriminant_and_damping_by_hand():
    red = ReducedModel(np.array([1.0, 1.0]), np.array([0.5, 1.0]))
    assert overshoot_discriminant(red).value == pytest.approx(math.sqrt(1 - 0.5 + 0.25))
    assert damping_parameter(red) == pytest.approx(math.sqrt(0.75))
    neg = ReducedModel(np.array([5.0, 1.0]), np.array([1.0, 1.0]))
    assert overshoot_discriminant(neg).clamped and overshoot_discriminant(neg).value == 0.0
    assert damping_parameter(neg) is None


@settings(max_examples=40, deadline=None)
@given(a1=st.floats(0.2, 2), a2=st.floats(0.3, 3), b1=st.floats(0, 1), b2=st.floats(0.1, 3))
def test_first_peak_time_matches_numeric(a1, a2, b1, b2):
    red = ReducedModel(np.array([a1, a2]), np.array([b1, b2]))
    tp = first_peak_time(red)
    t = np.linspace(0, 200, 200_001)
    y = red.step(t)
    dy = np.diff(y)
    turns = np.nonzero((dy[:-1] > 0) & (dy[1:] <= 0))[0]
    if tp is None:
        assert turns.size == 0 or np.ptp(y[turns[0]:]) < 1e-9
    else:
        assert tp == pytest.approx(t[turns[0] + 1], abs=2e-3)


def test_step_metrics():
    y = np.array([0.5, 1.015, 1.01, 1.0, 1.0])
    over, settle, tp = step_metrics(y, 1.0)
    assert over == pytest.approx(0.015) and tp == pytest.approx(2.0)
    assert settle == pytest.approx(2.0)
    assert step_metrics(np.linspace(0.1, 1.0, 10), 1.0)[0] == 0.0


def test_directed_channel_scales_to_unit_move():
    sys = StateSpaceModel(np.diag([0.5, 0.5]), np.eye(2), np.eye(2), ts=1.0)
    ch = directed_channel(sys, 1, [2.0, 4.0])
    assert np.allclose(ch.B[:, 0], [0.5, 1.0]) and ch.mimo_o == 1
    with pytest.raises(DomainError):
        directed_channel(sys, 0, [0.0, 1.0])


def second_order(zeta, wn=0.3, ts=1.0):
    cont = signal.StateSpace(*signal.tf2ss([wn ** 2], [1, 2 * zeta * wn, wn ** 2]))
    A, B, C, D, _ = signal.cont2discrete((cont.A, cont.B, cont.C, cont.D), ts)
    return StateSpaceModel(A, B, C, D, ts=ts)


def test_solver_overshoot_branch_picks_lower_segment_edge():
    # damping falls with w; the cascade end overshoots
    ev = LoopEvaluator(lambda w: second_order(1.2 - 0.8 * w), 0, 120.0, 1.0)
    sol = optimal_weight(ev, step=0.01)
    assert sol.branch == "overshoot" and sol.lower_segment is not None
    assert ev(sol.w_star).overshoot <= OVERSHOOT_TOL
    assert ev(sol.w_star + 0.02).overshoot > OVERSHOOT_TOL


def test_solver_no_overshoot_branch_picks_upper_segment_start():
    ev = LoopEvaluator(lambda w: second_order(0.4 + 0.8 * w), 0, 120.0, 1.0)
    sol = optimal_weight(ev, step=0.01)
    assert sol.branch == "no-overshoot"
    assert ev(sol.w_star).overshoot <= OVERSHOOT_TOL
    assert ev(sol.w_star - 0.02).overshoot > OVERSHOOT_TOL


def test_solver_finds_sub_grid_segment_at_zero():
    ev = LoopEvaluator(lambda w: second_order(1.0 - 200 * w if w < 0.0045 else 0.1), 0, 120.0, 1.0)
    sol = optimal_weight(ev, step=0.01)
    assert sol.lower_segment[0] == 0.0 and 0 < sol.w_star < 0.01
    assert ev(sol.w_star).overshoot <= OVERSHOOT_TOL


def test_sweep_csv(tmp_path):
    ev = LoopEvaluator(lambda w: second_order(0.4 + 0.8 * w), 0, 60.0, 1.0)
    sol = optimal_weight(ev, step=0.05)
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, [sol])
    lines = path.read_text().splitlines()
    assert lines[0] == "loop,w,overshoot_pct,t_s" and len(lines) == 1 + len(sol.sweep)
