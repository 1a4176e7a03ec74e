import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import signal

from wellfusion.errors import DecouplingError, DomainError
from wellfusion.pid import (PidBank, PidLoop, PidParams, compute_decoupler, pid_as_state_space,
                            pid_bank_state_space)
from wellfusion.plant import StateSpaceModel

TABLE3 = [PidParams(2.75, 1.0, 0.67), PidParams(3.0, 0.77, 0.37), PidParams(7.67, 2.0, 1.33)]


def positional(p: PidParams, errors):
    """u_k = Kp (e_k + ts/Ti sum e + Td/ts (e_k - e_{k-1}))."""
    out, s, prev = [], 0.0, 0.0
    for e in errors:
        s += e
        out.append(p.proportional_Kp * (e + p.integral_gain * s + p.derivative_gain * (e - prev)))
        prev = e
    return np.array(out)


def test_params_validation_and_gains():
    p = PidParams(2.0, 4.0, 0.5, 0.5)
    assert p.integral_gain == pytest.approx(0.125) and p.derivative_gain == pytest.approx(1.0)
    assert PidParams(1.0).integral_gain == 0.0
    for bad in (dict(integral_time_Ti=0.0), dict(derivative_time_Td=-1.0), dict(sampling_period_ts=0.0)):
        with pytest.raises(DomainError):
            PidParams(1.0, **bad)
    with pytest.raises(DomainError):
        PidParams(math.nan)


def test_unit_step_error_first_samples():
    p = TABLE3[0]
    lp = PidLoop(p)
    u = [lp.step(1.0) for _ in range(3)]
    kp, ki, kd = 2.75, 1.0, 0.67
    assert u[0] == pytest.approx(kp * (1 + ki + kd))
    assert u[1] == pytest.approx(kp * (1 + 2 * ki))
    assert u[2] == pytest.approx(kp * (1 + 3 * ki))


@settings(max_examples=50, deadline=None)
@given(kp=st.floats(0.1, 10), ti=st.floats(0.2, 20), td=st.floats(0, 3),
       errs=st.lists(st.floats(-5, 5), min_size=1, max_size=40))
def test_velocity_form_equals_positional(kp, ti, td, errs):
    p = PidParams(kp, ti, td)
    lp = PidLoop(p)
    got = np.array([lp.step(e) for e in errs])
    assert np.allclose(got, positional(p, errs), rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("p", TABLE3 + [PidParams(1.5), PidParams(1.5, 3.0), PidParams(1.5, math.inf, 0.4)])
def test_state_space_realisation_matches_loop(p):
    ss = pid_as_state_space(p)
    rng = np.random.default_rng(0)
    errs = rng.normal(size=30)
    if ss.n:
        _, y, _ = signal.dlsim((ss.A, ss.B, ss.C, ss.D, 1.0), errs)
        y = y[:, 0]
    else:
        y = ss.D[0, 0] * errs
    lp = PidLoop(p)
    assert np.allclose(y, [lp.step(e) for e in errs], atol=1e-12)


def test_bank_is_independent_loops_and_tracking():
    bank = PidBank(TABLE3)
    u = bank.step([1.0, 0.0, -1.0])
    assert u[1] == 0.0 and u[0] == PidLoop(TABLE3[0]).step(1.0) and u[2] == PidLoop(TABLE3[2]).step(-1.0)
    bank.track([0.5, 0.5, 0.5])
    u2 = bank.step([0.0, 0.0, 0.0])
    assert u2[1] == pytest.approx(0.5)
    assert pid_bank_state_space(TABLE3).mimo_i == 3


def random_square(rng, n=4, p=2, ts=1.0):
    A = rng.normal(size=(n, n))
    A *= 0.8 / np.max(np.abs(np.linalg.eigvals(A)))
    return StateSpaceModel(A, rng.normal(size=(n, p)), rng.normal(size=(p, n)), ts=ts)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 5000))
def test_decoupled_closed_loop_is_diagonal_with_target_poles(seed):
    rng = np.random.default_rng(seed)
    model = random_square(rng)
    poles = [[0.5], [0.3]]
    dec = compute_decoupler(model, poles)
    cl = dec.closed_loop(model)
    assume(np.max(np.abs(np.linalg.eigvals(cl.A))) < 0.95)  # the leftover modes are the plant's zeros
    # impulse response of the off-diagonal channels vanishes
    x = np.zeros((model.n, 2))
    h = []
    for k in range(15):
        u = np.eye(2) if k == 0 else np.zeros((2, 2))
        x = cl.A @ x + cl.B @ u
        h.append(cl.C @ x)
    h = np.array(h)
    scale = np.abs(h).max()
    assert np.abs(h[:, 0, 1]).max() < 1e-8 * scale and np.abs(h[:, 1, 0]).max() < 1e-8 * scale
    assert np.allclose(h[1:, 0, 0] / h[:-1, 0, 0], 0.5, atol=1e-6)
    dc = cl.C @ np.linalg.solve(np.eye(model.n) - cl.A, cl.B)
    assert np.allclose(dc, np.eye(2), atol=1e-8)


def test_decoupler_continuous_relative_degree_two():
    # two decoupled double integrators with a cross term in B
    A = np.array([[0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 1], [0, 0, 0, 0]], float)
    B = np.array([[0, 0], [1, 0.4], [0, 0], [0.3, 1]])
    C = np.array([[1, 0, 0, 0], [0, 0, 1, 0]], float)
    model = StateSpaceModel(A, B, C)
    dec = compute_decoupler(model, [[-1.0, -2.0], [-0.5, -0.5]], dc_gain=2.0)
    assert list(dec.relative_degree) == [2, 2]
    cl = dec.closed_loop(model)
    assert np.allclose(np.sort(np.linalg.eigvals(cl.A).real), [-2, -1, -0.5, -0.5], atol=1e-6)
    dc = -cl.C @ np.linalg.solve(cl.A, cl.B)
    assert np.allclose(dc, 2 * np.eye(2), atol=1e-9)


def test_decoupler_errors():
    rng = np.random.default_rng(1)
    model = random_square(rng)
    with pytest.raises(DecouplingError):
        compute_decoupler(model, [[0.5, 0.4], [0.3]])
    singular = StateSpaceModel(model.A, np.ones((4, 2)), np.vstack([model.C[0], model.C[0]]), ts=1.0)
    with pytest.raises(DecouplingError):
        compute_decoupler(singular, [[0.5], [0.5]])
    with pytest.raises(DecouplingError):
        compute_decoupler(StateSpaceModel(model.A, model.B[:, :1], model.C, ts=1.0), [[0.5], [0.5]])
