from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wellfusion import config
from wellfusion.errors import ConfigError, DomainError
from wellfusion.pid import PidParams
from wellfusion.sim import (Disturbance, JitterSpec, MismatchSpec, PerformanceReport, PumpParams, apply_jitter,
                            compare, disturbance_at, head_oscillation, metrics, pump_model,
                            reference_orderings, run, setpoint_at, settling_time)


@pytest.fixture(scope="module")
def scn():
    return config.reference_scenario()


def test_pump_model_shape():
    pump = PumpParams()
    h0, e0 = pump_model(0.0, pump)
    assert h0 == pump.shutoff_head_H0 and e0 == 0.0
    h, e = pump_model(np.array([0.0, 7.5, 10.0]), pump)
    assert np.all(np.diff(h) < 0) and e[1] == pytest.approx(pump.eta_max)
    with pytest.raises(DomainError):
        pump_model(-1.0)


def test_schedules(scn):
    sched = ((0.0, 2.0), (150.0, 1.0))
    assert setpoint_at(sched, 149.0) == 2.0 and setpoint_at(sched, 150.0) == 1.0
    d = replace(scn, disturbances=(Disturbance(10.0, 0.1), Disturbance(20.0, -0.3, loop=1)))
    assert np.allclose(disturbance_at(d, 5.0), 0.0)
    assert np.allclose(disturbance_at(d, 25.0), [0.1, -0.2, 0.1])


def test_settling_time_cases():
    t = np.arange(10.0)
    y = np.array([0, 0.5, 0.9, 0.99, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    ts, ok = settling_time(t, y, 1.0, 1.0, 0.0)
    assert ts == 3.0 and ok
    ts, ok = settling_time(t, np.zeros(10), 1.0, 1.0, 0.0)
    assert not ok


@settings(max_examples=20, deadline=None)
@given(amp=st.floats(0.0, 0.9), seed=st.integers(0, 2 ** 31))
def test_jitter_periods(scn, amp, seed):
    s = replace(scn, jitter=JitterSpec(amp, seed))
    p1, _ = apply_jitter(s)
    p2, _ = apply_jitter(s)
    assert np.array_equal(p1, p2)
    assert np.all(p1 > 0) and np.all(np.abs(p1 / s.ts - 1) <= amp + 1e-12)


def test_scenario_validation(scn):
    with pytest.raises(ConfigError):
        replace(scn, controller="lqr")
    with pytest.raises(ConfigError):
        replace(scn, setpoints=scn.setpoints[:2])
    with pytest.raises(ConfigError):
        JitterSpec(-0.1)
    with pytest.raises(ConfigError):
        MismatchSpec(0.0)


def test_run_is_deterministic_and_bounded(scn):
    a = run(scn).to_csv()
    assert a == run(scn).to_csv()
    tr = run(scn)
    assert not tr.diverged and len(tr) == scn.n_steps
    assert np.all(np.abs(tr.u) <= 1.0)
    assert np.allclose(tr.q_total, tr.q.sum(axis=1))


def test_jittered_run_seeded(scn):
    s = replace(scn, jitter=JitterSpec(0.3, 11), duration=200.0,
                setpoints=tuple(((0.0, sch[0][1]),) for sch in scn.setpoints), disturbances=())
    a, b = run(s), run(s)
    assert a.to_csv() == b.to_csv()
    c = run(replace(s, jitter=JitterSpec(0.3, 12)))
    assert not np.array_equal(a.period, c.period)
    assert head_oscillation(a, run(replace(s, jitter=None))) > 0


@pytest.mark.parametrize("kind", ["pid", "mpc", "cascade", "fusion"])
def test_every_controller_tracks_reference(scn, kind):
    s = scn.with_controller(kind)
    rep = metrics(run(s), s)
    assert np.all(rep.steady_error < 5e-3)
    assert rep.controller == kind


def test_divergence_is_reported(scn):
    wild = replace(scn, controller="pid", pid=tuple(PidParams(-40.0, 0.5, 0.0) for _ in scn.pid),
                   saturation=(-1e9, 1e9))
    tr = run(wild)
    assert tr.diverged and len(tr) < wild.n_steps
    assert "# diverged" in tr.to_csv()


def test_metrics_on_ideal_trace(scn):
    tr = run(scn.with_controller("mpc"))
    ideal = replace(tr, q=tr.r.copy())
    rep = metrics(ideal, scn)
    assert np.all(rep.overshoot_startup == 0) and np.all(rep.settling_time == 0)
    assert np.all(rep.steady_error == 0)


def test_report_round_trip_and_compare(scn):
    reps = {}
    for kind in ("pid", "mpc", "cascade", "fusion"):
        s = scn.with_controller(kind)
        reps[kind] = metrics(run(s), s)
    back = PerformanceReport.from_dict(reps["pid"].to_dict())
    assert np.array_equal(back.settling_time, reps["pid"].settling_time)
    cmp = compare(reps)
    assert set(cmp.table) == {"sigma_p", "sigma_d", "t_s", "sum_du"}
    assert cmp.orderings == reference_orderings(reps)
    assert "mpc" in cmp.winners["sum_du"] or "fusion" in cmp.winners["sum_du"]
    assert "PASS" in cmp.format() or "FAIL" in cmp.format()
    with pytest.raises(DomainError):
        compare({"pid": reps["pid"]})
    other = replace(reps["mpc"], scenario="elsewhere")
    with pytest.raises(DomainError):
        compare({"pid": reps["pid"], "mpc": other})
    with pytest.raises(ConfigError):
        PerformanceReport.from_dict({"sigma_p": [1.0]})
