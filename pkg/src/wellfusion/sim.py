"""Scenario-driven closed-loop simulation and performance metrics."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError, SimulationDiverged
from .fusion import FusionController, FusionWeights, MpcOnlyController, PidController, cascade_controller
from .mpc import MpcConfig
from .pid import DecouplerMatrices, PidParams, compute_decoupler
from .plant import (ContinuousPlant, StateSpaceModel, ValveDynamics, assemble_plant, discretize,
                    initial_state, scale_model, step_plant)
from .well_model import WellConfig, check_constraints, solve_operating_point

CONTROLLER_TYPES = ("pid", "mpc", "cascade", "fusion")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class PumpParams:
    """Quadratic pump surrogate, head in metres and flow in m^3/h."""

    shutoff_head_H0: float = 800.0
    head_coeff_a: float = 4.0
    eta_max: float = 0.82
    best_efficiency_flow_Qbep: float = 7.5


@dataclass(frozen=True)
class Disturbance:
    time: float
    magnitude: float
    loop: int | None = None  # 0-based; None hits every loop


@dataclass(frozen=True)
class JitterSpec:
    amplitude: float = 0.3
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if self.distribution not in ("uniform", "normal"):
            raise ConfigError(f"unknown jitter distribution {self.distribution!r}")
        if not 0 <= self.amplitude:
            raise ConfigError("jitter amplitude must be non-negative")


@dataclass(frozen=True)
class MismatchSpec:
    """Plant-to-model gain ratio and model time-constant factor."""

    gain: float = 1.0
    time_constant: float = 1.0

    def __post_init__(self):
        if not (self.gain > 0 and self.time_constant > 0):
            raise ConfigError("mismatch factors must be positive")


@dataclass(frozen=True)
class DecouplerSpec:
    pole_targets: tuple
    dc_gain: tuple = (1.0,)


@dataclass(frozen=True)
class Scenario:
    well: WellConfig
    valves: tuple
    mpc: MpcConfig
    pid: tuple
    decoupler: DecouplerSpec
    setpoints: tuple  # per loop: ((t0, v0), (t1, v1), ...)
    controller: str = "fusion"
    weights: tuple = (0.5,)
    ts: float = 1.0
    duration: float = 700.0
    disturbances: tuple = ()
    jitter: JitterSpec | None = None
    mismatch: MismatchSpec | None = None
    saturation: tuple = (-1.0, 1.0)
    pump: PumpParams = PumpParams()
    name: str = "scenario"

    def __post_init__(self):
        n = self.well.n_layers
        if self.controller not in CONTROLLER_TYPES:
            raise ConfigError(f"controller type must be one of {CONTROLLER_TYPES}")
        if len(self.valves) != n or len(self.pid) != n or len(self.setpoints) != n:
            raise ConfigError("valves, pid and setpoints need one entry per layer")
        if not (self.ts > 0 and self.duration > 0):
            raise ConfigError("ts and duration must be positive")
        for sched in self.setpoints:
            if not sched or any(t < 0 or t > self.duration for t, _ in sched):
                raise ConfigError("setpoint schedule times must lie within the duration")
        for d in self.disturbances:
            if d.loop is not None and not 0 <= d.loop < n:
                raise ConfigError(f"disturbance loop {d.loop} out of range")
        lo, hi = self.saturation
        if not lo < hi:
            raise ConfigError("saturation needs lower < upper")

    @property
    def n_loops(self) -> int:
        return self.well.n_layers

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.ts))

    def with_controller(self, kind: str, weights=None) -> "Scenario":
        return replace(self, controller=kind, weights=self.weights if weights is None else tuple(weights))


@dataclass
class SimTrace:
    t: np.ndarray
    period: np.ndarray
    r: np.ndarray
    q: np.ndarray
    P: np.ndarray
    u: np.ndarray
    u_presat: np.ndarray
    pump_head: np.ndarray
    pump_eff: np.ndarray
    q_total: np.ndarray
    rest_flows: np.ndarray | None = None
    diverged: bool = False
    message: str = ""

    def __len__(self):
        return len(self.t)

    def header(self) -> list[str]:
        n = self.q.shape[1]
        return (["t", "period"] + [f"r{i + 1}" for i in range(n)] + [f"q{i + 1}" for i in range(n)]
                + ["P_MPa"] + [f"u{i + 1}" for i in range(n)] + [f"u_presat{i + 1}" for i in range(n)]
                + ["pump_head", "pump_eff", "q_total"])

    def rows(self):
        for k in range(len(self)):
            yield [self.t[k], self.period[k], *self.r[k], *self.q[k], self.P[k], *self.u[k],
                   *self.u_presat[k], self.pump_head[k], self.pump_eff[k], self.q_total[k]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for row in self.rows():
            w.writerow([repr(float(v)) for v in row])
        if self.diverged:
            w.writerow([f"# diverged: {self.message}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class PerformanceReport:
    overshoot_startup: np.ndarray  # sigma_p per loop, %
    overshoot_disturbance: np.ndarray  # sigma_d per loop, %
    settling_time: np.ndarray  # t_s per loop, s
    settled: np.ndarray
    control_variation: float  # sum |du|
    pump_head_overshoot: float
    steady_error: np.ndarray
    scenario: str = ""
    controller: str = ""

    @property
    def sigma_p(self) -> float:
        return float(np.max(self.overshoot_startup))

    @property
    def sigma_d(self) -> float:
        return float(np.max(self.overshoot_disturbance))

    @property
    def t_s(self) -> float:
        """Mean settling time over loops."""
        return float(np.mean(self.settling_time))

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "controller": self.controller,
                "sigma_p": self.overshoot_startup.tolist(), "sigma_d": self.overshoot_disturbance.tolist(),
                "t_s": self.settling_time.tolist(), "settled": self.settled.tolist(),
                "sum_du": self.control_variation, "pump_head_overshoot": self.pump_head_overshoot,
                "steady_error": self.steady_error.tolist(),
                "summary": {"sigma_p": self.sigma_p, "sigma_d": self.sigma_d, "t_s": self.t_s}}

    @classmethod
    def from_dict(cls, doc: dict) -> "PerformanceReport":
        try:
            return cls(np.asarray(doc["sigma_p"], float), np.asarray(doc["sigma_d"], float),
                       np.asarray(doc["t_s"], float), np.asarray(doc["settled"], bool), float(doc["sum_du"]),
                       float(doc.get("pump_head_overshoot", 0.0)), np.asarray(doc["steady_error"], float),
                       str(doc.get("scenario", "")), str(doc.get("controller", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"not a performance report: {exc}") from None


# --------------------------------------------------------------------------- plant and controllers

def pump_model(total_flow, pump: PumpParams = PumpParams()):
    """Head and efficiency of the quadratic surrogate pump."""
    Q = np.asarray(total_flow, float)
    if np.any(Q < 0):
        raise DomainError("total flow must be non-negative")
    head = pump.shutoff_head_H0 - pump.head_coeff_a * Q ** 2
    x = Q / pump.best_efficiency_flow_Qbep
    eta = np.clip(pump.eta_max * (2.0 * x - x ** 2), 0.0, 1.0)
    if np.ndim(total_flow) == 0:
        return float(head), float(eta)
    return head, eta


def build_plant(scn: Scenario):
    """Continuous plant linearised at the well's steady operating point."""
    op = solve_operating_point(scn.well)
    if op.diagnostic:
        raise ConfigError(f"well has no operating point: {op.diagnostic}")
    rep = check_constraints(scn.well, op)
    if not rep.ok:
        warnings.warn(f"operating point violates {rep.violations()}", RuntimeWarning, stacklevel=2)
    return assemble_plant(scn.well, scn.valves, op), op


def apply_mismatch(model: StateSpaceModel, mismatch: MismatchSpec | None) -> StateSpaceModel:
    """Controller-side copy of a continuous model; the plant itself is untouched.

    ``mismatch.gain`` is the plant gain divided by the model gain.
    """
    if mismatch is None or (mismatch.gain == 1.0 and mismatch.time_constant == 1.0):
        return model
    return scale_model(model, gain=1.0 / mismatch.gain, time_constant=mismatch.time_constant)


def delay_free(model: StateSpaceModel) -> StateSpaceModel:
    return StateSpaceModel(model.A, model.B, model.C, model.D)


def build_decoupler(scn: Scenario, model: StateSpaceModel) -> DecouplerMatrices:
    return compute_decoupler(delay_free(model), scn.decoupler.pole_targets, scn.decoupler.dc_gain)


def build_controller(scn: Scenario, kind: str | None = None, weights=None, decouple: bool = True):
    """Controller of the requested type, designed on the (possibly mismatched) model."""
    kind = kind or scn.controller
    cont, _ = build_plant(scn)
    internal = apply_mismatch(cont, scn.mismatch)
    disc = discretize(internal, scn.ts)
    dec = build_decoupler(scn, internal)
    if kind == "pid":
        gain = None if decouple else uncoupled_input_gain(dec)
        return PidController(scn.pid, dec, input_gain=gain)
    if kind == "mpc":
        return MpcOnlyController(disc, scn.mpc)
    if kind == "cascade":
        return cascade_controller(disc, scn.mpc, scn.pid, dec)
    if kind == "fusion":
        w = scn.weights if weights is None else weights
        w = np.broadcast_to(np.asarray(w, float), (scn.n_loops,))
        return FusionController(disc, scn.mpc, scn.pid, dec, FusionWeights(tuple(w)))
    raise ConfigError(f"unknown controller type {kind!r}")


def uncoupled_input_gain(dec: DecouplerMatrices) -> np.ndarray:
    """Diagonal-only counterpart of the decoupler's input gain (no cross terms)."""
    E = np.linalg.inv(dec.input_transform_M)
    return np.diag(dec.channel_scale / np.diag(E))


# --------------------------------------------------------------------------- schedules

def setpoint_at(schedule, t: float) -> float:
    val = schedule[0][1]
    for t0, v in schedule:
        if t0 <= t + 1e-9:
            val = v
        else:
            break
    return float(val)


def setpoints_at(scn: Scenario, t: float) -> np.ndarray:
    return np.array([setpoint_at(s, t) for s in scn.setpoints])


def disturbance_at(scn: Scenario, t: float) -> np.ndarray:
    d = np.zeros(scn.n_loops)
    for ev in scn.disturbances:
        if ev.time <= t + 1e-9:
            if ev.loop is None:
                d += ev.magnitude
            else:
                d[ev.loop] += ev.magnitude
    return d


def apply_jitter(scn: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Actual sampling periods ``ts (1 + xi_k)`` and a per-step clamp flag."""
    n = scn.n_steps
    if scn.jitter is None or scn.jitter.amplitude == 0:
        return np.full(n, scn.ts), np.zeros(n, bool)
    rng = np.random.default_rng(scn.jitter.seed)
    a = scn.jitter.amplitude
    xi = rng.uniform(-a, a, n) if scn.jitter.distribution == "uniform" else rng.normal(0.0, a, n)
    period = scn.ts * (1.0 + xi)
    clamped = period <= 0
    period[clamped] = 0.1 * scn.ts
    return period, clamped


# --------------------------------------------------------------------------- run

class _DiscretePlant:
    def __init__(self, model):
        self.model = model
        self.state = initial_state(model)
        self.core = model.core_states

    def output(self):
        return self.model.C @ self.state.x

    def core_state(self):
        return self.state.x[self.core]

    def advance(self, u, period):
        self.state, y = step_plant(self.state, self.model, u)
        return y


class _JitteredPlant:
    def __init__(self, cont):
        self.plant = ContinuousPlant(cont)
        self.y = np.zeros(cont.mimo_o)

    def output(self):
        return self.y

    def core_state(self):
        return self.plant.core_state()

    def advance(self, u, period):
        self.y = self.plant.step(u, period)
        return self.y


def run(scn: Scenario, controller=None, kind: str | None = None, weights=None) -> SimTrace:
    """Closed loop: setpoint, controller step, saturation, plant step, record."""
    cont, op = build_plant(scn)
    rest = np.asarray(op.layer_flows_qv, float)
    if controller is None:
        controller = build_controller(scn, kind, weights)
    periods, _ = apply_jitter(scn)
    jittered = scn.jitter is not None and scn.jitter.amplitude > 0
    plant = _JitteredPlant(cont) if jittered else _DiscretePlant(discretize(cont, scn.ts))
    lo, hi = scn.saturation
    N, n = scn.n_steps, scn.n_loops
    rec = {k: np.zeros((N, n)) for k in ("r", "q", "u", "u_presat")}
    t = np.arange(N) * scn.ts
    diverged, message, last = False, "", N
    for k in range(N):
        r = setpoints_at(scn, t[k])
        y = plant.output() + disturbance_at(scn, t[k])
        x_core = plant.core_state()
        u_pre = controller.step(y, r - rest, x_core)
        if not np.all(np.isfinite(u_pre)) or np.max(np.abs(y)) > DIVERGENCE_LIMIT:
            diverged, message, last = True, f"non-finite or runaway signal at t={t[k]:g}", k
            break
        u = np.clip(u_pre, lo, hi)
        if np.any(u != u_pre):
            controller.track(u, x_core)
        rec["r"][k], rec["q"][k], rec["u"][k], rec["u_presat"][k] = r, y + rest, u, u_pre
        try:
            plant.advance(u, periods[k])
        except SimulationDiverged as exc:
            diverged, message, last = True, str(exc), k + 1
            break
    sl = slice(0, last)
    q_total = rec["q"][sl].sum(axis=1)
    head, eta = pump_model(np.maximum(q_total, 0.0), scn.pump)
    P = scn.well.pump_pressure_P0 - (q_total / scn.well.ground_valve_C0) ** 2
    return SimTrace(t[sl], periods[sl].copy(), rec["r"][sl], rec["q"][sl], P, rec["u"][sl],
                    rec["u_presat"][sl], head, eta, q_total, rest, diverged, message)


# --------------------------------------------------------------------------- metrics

def _phase_bounds(scn: Scenario, loop: int, rest: float) -> list[tuple[float, float, float]]:
    """Tracking phases ``(start, end, step_size)`` of one loop.

    A phase ends at the loop's next setpoint change or at any other event
    (disturbance or setpoint change elsewhere), whichever comes first.
    """
    cuts = [d.time for d in scn.disturbances] + [t for sched in scn.setpoints for t, _ in sched[1:]]
    sched = scn.setpoints[loop]
    phases = []
    prev = rest
    for idx, (t0, v) in enumerate(sched):
        start = 0.0 if idx == 0 else t0
        nxt = sched[idx + 1][0] if idx + 1 < len(sched) else scn.duration
        end = min([nxt] + [c for c in cuts if c > start])
        phases.append((start, end, v - prev))
        prev = v
    return phases


def settling_time(t, y, r, step, start, band=0.02) -> tuple[float, bool]:
    """Time from ``start`` after which ``|y - r|`` stays within ``band |step|``."""
    tol = band * abs(step) if step != 0 else band * max(abs(r), 1e-12)
    outside = np.nonzero(np.abs(y - r) > tol)[0]
    if outside.size == 0:
        return 0.0, True
    if outside[-1] == len(y) - 1:
        return float(t[-1] - start + (t[1] - t[0] if len(t) > 1 else 0)), False
    return float(t[outside[-1] + 1] - start), True


def metrics(trace: SimTrace, scn: Scenario) -> PerformanceReport:
    n = scn.n_loops
    sig_p, sig_d, ts_, settled, ess = (np.zeros(n) for _ in range(5))
    settled = np.ones(n, bool)
    rest = trace.rest_flows if trace.rest_flows is not None else np.zeros(n)
    for i in range(n):
        # the first tracking phase: the first one that actually moves the setpoint
        for a, b, step in _phase_bounds(scn, i, float(rest[i])):
            m = (trace.t >= a - 1e-9) & (trace.t < b - 1e-9)
            if not m.any() or step == 0:
                continue
            y, r = trace.q[m, i], trace.r[m, i]
            over = np.max(np.sign(step) * (y - r)) / abs(step) * 100.0
            sig_p[i] = max(over, 0.0)
            ts_[i], settled[i] = settling_time(trace.t[m], y, r, step, a)
            break
        # disturbance windows: overshoot of the recovery past the setpoint
        for ev in scn.disturbances:
            if ev.loop not in (None, i) or ev.magnitude == 0:
                continue
            later = [d.time for d in scn.disturbances if d.time > ev.time] + [scn.duration]
            m = (trace.t >= ev.time - 1e-9) & (trace.t < min(later) - 1e-9)
            if not m.any():
                continue
            dev = -np.sign(ev.magnitude) * (trace.q[m, i] - trace.r[m, i])
            sig_d[i] = max(sig_d[i], max(np.max(dev) / abs(ev.magnitude) * 100.0, 0.0))
        ess[i] = abs(trace.q[-1, i] - trace.r[-1, i]) / max(abs(trace.r[-1, i]), 1e-12)
    u_prev = np.vstack([np.zeros((1, n)), trace.u[:-1]])
    sum_du = float(np.abs(trace.u - u_prev).sum())
    head_final = trace.pump_head[-1]
    head_over = float(max(np.max(trace.pump_head) - head_final, 0.0))
    return PerformanceReport(sig_p, sig_d, ts_, settled, sum_du, head_over, ess,
                             scenario=scn.name, controller=scn.controller)


def head_oscillation(trace: SimTrace, nominal: SimTrace) -> float:
    """RMS pump-head deviation of a jittered run from its jitter-free twin."""
    k = min(len(trace), len(nominal))
    return float(np.sqrt(np.mean((trace.pump_head[:k] - nominal.pump_head[:k]) ** 2)))


# --------------------------------------------------------------------------- comparison

HIGHER_IS_WORSE = ("sigma_p", "sigma_d", "t_s", "sum_du")


@dataclass
class Comparison:
    table: dict  # metric -> {controller: value}
    winners: dict
    orderings: dict = field(default_factory=dict)

    def format(self) -> str:
        names = list(next(iter(self.table.values())).keys())
        lines = ["metric".ljust(10) + "".join(n.rjust(12) for n in names) + "  winner"]
        for metric, vals in self.table.items():
            cells = "".join((f"{vals[n]:12.4g}" if vals[n] is not None else "incomparable".rjust(12))
                            for n in names)
            lines.append(metric.ljust(10) + cells + "  " + ",".join(self.winners[metric]))
        for name, ok in self.orderings.items():
            lines.append(f"{'PASS' if ok else 'FAIL'}  {name}")
        return "\n".join(lines)


def _summary(rep: PerformanceReport) -> dict:
    return {"sigma_p": rep.sigma_p, "sigma_d": rep.sigma_d,
            "t_s": rep.t_s if bool(np.all(rep.settled)) else None, "sum_du": rep.control_variation}


def reference_orderings(reports: dict, tie: float = 0.25, zero: float = 0.5) -> dict:
    """Dynamic-performance orderings checked on pid/mpc/cascade/fusion reports.

    ``zero`` is the overshoot (%) treated as none; ``tie`` the relative gap
    accepted as "about equal".
    """
    s = {k: _summary(v) for k, v in reports.items()}
    if not {"pid", "mpc", "cascade", "fusion"} <= set(s):
        return {}
    sp = {k: v["sigma_p"] for k, v in s.items()}
    ts = {k: v["t_s"] for k, v in s.items()}
    out = {
        "sigma_p: fusion = mpc = 0": sp["fusion"] <= zero and sp["mpc"] <= zero,
        "sigma_p: 0 < cascade < pid": zero < sp["cascade"] < sp["pid"],
        "sum_du: fusion minimal": all(s["fusion"]["sum_du"] <= v["sum_du"] for v in s.values()),
    }
    if None in ts.values():
        out["t_s ordering"] = False
    else:
        approx = abs(ts["cascade"] - ts["pid"]) <= tie * max(ts["cascade"], ts["pid"])
        out["t_s: fusion < cascade ~ pid < mpc"] = (ts["fusion"] < min(ts["cascade"], ts["pid"])
                                                     and approx and max(ts["cascade"], ts["pid"]) < ts["mpc"])
    return out


def compare(reports) -> Comparison:
    reports = dict(reports)
    if len(reports) < 2:
        raise DomainError("comparison needs at least two reports")
    scen = {r.scenario for r in reports.values()}
    if len(scen) > 1:
        raise DomainError(f"reports come from different scenarios: {sorted(scen)}")
    sums = {k: _summary(v) for k, v in reports.items()}
    table, winners = {}, {}
    for metric in HIGHER_IS_WORSE:
        vals = {k: sums[k][metric] for k in reports}
        table[metric] = vals
        known = {k: v for k, v in vals.items() if v is not None}
        best = min(known.values()) if known else None
        winners[metric] = [k for k, v in known.items() if best is not None and math.isclose(v, best, rel_tol=1e-9, abs_tol=1e-12)]
    return Comparison(table, winners, reference_orderings(reports))
