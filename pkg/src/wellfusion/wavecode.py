"""Binary amplitude keying of a layer flow, with a window-mean decoder."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .well_model import WellConfig, check_constraints, solve_operating_point


@dataclass(frozen=True)
class WaveFrame:
    bits: tuple
    low_level: float
    high_level: float
    symbol_period: float
    guard_time: float = 0.0
    target_loop: int = 0
    rest_level: float | None = None  # level held during the guards; low_level if None

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits or any(b not in (0, 1) for b in bits):
            raise DomainError("frame needs a non-empty sequence of 0/1 bits")
        object.__setattr__(self, "bits", bits)
        if not self.high_level > self.low_level:
            raise DomainError("high_level must exceed low_level")
        if self.symbol_period <= 0 or self.guard_time < 0:
            raise DomainError("symbol_period must be positive and guard_time non-negative")
        if self.target_loop < 0:
            raise DomainError("target_loop must be a layer index")

    @property
    def rest(self) -> float:
        return self.low_level if self.rest_level is None else float(self.rest_level)

    @property
    def amplitude(self) -> float:
        return self.high_level - self.low_level

    @property
    def threshold(self) -> float:
        return 0.5 * (self.low_level + self.high_level)

    @property
    def start(self) -> float:
        return self.guard_time

    @property
    def end(self) -> float:
        return self.guard_time + len(self.bits) * self.symbol_period

    @property
    def duration(self) -> float:
        return self.end + self.guard_time

    def level(self, bit: int) -> float:
        return self.high_level if bit else self.low_level

    def check_period(self, time_constant: float) -> bool:
        """Warn when symbols are shorter than four loop time constants."""
        ok = self.symbol_period >= 4.0 * time_constant
        if not ok:
            warnings.warn(f"symbol period {self.symbol_period:g} s is under 4x the loop time constant "
                          f"{time_constant:g} s", RuntimeWarning, stacklevel=2)
        return ok


@dataclass
class DecodeResult:
    bits: tuple
    confidence: np.ndarray
    symbol_errors: int
    ser: float
    distortion: float
    means: np.ndarray


def encode(frame: WaveFrame) -> tuple:
    """Setpoint schedule ``((t, value), ...)`` with merged repeats."""
    sched = []
    if frame.guard_time > 0:
        sched.append((0.0, frame.rest))
    for i, b in enumerate(frame.bits):
        sched.append((frame.start + i * frame.symbol_period, frame.level(b)))
    if frame.guard_time > 0:
        sched.append((frame.end, frame.rest))
    merged = [sched[0]]
    for t, v in sched[1:]:
        if v != merged[-1][1]:
            merged.append((t, v))
    return tuple(merged)


def ideal_wave(frame: WaveFrame, t) -> np.ndarray:
    """The square wave the schedule asks for, sampled at ``t``."""
    t = np.asarray(t, float)
    y = np.full(t.shape, frame.rest)
    inside = (t >= frame.start - 1e-9) & (t < frame.end - 1e-9)
    idx = np.clip(((t - frame.start + 1e-9) // frame.symbol_period).astype(int), 0, len(frame.bits) - 1)
    bits = np.asarray(frame.bits)
    y[inside] = np.where(bits[idx[inside]] == 1, frame.high_level, frame.low_level)
    return y


def _signal(trace, frame: WaveFrame, channel: str):
    t = np.asarray(trace.t, float)
    if channel == "flow":
        y = np.asarray(trace.q, float)[:, frame.target_loop]
    elif channel == "pressure":
        y = np.asarray(trace.P, float)
    else:
        raise DomainError(f"unknown channel {channel!r}")
    return t, y


def decode(trace, frame: WaveFrame, channel: str = "flow") -> DecodeResult:
    """Central-half window means against the midpoint threshold."""
    t, y = _signal(trace, frame, channel)
    if len(t) == 0 or t[-1] + (t[1] - t[0] if len(t) > 1 else 0.0) < frame.end - 1e-9:
        raise DomainError("trace is shorter than the frame")
    means = np.empty(len(frame.bits))
    for i in range(len(frame.bits)):
        t0 = frame.start + i * frame.symbol_period
        lo, hi = t0 + 0.25 * frame.symbol_period, t0 + 0.75 * frame.symbol_period
        sel = (t >= lo - 1e-9) & (t < hi - 1e-9)
        if not sel.any():
            sel = np.array([np.argmin(np.abs(t - 0.5 * (lo + hi)))])
        means[i] = float(np.mean(y[sel]))
    bits = tuple(int(m > frame.threshold) for m in means)
    conf = np.abs(means - frame.threshold) / (0.5 * frame.amplitude)
    errors = int(sum(a != b for a, b in zip(bits, frame.bits)))
    return DecodeResult(bits, conf, errors, errors / len(bits), distortion(trace, frame, channel), means)


def symbol_error_rate(sent, decoded) -> float:
    sent, decoded = tuple(sent), tuple(decoded)
    if len(sent) != len(decoded):
        raise DomainError("bit sequences differ in length")
    if not sent:
        raise DomainError("empty bit sequence")
    return sum(a != b for a, b in zip(sent, decoded)) / len(sent)


def distortion(trace, frame: WaveFrame, channel: str = "flow") -> float:
    """RMS of (trace - ideal square) / amplitude over the frame window."""
    t, y = _signal(trace, frame, channel)
    sel = (t >= frame.start - 1e-9) & (t < frame.end - 1e-9)
    return float(np.sqrt(np.mean(((y[sel] - ideal_wave(frame, t[sel])) / frame.amplitude) ** 2)))


def oscillation_energy(trace, frame: WaveFrame) -> float:
    """Ringing energy: squared error after each transition first reaches its new level.

    Integrated over time and normalised by the squared amplitude; the rise
    itself is excluded, so a sluggish but monotone response scores near 0.
    """
    t, y = _signal(trace, frame, "flow")
    ideal = ideal_wave(frame, t)
    dt = np.diff(np.append(t, t[-1] + (t[-1] - t[-2] if len(t) > 1 else 1.0)))
    changes = np.nonzero(np.diff(ideal) != 0)[0] + 1
    bounds = list(changes) + [len(t)]
    energy = 0.0
    for a, b in zip(bounds[:-1], bounds[1:]):
        target, prev = ideal[a], ideal[a - 1]
        up = target > prev
        seg = y[a:b]
        reached = np.nonzero(seg >= target if up else seg <= target)[0]
        if reached.size == 0:
            continue
        k = a + reached[0]
        energy += float(np.sum((y[k:b] - target) ** 2 * dt[k:b]))
    return energy / frame.amplitude ** 2


def render_ideal(frame: WaveFrame, ts: float):
    """Sample times and ideal flow, as a minimal trace-like object for round trips."""
    t = np.arange(int(np.ceil(frame.duration / ts))) * ts
    return _IdealTrace(t, frame)


@dataclass
class _IdealTrace:
    t: np.ndarray
    frame: WaveFrame

    @property
    def q(self):
        n = self.frame.target_loop + 1
        q = np.zeros((len(self.t), n))
        q[:, self.frame.target_loop] = ideal_wave(self.frame, self.t)
        return q


@dataclass
class FeasibilityReport:
    feasible: bool
    levels_ok: dict
    pressure_at_level: dict
    signature_amplitude: float
    opening_at_level: dict
    notes: list


def amplitude_feasibility(frame, well: WellConfig, target_loop: int | None = None) -> FeasibilityReport:
    """Can the target layer hold both levels as steady states, and what does the wellhead see?

    ``frame`` is a :class:`WaveFrame` or a ``(low, high)`` pair (which may
    be equal).  Each level is reached by re-solving the target layer's
    nozzle opening with the other layers untouched.
    """
    from scipy.optimize import brentq

    notes = []
    if isinstance(frame, WaveFrame):
        low, high, i = frame.low_level, frame.high_level, frame.target_loop
    else:
        low, high = map(float, frame)
        i = 0 if target_loop is None else target_loop
        if high < low:
            raise DomainError("high level below low level")
    if i >= well.n_layers:
        raise DomainError("target loop outside the well")
    ok, pres, opening = {}, {}, {}

    def flow(beta):
        layers = list(well.layers)
        layers[i] = replace(layers[i], nozzle_opening_beta=beta)
        w = replace(well, layers=tuple(layers))
        return w, solve_operating_point(w)

    lo_b, hi_b = 1e-4, 1.0 - 1e-6
    q_min = flow(lo_b)[1].layer_flows_qv[i]
    q_max = flow(hi_b)[1].layer_flows_qv[i]
    for name, level in (("low", low), ("high", high)):
        if not q_min <= level <= q_max:
            ok[name] = False
            pres[name] = float("nan")
            opening[name] = float("nan")
            notes.append(f"{name} level {level:g} outside reachable flow [{q_min:.3g}, {q_max:.3g}]")
            continue
        beta = brentq(lambda b: flow(b)[1].layer_flows_qv[i] - level, lo_b, hi_b, xtol=1e-12)
        w, op = flow(beta)
        rep = check_constraints(w, op)
        ok[name] = rep.ok
        if not rep.ok:
            notes.append(f"{name} level violates {rep.violations()}")
        pres[name] = op.post_valve_pressure_P
        opening[name] = beta
    sig = abs(pres["high"] - pres["low"]) if all(ok.values()) else float("nan")
    if high == low or sig == 0:
        warnings.warn("zero-amplitude frame carries no signature", RuntimeWarning, stacklevel=2)
        notes.append("zero-amplitude signature")
    return FeasibilityReport(all(ok.values()), ok, pres, sig, opening, notes)


def wave_scenario(scn, frame: WaveFrame):
    """``scn`` with the target loop following the frame and the others holding their first setpoint.

    Disturbances are dropped and the run lasts exactly one frame.
    """
    if frame.target_loop >= scn.n_loops:
        raise DomainError("target loop outside the scenario")
    setpoints = list(scn.setpoints)
    for i, sched in enumerate(setpoints):
        setpoints[i] = ((0.0, float(sched[0][1])),)
    setpoints[frame.target_loop] = tuple((float(t), float(v)) for t, v in encode(frame))
    return replace(scn, setpoints=tuple(setpoints), disturbances=(), duration=float(frame.duration))
