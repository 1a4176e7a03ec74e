"""Dynamic valve/flow model, interlayer coupling and discretization.

Each layer's flow responds to its spool command as a second-order lag with
an actuation delay.  The other layers feel that response through the
post-valve pressure: the same dynamics scaled by the steady interaction
gain and delayed by the pressure-wave travel time between the layers.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .errors import DecouplingError, DomainError, SimulationDiverged
from .well_model import OperatingPoint, WellConfig, coupling_derivatives, nozzle_coefficients


@dataclass(frozen=True)
class ValveDynamics:
    inertia_m: float = 1.0
    friction_mu: float = 1.0
    stiffness_eps: float = 0.1
    adjustable_ratio_R: float = 30.0
    spool_force_Fm: float = 1.0
    actuation_delay_tau_c: float = 1.0

    def __post_init__(self):
        if not (self.inertia_m > 0 and self.friction_mu >= 0 and self.stiffness_eps > 0):
            raise DomainError("valve needs m > 0, mu >= 0, eps > 0")
        if not self.adjustable_ratio_R > 1:
            raise DomainError("adjustable ratio R must exceed 1")
        if self.actuation_delay_tau_c < 0:
            raise DomainError("actuation delay must be non-negative")
        if self.friction_mu == 0:
            raise DomainError("frictionless valve is not asymptotically stable")

    @property
    def natural_frequency(self) -> float:
        return math.sqrt(self.stiffness_eps / self.inertia_m)

    @property
    def damping_ratio(self) -> float:
        return self.friction_mu / (2.0 * math.sqrt(self.inertia_m * self.stiffness_eps))


def _matrix(v, rows=None, cols=None):
    v = np.asarray(v, dtype=float)
    if v.ndim == 2 and (rows is None or v.shape[0] == rows) and (cols is None or v.shape[1] == cols):
        return v  # also covers static gains with no states
    return v.reshape(rows if rows is not None else -1, cols if cols is not None else -1)


@dataclass
class StateSpaceModel:
    """``x+ = A x + B u``, ``y = C x + D u`` (continuous when ``ts == 0``).

    ``io_delays[j, i]`` is the transport delay in seconds from input ``i`` to
    output ``j``.  Continuous models with delays must be column separable:
    every state is driven by exactly one input.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray | None = None
    ts: float = 0.0
    io_delays: np.ndarray | None = None
    core_states: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = _matrix(self.B, rows=self.A.shape[0])
        self.C = _matrix(self.C, cols=self.A.shape[0])
        if self.D is None:
            self.D = np.zeros((self.C.shape[0], self.B.shape[1]))
        self.D = np.asarray(self.D, dtype=float).reshape(self.C.shape[0], self.B.shape[1])
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DomainError("A must be square")
        if self.io_delays is not None:
            self.io_delays = np.asarray(self.io_delays, dtype=float).reshape(self.mimo_o, self.mimo_i)
        if self.core_states is None:
            self.core_states = np.arange(n)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def mimo_i(self) -> int:
        return self.B.shape[1]

    @property
    def mimo_o(self) -> int:
        return self.C.shape[0]

    @property
    def is_discrete(self) -> bool:
        return self.ts > 0

    @property
    def input_delays(self) -> np.ndarray:
        if self.io_delays is None:
            return np.zeros(self.mimo_i)
        return self.io_delays.min(axis=0)

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    def is_stable(self) -> bool:
        p = self.poles()
        if p.size == 0:
            return True
        return bool(np.all(np.abs(p) < 1.0)) if self.is_discrete else bool(np.all(p.real < 0))

    def dc_gain(self) -> np.ndarray:
        """Steady-state gain, ignoring delays."""
        n = self.n
        if self.is_discrete:
            return self.C @ np.linalg.solve(np.eye(n) - self.A, self.B) + self.D
        return -self.C @ np.linalg.solve(self.A, self.B) + self.D


def valve_gain(R: float, beta: float) -> float:
    """Equal-percentage gain factor ``K_v = R^(1/beta - 1) ln R``."""
    if not R > 1:
        raise DomainError("R must exceed 1")
    if not 0.0 < beta <= 1.0:
        raise DomainError(f"opening must lie in (0, 1], got {beta}")
    return R ** (1.0 / beta - 1.0) * math.log(R)


def steady_gain(valve: ValveDynamics, operating_qv: float, beta: float) -> float:
    return valve_gain(valve.adjustable_ratio_R, beta) * operating_qv * beta \
        * valve.spool_force_Fm / valve.stiffness_eps


def layer_transfer(valve: ValveDynamics, operating_qv: float, beta: float) -> StateSpaceModel:
    """Single-layer flow response ``m q'' + mu q' + eps q = K_v q_v beta F_m u(t - tau_c)``.

    States are ``(q, dq/dt)``.
    """
    m, mu, eps = valve.inertia_m, valve.friction_mu, valve.stiffness_eps
    force = valve_gain(valve.adjustable_ratio_R, beta) * operating_qv * beta * valve.spool_force_Fm
    A = np.array([[0.0, 1.0], [-eps / m, -mu / m]])
    B = np.array([[0.0], [force / m]])
    C = np.array([[1.0, 0.0]])
    return StateSpaceModel(A, B, C, io_delays=np.array([[valve.actuation_delay_tau_c]]))


def interlayer_delay(layer_i: int, layer_j: int, cfg: WellConfig) -> float:
    """Pressure-wave travel time between two layers (0-based indices)."""
    lo, hi = sorted((layer_i, layer_j))
    depth = sum(abs(cfg.layers[l].depth_offset_hd) for l in range(lo + 1, hi + 1))
    return depth / cfg.wave_speed_v


def assemble_plant(cfg: WellConfig, valves, op: OperatingPoint, nozzle_coeffs=None) -> StateSpaceModel:
    """Coupled N-layer continuous plant linearised at ``op``.

    Output ``j`` is layer j's own response plus, for every other layer i,
    layer i's response scaled by ``dq_j/dq_i`` (pressure-mediated, negative)
    and delayed by the interlayer travel time.
    """
    valves = list(valves)
    n = cfg.n_layers
    if len(valves) != n:
        raise DomainError("one valve per layer is required")
    coupling = coupling_derivatives(cfg, nozzle_coeffs) if n > 1 else np.eye(1)
    if not np.isfinite(coupling).all():
        raise DecouplingError("ill-conditioned steady linearisation")
    A = np.zeros((2 * n, 2 * n))
    B = np.zeros((2 * n, n))
    C = np.zeros((n, 2 * n))
    delays = np.zeros((n, n))
    for i, (valve, lay) in enumerate(zip(valves, cfg.layers)):
        blk = layer_transfer(valve, op.layer_flows_qv[i], lay.nozzle_opening_beta)
        s = slice(2 * i, 2 * i + 2)
        A[s, s] = blk.A
        B[s, i] = blk.B[:, 0]
        for j in range(n):
            C[j, s] = coupling[j, i] * blk.C[0]
            delays[j, i] = valve.actuation_delay_tau_c + interlayer_delay(i, j, cfg)
    return StateSpaceModel(A, B, C, io_delays=delays,
                           info={"coupling": coupling, "operating_point": op})


def _input_groups(model: StateSpaceModel) -> list[np.ndarray]:
    """States driven by each input; raises unless the groups are disjoint."""
    n = model.n
    reach = []
    for i in range(model.mimo_i):
        seen = np.abs(model.B[:, i]) > 0
        for _ in range(n):
            seen = seen | (np.abs(model.A[:, seen]).sum(axis=1) > 0)
        reach.append(seen)
    owner = np.sum(reach, axis=0)
    if np.any(owner > 1):
        raise DomainError("per-path delays need a column-separable model")
    return [np.nonzero(r)[0] for r in reach]


def zoh(A: np.ndarray, B: np.ndarray, ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold pair via the exponential of ``[[A, B], [0, 0]]``."""
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * ts)
    return E[:n, :n], E[:n, n:]


def discretize(model: StateSpaceModel, ts: float) -> StateSpaceModel:
    """Exact ZOH discretisation with delays rounded to whole samples.

    Delays become shift-register states: an input buffer per input (the
    smallest delay in its column) and output taps for the excess on longer
    paths.  ``info['delay_steps']`` and ``info['delay_quantization']``
    record the rounding.
    """
    if ts <= 0:
        raise DomainError("sampling period must be positive")
    if model.is_discrete:
        raise DomainError("model is already discrete")
    poles = model.poles()
    if poles.size and np.any(poles.real != 0):
        fastest = 1.0 / np.max(np.abs(poles.real[poles.real != 0]))
        if ts > 0.5 * fastest:
            warnings.warn(f"ts={ts} exceeds half the fastest time constant {fastest:.3g} s",
                          RuntimeWarning, stacklevel=2)
    Ad, Bd = zoh(model.A, model.B, ts)
    n, m, p = model.n, model.mimo_i, model.mimo_o
    if model.io_delays is None or not np.any(model.io_delays):
        return StateSpaceModel(Ad, Bd, model.C, model.D, ts=ts,
                               info={**model.info, "delay_steps": np.zeros((p, m), int),
                                     "delay_quantization": 0.0})

    steps = np.rint(model.io_delays / ts).astype(int)
    quant = float(np.abs(model.io_delays - steps * ts).sum())
    in_steps = steps.min(axis=0)
    extra = steps - in_steps
    groups = _input_groups(model) if np.any(extra) else None
    if np.any(extra > 0) and np.any(model.D):
        raise DomainError("feedthrough with unequal path delays is not supported")

    n_in = int(in_steps.sum())
    n_tap = int(extra.sum())
    N = n + n_in + n_tap
    A = np.zeros((N, N))
    B = np.zeros((N, m))
    C = np.zeros((p, N))
    D = np.zeros((p, m))
    A[:n, :n] = Ad
    pos = n
    for i in range(m):
        d = in_steps[i]
        if d == 0:
            B[:n, i] = Bd[:, i]
            D[:, i] = model.D[:, i]
            continue
        first, last = pos, pos + d - 1
        B[first, i] = 1.0
        for s in range(first + 1, last + 1):
            A[s, s - 1] = 1.0
        A[:n, last] = Bd[:, i]
        C[:, last] += model.D[:, i]
        pos += d
    C[:, :n] = model.C
    for j in range(p):
        for i in range(m):
            e = extra[j, i]
            if e == 0:
                continue
            g = groups[i]
            tap_row = np.zeros(N)
            tap_row[g] = model.C[j, g]
            C[j, g] -= model.C[j, g]
            first = pos
            A[first] = tap_row
            for s in range(first + 1, first + e):
                A[s, s - 1] = 1.0
            C[j, first + e - 1] += 1.0
            pos += e
    return StateSpaceModel(A, B, C, D, ts=ts, core_states=np.arange(n),
                           info={**model.info, "delay_steps": steps, "delay_quantization": quant,
                                 "continuous": model})


def scale_model(model: StateSpaceModel, gain: float = 1.0, time_constant: float = 1.0) -> StateSpaceModel:
    """Copy of a continuous model with its gain and time constants scaled."""
    if model.is_discrete:
        raise DomainError("scale the continuous model before discretising")
    return replace(model, A=model.A / time_constant, B=model.B / time_constant,
                   C=model.C * gain, D=model.D * gain, info=dict(model.info))


@dataclass
class PlantState:
    x: np.ndarray
    t: float = 0.0


def initial_state(model: StateSpaceModel) -> PlantState:
    return PlantState(np.zeros(model.n), 0.0)


def step_plant(state: PlantState, model: StateSpaceModel, u) -> tuple[PlantState, np.ndarray]:
    """Advance a discrete plant one sample; returns the new state and its output."""
    if not model.is_discrete:
        raise DomainError("step_plant needs a discrete model")
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise SimulationDiverged("non-finite plant input")
    x = model.A @ state.x + model.B @ u
    if not np.all(np.isfinite(x)):
        raise SimulationDiverged("plant state diverged")
    y = model.C @ x + model.D @ u
    return PlantState(x, state.t + model.ts), y


class ContinuousPlant:
    """Event-exact simulation of a delayed continuous plant under held inputs.

    Used when the sampling period varies from step to step.  Every
    (output, input) path is carried as its own copy of the input's state
    group so each path can see its own delayed input.
    """

    def __init__(self, model: StateSpaceModel):
        if model.is_discrete:
            raise DomainError("ContinuousPlant needs a continuous model")
        self.model = model
        delays = model.io_delays if model.io_delays is not None else np.zeros((model.mimo_o, model.mimo_i))
        self.groups = _input_groups(model)
        self.paths = []
        for j in range(model.mimo_o):
            for i in range(model.mimo_i):
                g = self.groups[i]
                c = model.C[j, g]
                if not np.any(c):
                    continue
                self.paths.append((j, i, g, c, float(delays[j, i]), np.zeros(g.size)))
        self.t = 0.0
        self.history = [(-math.inf, np.zeros(model.mimo_i))]
        self._cache = {}

    def _pair(self, i, g, dt):
        key = (i, dt)
        hit = self._cache.get(key)
        if hit is None:
            A = self.model.A[np.ix_(g, g)]
            B = self.model.B[g, i:i + 1]
            hit = zoh(A, B, dt)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def _input_at(self, i, t):
        val = self.history[0][1][i]
        for t0, u in self.history:
            if t0 <= t:
                val = u[i]
            else:
                break
        return val

    def step(self, u, period: float) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise SimulationDiverged("non-finite plant input")
        self.history.append((self.t, u.copy()))
        t0, t1 = self.t, self.t + period
        y = np.zeros(self.model.mimo_o)
        new_paths = []
        for (j, i, g, c, delay, x) in self.paths:
            # input switch instants seen by this path within [t0, t1)
            cuts = [t0] + [ts + delay for ts, _ in self.history if t0 < ts + delay < t1] + [t1]
            for a, b in zip(cuts[:-1], cuts[1:]):
                dt = round(b - a, 12)
                if dt <= 0:
                    continue
                Ad, Bd = self._pair(i, g, dt)
                x = Ad @ x + Bd[:, 0] * self._input_at(i, a - delay + 1e-12)
            y[j] += c @ x
            new_paths.append((j, i, g, c, delay, x))
        self.paths = new_paths
        self.t = t1
        horizon = t1 - (self.max_delay + 1e-9)
        while len(self.history) > 2 and self.history[1][0] <= horizon:
            self.history.pop(0)
        if not np.all(np.isfinite(y)):
            raise SimulationDiverged("plant state diverged")
        return y + self.model.D @ u

    def core_state(self) -> np.ndarray:
        """Delay-free state estimate: each group taken from its shortest path."""
        x = np.zeros(self.model.n)
        best = {}
        for (j, i, g, c, delay, xs) in self.paths:
            if i not in best or delay < best[i][0]:
                best[i] = (delay, g, xs)
        for _, g, xs in best.values():
            x[g] = xs
        return x

    @property
    def max_delay(self) -> float:
        return max((p[4] for p in self.paths), default=0.0)


def write_model_csv(path, model: StateSpaceModel, extra: dict | None = None) -> None:
    """Matrix dump as labelled CSV blocks (A, B, C, D, delays, then extras)."""
    blocks = {"A": model.A, "B": model.B, "C": model.C, "D": model.D}
    if model.io_delays is not None:
        blocks["delays"] = model.io_delays
    for k, v in (extra or {}).items():
        blocks[k] = np.atleast_2d(v)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts", repr(model.ts)])
        for name, mat in blocks.items():
            w.writerow([name, *mat.shape])
            for row in np.atleast_2d(mat):
                w.writerow([repr(float(v)) for v in row])
